#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "mtperson/data.hpp"

namespace mtp::data {

/// Market-1501 layout: bounding_box_train/, query/, bounding_box_test/ with
/// file names <pid>_c<cam>s<seq>_<frame>_<n>.jpg. Ids -1 and 0 are junk.
/// `attributes_csv`, if given, has a header "person_id,<attribute names>"
/// and one row of class indices per training identity.
DatasetManifest convert_market(const std::filesystem::path& source, const std::filesystem::path& out,
                               const std::optional<std::filesystem::path>& attributes_csv = std::nullopt);

/// Pose layout: annotations.json holding a list of
/// {"image", "joints": [[x, y, v] x 16], "head_size" or "head_box": [x1, y1, x2, y2],
/// optional "bbox": [x, y, w, h], optional "split"} with images relative to
/// `source`. Entries with a bbox are cropped into out/images.
DatasetManifest convert_mpii(const std::filesystem::path& source, const std::filesystem::path& out);

/// LIP layout: TrainVal_images/{train,val}_images/*.jpg paired by file stem
/// with TrainVal_parsing_annotations/{train,val}_segmentations/*.png. With
/// `merge_five`, masks are rewritten into out/masks with the five merged classes.
DatasetManifest convert_lip(const std::filesystem::path& source, const std::filesystem::path& out,
                            bool merge_five = false);

/// Dispatches on "market", "mpii" or "lip".
DatasetManifest convert_dataset(const std::string& format, const std::filesystem::path& source,
                                const std::filesystem::path& out,
                                const std::optional<std::filesystem::path>& attributes_csv = std::nullopt,
                                bool merge_five = false);

}  // namespace mtp::data
