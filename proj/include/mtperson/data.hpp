#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>

#include "mtperson/random.hpp"
#include "mtperson/types.hpp"

namespace mtp::data {

enum class Split { Train, Query, Gallery, Val };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct TaskFlags {
  bool reid = false;
  bool attributes = false;
  bool pose = false;
  bool segmentation = false;

  bool has(Task t) const;
  void set(Task t, bool on = true);
  std::vector<Task> list() const;
  bool operator==(const TaskFlags&) const = default;
};

/// One person crop and whichever labels its dataset provides.
struct SampleRecord {
  std::string image;  ///< relative to the manifest directory
  std::optional<std::int64_t> person_id;
  std::optional<std::int64_t> camera_id;
  std::optional<std::vector<int>> attributes;  ///< kMissingLabel marks a missing label
  std::optional<JointSet> joints;
  std::optional<std::string> mask;  ///< single-channel PNG of class indices
  Split split = Split::Train;
};

struct DatasetManifest {
  std::string name;
  TaskFlags tasks;
  AttributeSchema attribute_schema;
  std::vector<std::string> joint_names;
  std::vector<std::pair<int, int>> joint_flip_pairs;
  std::vector<std::string> part_names;
  std::vector<std::pair<int, int>> part_flip_pairs;
  /// Nominal image size when all images share it (0 = unknown).
  int image_height = 0;
  int image_width = 0;
  std::vector<SampleRecord> records;
  /// Directory that relative record paths resolve against.
  std::filesystem::path root;

  std::size_t size() const noexcept { return records.size(); }
  std::filesystem::path resolve(const std::string& rel) const { return root / rel; }
  /// Distinct person ids among records of `split` (all splits if nullopt), sorted.
  std::vector<std::int64_t> identities(std::optional<Split> split = std::nullopt) const;
  std::vector<std::size_t> indices(Split split) const;
  /// Throws ManifestError naming the record index and field.
  void validate() const;
};

nlohmann::json to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j, const std::filesystem::path& root);

/// Parses and validates a manifest; spot-checks that referenced files exist.
DatasetManifest load_manifest(const std::filesystem::path& path, bool check_files = true);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);

// ------------------------------------------------------------------ samples

/// Decoded sample at model input resolution. Images are RGB uint8.
struct Sample {
  cv::Mat image;
  std::optional<std::int64_t> person_id;
  std::optional<std::vector<int>> attributes;
  std::optional<JointSet> joints;
  std::optional<cv::Mat> mask;  ///< CV_8UC1
};

/// Loads record `index`, resizing image (bilinear), mask (nearest) and joints
/// to height x width.
Sample load_sample(const DatasetManifest& m, std::size_t index, int height, int width);

Mask to_mask(const cv::Mat& m);
cv::Mat from_mask(const Mask& m);

// ------------------------------------------------------------ augmentation

struct AffineRange {
  double rotation_deg = 30.0;
  double translation_frac = 0.1;
  double scale_min = 0.75;
  double scale_max = 1.25;
};

struct AugmentOps {
  double hflip_p = 0.0;
  std::optional<AffineRange> affine;

  /// Affine augmentation only makes sense for pose/segmentation data.
  void validate(const TaskFlags& tasks) const;
};

struct FlipPairs {
  std::vector<std::pair<int, int>> joints;
  std::vector<std::pair<int, int>> parts;
};

/// Mirrors image and mask, reflects joint x (x' = W - 1 - x) and swaps
/// left/right joints and part labels.
void hflip(Sample& s, const FlipPairs& pairs);

/// Similarity transform about the image center applied to image, mask and
/// joints; joints leaving the image become invisible.
void apply_affine(Sample& s, double rotation_deg, double tx, double ty, double scale);

Sample augment(Sample s, const AugmentOps& ops, const FlipPairs& pairs, Rng& rng);

// --------------------------------------------------------------- batching

struct Batch {
  std::string dataset;
  std::vector<std::size_t> indices;  ///< record indices in that dataset
};

struct BatchPlan {
  std::vector<Batch> batches;
  int P = 0;
  int K = 0;
};

/// PK batches over (record index, person id) items. Each epoch shuffles the
/// identities and takes consecutive groups of P; identities with fewer than K
/// samples are topped up by sampling with replacement. Produces
/// `num_batches` batches (default: one epoch). CompositionError when fewer
/// than P identities exist.
std::vector<std::vector<std::size_t>> make_pk_batches(const std::vector<std::pair<std::size_t, std::int64_t>>& items,
                                                      int P, int K, std::uint64_t seed,
                                                      std::optional<std::size_t> num_batches = std::nullopt);

/// PK batches over the records of `split` in a manifest.
BatchPlan make_pk_batches(const DatasetManifest& m, int P, int K, std::uint64_t seed,
                          std::optional<std::size_t> num_batches = std::nullopt, Split split = Split::Train);

/// Shuffled fixed-size batches (epochs reshuffled) for datasets without triplet loss.
BatchPlan make_plain_batches(const DatasetManifest& m, int batch_size, std::uint64_t seed,
                             std::optional<std::size_t> num_batches = std::nullopt, Split split = Split::Train);

struct PlanFragment {
  std::string dataset;
  std::size_t size = 0;  ///< dataset record count, the sampling weight
  BatchPlan plan;
};

/// Interleaves whole batches: each step draws dataset i with probability
/// size_i / sum(size) and emits that dataset's next batch (cycling).
/// Default step count is the total number of fragment batches.
BatchPlan interleave(const std::vector<PlanFragment>& fragments, std::uint64_t seed,
                     std::optional<std::size_t> steps = std::nullopt);

// ------------------------------------------------------- label utilities

/// Source label -> target label; entries of -1 are unmapped.
struct ClassMapping {
  std::array<int, 256> to{};

  ClassMapping() { to.fill(-1); }
  static ClassMapping identity(int num_classes);
  /// The 20 LIP classes merged into background/head/upper/lower/shoes.
  static ClassMapping lip_to_five();
  static ClassMapping from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

std::vector<std::string> lip_class_names();
std::vector<std::string> merged_class_names();

/// Pixelwise relabel; kIgnoreLabel passes through. MappingError on unmapped labels.
Mask merge_classes(const Mask& mask, const ClassMapping& mapping);

/// Keeps train records of `n` identities chosen under `seed`; records
/// without a person id and non-train splits are kept. BoundsError if n is
/// larger than the number of train identities.
DatasetManifest limit_identities(const DatasetManifest& m, std::size_t n, std::uint64_t seed);

// --------------------------------------------------------------- synthetic

struct SyntheticOptions {
  int num_ids = 32;
  int samples_per_id = 8;
  int height = 128;
  int width = 64;
  std::uint64_t seed = 0;
  /// Label sample 0 of every identity as query and the rest as gallery.
  bool query_gallery = false;
  std::int64_t id_offset = 0;
  std::string name = "synthetic";
};

/// Joint names of the 16-joint layout used by the synthetic generator.
std::vector<std::string> synthetic_joint_names();
std::vector<std::pair<int, int>> synthetic_joint_flip_pairs();
AttributeSchema synthetic_attribute_schema();
/// Part region each synthetic joint is drawn inside of.
std::vector<int> synthetic_joint_parts();

/// Renders articulated stick figures with exact joints, 5-class part masks,
/// attributes and identities into `out_dir` and writes out_dir/manifest.json.
DatasetManifest generate_synthetic(const SyntheticOptions& opt, const std::filesystem::path& out_dir);

}  // namespace mtp::data
