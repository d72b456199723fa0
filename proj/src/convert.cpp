#include "mtperson/convert.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <regex>
#include <sstream>

#include <opencv2/imgcodecs.hpp>

#include "mtperson/errors.hpp"

namespace mtp::data {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

void require(const std::vector<std::string>& missing, const std::string& format, const fs::path& src) {
  if (missing.empty()) return;
  std::string msg = format + " layout at " + src.string() + " is incomplete; missing:";
  for (const auto& m : missing) msg += "\n  - " + m;
  throw LoadError(msg);
}

std::vector<fs::path> list_files(const fs::path& dir, const std::vector<std::string>& exts) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
    if (std::find(exts.begin(), exts.end(), ext) != exts.end()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::string rel(const fs::path& p, const fs::path& out) {
  return fs::relative(fs::absolute(p), fs::absolute(out)).generic_string();
}

void finish(DatasetManifest& m, const fs::path& out) {
  m.root = fs::absolute(out);
  m.validate();
  save_manifest(m, out / "manifest.json");
}

}  // namespace

DatasetManifest convert_market(const fs::path& src, const fs::path& out, const std::optional<fs::path>& attributes_csv) {
  const std::pair<const char*, Split> dirs[] = {
      {"bounding_box_train", Split::Train}, {"query", Split::Query}, {"bounding_box_test", Split::Gallery}};
  std::vector<std::string> missing;
  for (const auto& [d, s] : dirs)
    if (!fs::is_directory(src / d)) missing.push_back(std::string("directory ") + d + "/");
  if (attributes_csv && !fs::exists(*attributes_csv)) missing.push_back("attribute file " + attributes_csv->string());
  require(missing, "Market-1501", src);

  fs::create_directories(out);
  DatasetManifest m;
  m.name = "market1501";
  m.tasks.reid = true;
  std::map<std::int64_t, std::vector<int>> attrs;
  if (attributes_csv) {
    std::ifstream in(*attributes_csv);
    std::string line;
    std::getline(in, line);
    std::stringstream hs(line);
    std::vector<std::string> header;
    for (std::string c; std::getline(hs, c, ',');) header.push_back(c);
    if (header.size() < 2 || header[0] != "person_id")
      throw LoadError(attributes_csv->string() + ": header must start with person_id followed by attribute names");
    const auto market = market_attribute_schema();
    for (std::size_t a = 1; a < header.size(); ++a) {
      auto it = std::find_if(market.attributes.begin(), market.attributes.end(),
                             [&](const Attribute& x) { return x.name == header[a]; });
      m.attribute_schema.attributes.push_back({header[a], it == market.attributes.end() ? 2 : it->classes});
    }
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      std::stringstream ls(line);
      std::vector<int> v;
      for (std::string c; std::getline(ls, c, ',');) v.push_back(std::stoi(c));
      if (v.size() != header.size()) throw LoadError(attributes_csv->string() + ": row with wrong column count");
      attrs[v[0]] = std::vector<int>(v.begin() + 1, v.end());
    }
    m.tasks.attributes = true;
  }

  const std::regex name_re(R"(^(-?\d+)_c(\d+)s\d+_.*)");
  std::vector<std::string> unparsed;
  for (const auto& [d, split] : dirs) {
    for (const auto& f : list_files(src / d, {".jpg", ".png"})) {
      std::smatch mt;
      const auto stem = f.filename().string();
      if (!std::regex_match(stem, mt, name_re)) {
        unparsed.push_back(f.string());
        continue;
      }
      const auto pid = std::stoll(mt[1].str());
      SampleRecord r;
      r.image = rel(f, out);
      r.split = split;
      r.person_id = pid <= 0 ? -1 : pid;
      r.camera_id = std::stoll(mt[2].str());
      if (m.tasks.attributes) {
        auto it = attrs.find(pid);
        r.attributes = it != attrs.end() ? it->second
                                         : std::vector<int>(m.attribute_schema.size(), kMissingLabel);
      }
      m.records.push_back(std::move(r));
    }
  }
  if (!unparsed.empty())
    throw LoadError("Market-1501 file names must look like 0002_c1s1_000451_03.jpg; first offender: " + unparsed[0]);
  if (m.records.empty()) require({"image files in bounding_box_train/, query/, bounding_box_test/"}, "Market-1501", src);
  finish(m, out);
  return m;
}

DatasetManifest convert_mpii(const fs::path& src, const fs::path& out) {
  const auto ann_path = src / "annotations.json";
  require(fs::exists(ann_path) ? std::vector<std::string>{} : std::vector<std::string>{"annotations.json"}, "MPII", src);
  json ann;
  try {
    std::ifstream(ann_path) >> ann;
  } catch (const json::exception& e) {
    throw LoadError(ann_path.string() + ": " + e.what());
  }
  if (!ann.is_array()) throw LoadError(ann_path.string() + " must hold a list of annotations");

  fs::create_directories(out / "images");
  DatasetManifest m;
  m.name = "mpii";
  m.tasks.pose = true;
  m.joint_names = synthetic_joint_names();
  m.joint_flip_pairs = synthetic_joint_flip_pairs();
  const auto nj = m.joint_names.size();
  std::vector<std::string> problems;
  for (std::size_t i = 0; i < ann.size(); ++i) {
    const auto& a = ann[i];
    const auto where = "entry " + std::to_string(i);
    if (!a.contains("image")) { problems.push_back(where + ": image"); continue; }
    if (!a.contains("joints") || a.at("joints").size() != nj) { problems.push_back(where + ": joints (16 x [x, y, v])"); continue; }
    if (!a.contains("head_size") && !a.contains("head_box")) { problems.push_back(where + ": head_size or head_box"); continue; }
    const auto img = src / a.at("image").get<std::string>();
    if (!fs::exists(img)) { problems.push_back(where + ": image file " + img.string()); continue; }

    JointSet js;
    for (const auto& jt : a.at("joints"))
      js.joints.push_back({jt.at(0).get<double>(), jt.at(1).get<double>(), jt.at(2).get<double>() > 0});
    if (a.contains("head_size")) {
      js.head_size = a.at("head_size").get<double>();
    } else {
      const auto b = a.at("head_box").get<std::vector<double>>();
      js.head_size = 0.6 * std::hypot(b.at(2) - b.at(0), b.at(3) - b.at(1));
    }
    SampleRecord r;
    r.split = a.contains("split") ? split_from_string(a.at("split").get<std::string>()) : Split::Train;
    if (a.contains("bbox")) {
      const auto b = a.at("bbox").get<std::vector<double>>();
      cv::Mat full = cv::imread(img.string(), cv::IMREAD_COLOR);
      if (full.empty()) { problems.push_back(where + ": unreadable image " + img.string()); continue; }
      cv::Rect box(static_cast<int>(b.at(0)), static_cast<int>(b.at(1)), static_cast<int>(b.at(2)),
                   static_cast<int>(b.at(3)));
      box &= cv::Rect(0, 0, full.cols, full.rows);
      if (box.area() == 0) { problems.push_back(where + ": bbox outside the image"); continue; }
      char name[32];
      std::snprintf(name, sizeof name, "%06zu.png", i);
      cv::imwrite((out / "images" / name).string(), full(box));
      for (auto& jt : js.joints) {
        jt.x -= box.x;
        jt.y -= box.y;
        if (jt.x < 0 || jt.y < 0 || jt.x >= box.width || jt.y >= box.height) jt.visible = false;
      }
      r.image = std::string("images/") + name;
    } else {
      r.image = rel(img, out);
    }
    r.joints = std::move(js);
    m.records.push_back(std::move(r));
  }
  if (!problems.empty()) {
    if (problems.size() > 20) {
      const auto n = problems.size();
      problems.resize(20);
      problems.push_back("... and " + std::to_string(n - 20) + " more");
    }
    require(problems, "MPII", src);
  }
  finish(m, out);
  return m;
}

DatasetManifest convert_lip(const fs::path& src, const fs::path& out, bool merge_five) {
  const std::tuple<const char*, const char*, Split> parts[] = {
      {"TrainVal_images/train_images", "TrainVal_parsing_annotations/train_segmentations", Split::Train},
      {"TrainVal_images/val_images", "TrainVal_parsing_annotations/val_segmentations", Split::Val}};
  std::vector<std::string> missing;
  for (const auto& [im, seg, s] : parts) {
    if (!fs::is_directory(src / im)) missing.push_back(std::string("directory ") + im + "/");
    if (!fs::is_directory(src / seg)) missing.push_back(std::string("directory ") + seg + "/");
  }
  // Val is optional; train is not.
  std::erase_if(missing, [](const std::string& s) { return s.find("val_") != std::string::npos; });
  require(missing, "LIP", src);

  fs::create_directories(out);
  DatasetManifest m;
  m.name = merge_five ? "lip5" : "lip";
  m.tasks.segmentation = true;
  if (merge_five) {
    m.part_names = merged_class_names();
  } else {
    m.part_names = lip_class_names();
    m.part_flip_pairs = {{14, 15}, {16, 17}, {18, 19}};
  }
  const auto mapping = ClassMapping::lip_to_five();
  if (merge_five) fs::create_directories(out / "masks");
  std::vector<std::string> unpaired;
  for (const auto& [im, seg, split] : parts) {
    if (!fs::is_directory(src / im)) continue;
    for (const auto& f : list_files(src / im, {".jpg", ".png"})) {
      const auto mask = src / seg / (f.stem().string() + ".png");
      if (!fs::exists(mask)) {
        unpaired.push_back(f.string());
        continue;
      }
      SampleRecord r;
      r.image = rel(f, out);
      r.split = split;
      if (merge_five) {
        cv::Mat raw = cv::imread(mask.string(), cv::IMREAD_GRAYSCALE);
        if (raw.empty()) throw LoadError("cannot read " + mask.string());
        const auto merged = merge_classes(to_mask(raw), mapping);
        const auto name = "masks/" + f.stem().string() + ".png";
        cv::imwrite((out / name).string(), from_mask(merged));
        r.mask = name;
      } else {
        r.mask = rel(mask, out);
      }
      m.records.push_back(std::move(r));
    }
  }
  if (!unpaired.empty())
    throw LoadError("LIP images without a segmentation of the same name (" + std::to_string(unpaired.size()) +
                    "), first: " + unpaired[0]);
  if (m.records.empty()) require({"image files in TrainVal_images/train_images/"}, "LIP", src);
  finish(m, out);
  return m;
}

DatasetManifest convert_dataset(const std::string& format, const fs::path& source, const fs::path& out,
                                const std::optional<fs::path>& attributes_csv, bool merge_five) {
  if (!fs::is_directory(source)) throw LoadError("source directory " + source.string() + " does not exist");
  if (format == "market") return convert_market(source, out, attributes_csv);
  if (format == "mpii") return convert_mpii(source, out);
  if (format == "lip") return convert_lip(source, out, merge_five);
  throw ConfigError("format", "expected market, mpii or lip, got " + format);
}

}  // namespace mtp::data
