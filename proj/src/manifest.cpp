#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mtperson/data.hpp"
#include "mtperson/errors.hpp"

namespace mtp::data {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Query: return "query";
    case Split::Gallery: return "gallery";
    case Split::Val: return "val";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "query") return Split::Query;
  if (s == "gallery") return Split::Gallery;
  if (s == "val") return Split::Val;
  throw ConfigError("split", "unknown split '" + s + "'");
}

bool TaskFlags::has(Task t) const {
  switch (t) {
    case Task::ReId: return reid;
    case Task::Attributes: return attributes;
    case Task::Pose: return pose;
    case Task::Segmentation: return segmentation;
  }
  return false;
}

void TaskFlags::set(Task t, bool on) {
  switch (t) {
    case Task::ReId: reid = on; break;
    case Task::Attributes: attributes = on; break;
    case Task::Pose: pose = on; break;
    case Task::Segmentation: segmentation = on; break;
  }
}

std::vector<Task> TaskFlags::list() const {
  std::vector<Task> out;
  for (auto t : kAllTasks)
    if (has(t)) out.push_back(t);
  return out;
}

std::vector<std::int64_t> DatasetManifest::identities(std::optional<Split> split) const {
  std::set<std::int64_t> ids;
  for (const auto& r : records)
    if (r.person_id && *r.person_id >= 0 && (!split || r.split == *split)) ids.insert(*r.person_id);
  return {ids.begin(), ids.end()};
}

std::vector<std::size_t> DatasetManifest::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < records.size(); ++i)
    if (records[i].split == split) out.push_back(i);
  return out;
}

void DatasetManifest::validate() const {
  if (name.empty()) throw ManifestError(-1, "name", "missing dataset name");
  attribute_schema.validate();
  if (tasks.attributes && attribute_schema.empty())
    throw ManifestError(-1, "attributes", "attribute task declared without a schema");
  if (tasks.pose && joint_names.empty()) throw ManifestError(-1, "joints", "pose task declared without joints");
  if (tasks.segmentation && part_names.size() < 2)
    throw ManifestError(-1, "parts", "segmentation task needs at least two part classes");
  for (const auto& [a, b] : joint_flip_pairs)
    if (a < 0 || b < 0 || a >= static_cast<int>(joint_names.size()) || b >= static_cast<int>(joint_names.size()))
      throw ManifestError(-1, "joints.flip_pairs", "index out of range");
  for (const auto& [a, b] : part_flip_pairs)
    if (a < 0 || b < 0 || a >= static_cast<int>(part_names.size()) || b >= static_cast<int>(part_names.size()))
      throw ManifestError(-1, "parts.flip_pairs", "index out of range");

  const double margin_x = 0.25 * image_width;
  const double margin_y = 0.25 * image_height;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const long idx = static_cast<long>(i);
    if (r.image.empty()) throw ManifestError(idx, "image", "missing image path");
    if (tasks.reid != r.person_id.has_value())
      throw ManifestError(idx, "person_id", tasks.reid ? "required by the reid task" : "present without the reid task");
    if (tasks.attributes != r.attributes.has_value())
      throw ManifestError(idx, "attributes",
                          tasks.attributes ? "required by the attributes task" : "present without the attributes task");
    if (tasks.pose != r.joints.has_value())
      throw ManifestError(idx, "joints", tasks.pose ? "required by the pose task" : "present without the pose task");
    if (tasks.segmentation != r.mask.has_value())
      throw ManifestError(idx, "mask",
                          tasks.segmentation ? "required by the segmentation task" : "present without the segmentation task");
    if (r.attributes) {
      if (r.attributes->size() != attribute_schema.size())
        throw ManifestError(idx, "attributes", "expected " + std::to_string(attribute_schema.size()) + " labels");
      for (std::size_t a = 0; a < r.attributes->size(); ++a) {
        const int v = (*r.attributes)[a];
        if (v != kMissingLabel && (v < 0 || v >= attribute_schema.attributes[a].classes))
          throw ManifestError(idx, "attributes[" + std::to_string(a) + "]", "label " + std::to_string(v) + " out of range");
      }
    }
    if (r.joints) {
      if (r.joints->size() != joint_names.size())
        throw ManifestError(idx, "joints", "expected " + std::to_string(joint_names.size()) + " joints");
      if (!(r.joints->head_size > 0.0)) throw ManifestError(idx, "head_size", "pose records need a positive head size");
      if (image_width > 0 && image_height > 0) {
        for (std::size_t j = 0; j < r.joints->size(); ++j) {
          const auto& jt = r.joints->joints[j];
          if (!jt.visible) continue;
          if (jt.x < -margin_x || jt.x > image_width - 1 + margin_x || jt.y < -margin_y ||
              jt.y > image_height - 1 + margin_y)
            throw ManifestError(idx, "joints[" + std::to_string(j) + "]", "visible joint far outside the image");
        }
      }
    }
  }
}

json to_json(const DatasetManifest& m) {
  json j;
  j["name"] = m.name;
  auto tasks = json::array();
  for (auto t : m.tasks.list()) tasks.push_back(std::string(to_string(t)));
  j["tasks"] = tasks;
  auto attrs = json::array();
  for (const auto& a : m.attribute_schema.attributes) attrs.push_back({{"name", a.name}, {"classes", a.classes}});
  j["attributes"] = attrs;
  j["joints"] = {{"names", m.joint_names}, {"flip_pairs", m.joint_flip_pairs}};
  j["parts"] = {{"names", m.part_names}, {"flip_pairs", m.part_flip_pairs}};
  if (m.image_height > 0) j["image_size"] = {{"height", m.image_height}, {"width", m.image_width}};
  auto recs = json::array();
  for (const auto& r : m.records) {
    json rec;
    rec["image"] = r.image;
    rec["split"] = to_string(r.split);
    if (r.person_id) rec["person_id"] = *r.person_id;
    if (r.camera_id) rec["camera_id"] = *r.camera_id;
    if (r.attributes) rec["attributes"] = *r.attributes;
    if (r.joints) {
      auto pts = json::array();
      for (const auto& jt : r.joints->joints) pts.push_back({jt.x, jt.y, jt.visible ? 1 : 0});
      rec["joints"] = pts;
      rec["head_size"] = r.joints->head_size;
    }
    if (r.mask) rec["mask"] = *r.mask;
    recs.push_back(std::move(rec));
  }
  j["records"] = std::move(recs);
  return j;
}

namespace {

template <class T>
T field(const json& j, const char* key, long record) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ManifestError(record, key, e.what());
  }
}

}  // namespace

DatasetManifest manifest_from_json(const json& j, const fs::path& root) {
  DatasetManifest m;
  m.root = root;
  m.name = field<std::string>(j, "name", -1);
  for (const auto& t : field<std::vector<std::string>>(j, "tasks", -1)) {
    try {
      m.tasks.set(task_from_string(t));
    } catch (const TaskError& e) {
      throw ManifestError(-1, "tasks", e.what());
    }
  }
  if (j.contains("attributes")) {
    for (const auto& a : j.at("attributes"))
      m.attribute_schema.attributes.push_back({field<std::string>(a, "name", -1), field<int>(a, "classes", -1)});
  }
  if (j.contains("joints")) {
    m.joint_names = j.at("joints").value("names", std::vector<std::string>{});
    m.joint_flip_pairs = j.at("joints").value("flip_pairs", std::vector<std::pair<int, int>>{});
  }
  if (j.contains("parts")) {
    m.part_names = j.at("parts").value("names", std::vector<std::string>{});
    m.part_flip_pairs = j.at("parts").value("flip_pairs", std::vector<std::pair<int, int>>{});
  }
  if (j.contains("image_size")) {
    m.image_height = j.at("image_size").value("height", 0);
    m.image_width = j.at("image_size").value("width", 0);
  }
  const auto& recs = j.at("records");
  m.records.reserve(recs.size());
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const auto& rj = recs[i];
    const long idx = static_cast<long>(i);
    SampleRecord r;
    r.image = field<std::string>(rj, "image", idx);
    try {
      r.split = split_from_string(rj.value("split", std::string("train")));
    } catch (const ConfigError& e) {
      throw ManifestError(idx, "split", e.what());
    }
    if (rj.contains("person_id")) r.person_id = field<std::int64_t>(rj, "person_id", idx);
    if (rj.contains("camera_id")) r.camera_id = field<std::int64_t>(rj, "camera_id", idx);
    if (rj.contains("attributes")) r.attributes = field<std::vector<int>>(rj, "attributes", idx);
    if (rj.contains("joints")) {
      JointSet js;
      for (const auto& p : rj.at("joints")) {
        if (!p.is_array() || p.size() != 3) throw ManifestError(idx, "joints", "joints must be [x, y, visibility] triples");
        js.joints.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>() > 0});
      }
      if (!rj.contains("head_size")) throw ManifestError(idx, "head_size", "pose records need a head size");
      js.head_size = field<double>(rj, "head_size", idx);
      r.joints = std::move(js);
    }
    if (rj.contains("mask")) r.mask = field<std::string>(rj, "mask", idx);
    m.records.push_back(std::move(r));
  }
  m.validate();
  return m;
}

DatasetManifest load_manifest(const fs::path& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ManifestError(-1, "json", e.what());
  }
  auto m = manifest_from_json(j, path.parent_path());
  if (check_files && !m.records.empty()) {
    const std::size_t n = m.records.size();
    std::set<std::size_t> probe{0, n - 1, n / 2, n / 4, (3 * n) / 4};
    for (auto i : probe) {
      const auto& r = m.records[i];
      if (!fs::exists(m.resolve(r.image)))
        throw ManifestError(static_cast<long>(i), "image", "file not found: " + m.resolve(r.image).string());
      if (r.mask && !fs::exists(m.resolve(*r.mask)))
        throw ManifestError(static_cast<long>(i), "mask", "file not found: " + m.resolve(*r.mask).string());
    }
  }
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write manifest " + path.string());
  out << to_json(m).dump(1) << '\n';
}

Mask to_mask(const cv::Mat& m) {
  CV_Assert(m.type() == CV_8UC1);
  Mask out(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r) std::copy_n(m.ptr<std::uint8_t>(r), m.cols, &out.at(r, 0));
  return out;
}

cv::Mat from_mask(const Mask& m) {
  cv::Mat out(m.height, m.width, CV_8UC1);
  for (int r = 0; r < m.height; ++r) std::copy_n(m.labels.data() + static_cast<std::size_t>(r) * m.width, m.width, out.ptr<std::uint8_t>(r));
  return out;
}

Sample load_sample(const DatasetManifest& m, std::size_t index, int height, int width) {
  const auto& r = m.records.at(index);
  Sample s;
  cv::Mat bgr = cv::imread(m.resolve(r.image).string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw LoadError("cannot read image " + m.resolve(r.image).string());
  const double sx = static_cast<double>(width) / bgr.cols;
  const double sy = static_cast<double>(height) / bgr.rows;
  if (bgr.rows != height || bgr.cols != width) cv::resize(bgr, bgr, cv::Size(width, height), 0, 0, cv::INTER_LINEAR);
  cv::cvtColor(bgr, s.image, cv::COLOR_BGR2RGB);
  s.person_id = r.person_id;
  s.attributes = r.attributes;
  if (r.joints) {
    JointSet js = *r.joints;
    for (auto& jt : js.joints) {
      jt.x *= sx;
      jt.y *= sy;
    }
    js.head_size *= std::sqrt(sx * sy);
    s.joints = std::move(js);
  }
  if (r.mask) {
    cv::Mat mk = cv::imread(m.resolve(*r.mask).string(), cv::IMREAD_GRAYSCALE);
    if (mk.empty()) throw LoadError("cannot read mask " + m.resolve(*r.mask).string());
    if (mk.rows != height || mk.cols != width) cv::resize(mk, mk, cv::Size(width, height), 0, 0, cv::INTER_NEAREST);
    s.mask = mk;
  }
  return s;
}

}  // namespace mtp::data
