#include <algorithm>
#include <cmath>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mtperson/errors.hpp"
#include "mtperson/trainer.hpp"

namespace mtp::data {

namespace fs = std::filesystem;

namespace {

int index_of(const std::vector<std::string>& names, const std::string& n) {
  auto it = std::find(names.begin(), names.end(), n);
  return it == names.end() ? -1 : static_cast<int>(it - names.begin());
}

}  // namespace

DatasetManifest pseudo_label(const DatasetManifest& target, const std::optional<fs::path>& pose_checkpoint,
                             const std::optional<fs::path>& seg_checkpoint, const fs::path& out_dir,
                             const std::optional<ClassMapping>& mapping) {
  if (!pose_checkpoint && !seg_checkpoint) throw ConfigError("checkpoint", "need a pose or a segmentation checkpoint");
  fs::create_directories(out_dir);
  DatasetManifest out = target;
  out.root = fs::absolute(out_dir);
  for (auto& r : out.records) r.image = fs::relative(fs::absolute(target.resolve(r.image)), out.root).generic_string();

  std::vector<std::size_t> all(target.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  std::vector<cv::Size> sizes;
  sizes.reserve(all.size());
  for (const auto& r : target.records) {
    cv::Mat im = cv::imread(target.resolve(r.image).string(), cv::IMREAD_COLOR);
    if (im.empty()) throw LoadError("cannot read image " + target.resolve(r.image).string());
    sizes.push_back(im.size());
  }

  if (pose_checkpoint) {
    const auto info = read_checkpoint_info(*pose_checkpoint);
    if (!info.config.has(Task::Pose)) throw TaskError(pose_checkpoint->string() + " has no pose head");
    auto model = load_model(*pose_checkpoint);
    const auto nj = info.config.num_joints;
    out.joint_names = info.meta.value("joint_names", std::vector<std::string>{});
    if (static_cast<std::int64_t>(out.joint_names.size()) != nj) {
      out.joint_names.clear();
      for (std::int64_t j = 0; j < nj; ++j) out.joint_names.push_back("joint" + std::to_string(j));
    }
    out.joint_flip_pairs = info.meta.value("joint_flip_pairs", std::vector<std::pair<int, int>>{});
    const int neck = index_of(out.joint_names, "upper_neck"), top = index_of(out.joint_names, "head_top");
    const auto pred = train::predict(model, target, all, {Task::Pose});
    const double ih = static_cast<double>(info.config.backbone.input_height);
    const double iw = static_cast<double>(info.config.backbone.input_width);
    for (std::size_t i = 0; i < all.size(); ++i) {
      const double sx = sizes[i].width / iw, sy = sizes[i].height / ih;
      JointSet js = pred.joints[i];
      for (auto& jt : js.joints) {
        jt.x *= sx;
        jt.y *= sy;
      }
      const auto& old = target.records[i].joints;
      if (old && old->head_size > 0) {
        js.head_size = old->head_size;
      } else if (neck >= 0 && top >= 0) {
        js.head_size = std::max(1.0, std::hypot(js.joints[top].x - js.joints[neck].x, js.joints[top].y - js.joints[neck].y));
      } else {
        throw ConfigError("joint_names", "cannot derive head sizes without upper_neck and head_top joints");
      }
      out.records[i].joints = std::move(js);
    }
    out.tasks.pose = true;
  }

  if (seg_checkpoint) {
    const auto info = read_checkpoint_info(*seg_checkpoint);
    if (!info.config.has(Task::Segmentation)) throw TaskError(seg_checkpoint->string() + " has no segmentation head");
    auto model = load_model(*seg_checkpoint);
    const auto np = info.config.num_parts;
    auto names = info.meta.value("part_names", std::vector<std::string>{});
    auto flips = info.meta.value("part_flip_pairs", std::vector<std::pair<int, int>>{});
    if (static_cast<std::int64_t>(names.size()) != np) {
      names.clear();
      for (std::int64_t p = 0; p < np; ++p) names.push_back("part" + std::to_string(p));
    }
    if (mapping) {
      int k = 0;
      for (std::int64_t p = 0; p < np; ++p) {
        if (mapping->to[p] < 0) throw MappingError("predicted class " + std::to_string(p) + " has no target");
        k = std::max(k, mapping->to[p] + 1);
      }
      names = k == 5 ? merged_class_names() : std::vector<std::string>{};
      for (int p = static_cast<int>(names.size()); p < k; ++p) names.push_back("part" + std::to_string(p));
      flips.clear();
    }
    out.part_names = names;
    out.part_flip_pairs = flips;
    fs::create_directories(out_dir / "pseudo_masks");
    for (std::size_t b = 0; b < all.size(); b += 64) {
      std::vector<std::size_t> chunk(all.begin() + b, all.begin() + std::min(all.size(), b + 64));
      const auto pred = train::predict(model, target, chunk, {Task::Segmentation});
      for (std::size_t c = 0; c < chunk.size(); ++c) {
        const auto i = chunk[c];
        Mask mk = mapping ? merge_classes(pred.masks[c], *mapping) : pred.masks[c];
        cv::Mat m = from_mask(mk);
        if (m.size() != sizes[i]) cv::resize(m, m, sizes[i], 0, 0, cv::INTER_NEAREST);
        char name[40];
        std::snprintf(name, sizeof name, "pseudo_masks/%06zu.png", i);
        cv::imwrite((out_dir / name).string(), m);
        out.records[i].mask = name;
      }
    }
    out.tasks.segmentation = true;
  }
  out.validate();
  save_manifest(out, out_dir / "manifest.json");
  return out;
}

}  // namespace mtp::data
