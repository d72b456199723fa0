#include <cmath>
#include <cstdio>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mtperson/data.hpp"
#include "mtperson/errors.hpp"

namespace mtp::data {

namespace fs = std::filesystem;

namespace {

// 16-joint layout, person-centric left/right.
enum J : int {
  kRAnkle, kRKnee, kRHip, kLHip, kLKnee, kLAnkle, kPelvis, kThorax,
  kUpperNeck, kHeadTop, kRWrist, kRElbow, kRShoulder, kLShoulder, kLElbow, kLWrist, kNumJoints
};

enum Part : std::uint8_t { kBackground = 0, kHead = 1, kUpper = 2, kLower = 3, kShoes = 4 };

constexpr double kPi = 3.14159265358979323846;

const cv::Scalar kShirtPalette[] = {{200, 40, 40}, {40, 170, 60}, {40, 70, 200}, {230, 210, 40}, {235, 235, 235}};
const cv::Scalar kPantsPalette[] = {{30, 30, 30}, {30, 50, 120}, {120, 80, 40}, {130, 130, 130}, {200, 190, 150}};
const cv::Scalar kSkinPalette[] = {{240, 200, 170}, {200, 150, 110}, {130, 90, 60}};

struct Identity {
  int shirt = 0, pants = 0;
  bool hat = false, long_sleeves = false, long_pants = false;
  cv::Scalar shirt_rgb, pants_rgb, shoe_rgb, skin_rgb, hat_rgb;
  double scale = 1.0, shoulder = 1.0, limb = 1.0;
};

cv::Scalar jitter(const cv::Scalar& c, Rng& rng, double amount) {
  cv::Scalar out;
  for (int i = 0; i < 3; ++i) out[i] = std::clamp(c[i] + rng.uniform(-amount, amount), 0.0, 255.0);
  return out;
}

Identity make_identity(Rng& rng) {
  Identity id;
  id.shirt = static_cast<int>(rng.below(5));
  id.pants = static_cast<int>(rng.below(5));
  id.hat = rng.bernoulli(0.4);
  id.long_sleeves = rng.bernoulli(0.5);
  id.long_pants = rng.bernoulli(0.6);
  id.shirt_rgb = jitter(kShirtPalette[id.shirt], rng, 20);
  id.pants_rgb = jitter(kPantsPalette[id.pants], rng, 15);
  id.shoe_rgb = cv::Scalar(rng.uniform(0, 255), rng.uniform(0, 255), rng.uniform(0, 255));
  id.skin_rgb = jitter(kSkinPalette[rng.below(3)], rng, 10);
  id.hat_rgb = cv::Scalar(rng.uniform(0, 255), rng.uniform(0, 255), rng.uniform(0, 255));
  id.scale = rng.uniform(0.88, 1.0);
  id.shoulder = rng.uniform(0.85, 1.15);
  id.limb = rng.uniform(0.85, 1.2);
  return id;
}

cv::Point2d dir(double angle_from_down) { return {std::sin(angle_from_down), std::cos(angle_from_down)}; }

cv::Point pt(const cv::Point2d& p) { return {static_cast<int>(std::lround(p.x)), static_cast<int>(std::lround(p.y))}; }

/// Draws onto the RGB image and the label mask with identical primitives.
struct Canvas {
  cv::Mat& img;
  cv::Mat& mask;

  void line(const cv::Point2d& a, const cv::Point2d& b, int thickness, const cv::Scalar& color, std::uint8_t label) {
    cv::line(img, pt(a), pt(b), color, thickness, cv::LINE_8);
    cv::line(mask, pt(a), pt(b), cv::Scalar(label), thickness, cv::LINE_8);
  }
  void poly(const std::vector<cv::Point2d>& pts, const cv::Scalar& color, std::uint8_t label) {
    std::vector<cv::Point> p;
    for (const auto& x : pts) p.push_back(pt(x));
    cv::fillConvexPoly(img, p, color, cv::LINE_8);
    cv::fillConvexPoly(mask, p, cv::Scalar(label), cv::LINE_8);
  }
  void circle(const cv::Point2d& c, int r, const cv::Scalar& color, std::uint8_t label) {
    cv::circle(img, pt(c), r, color, cv::FILLED, cv::LINE_8);
    cv::circle(mask, pt(c), r, cv::Scalar(label), cv::FILLED, cv::LINE_8);
  }
  void ellipse(const cv::Point2d& c, cv::Size axes, const cv::Scalar& color, std::uint8_t label) {
    cv::ellipse(img, pt(c), axes, 0, 0, 360, color, cv::FILLED, cv::LINE_8);
    cv::ellipse(mask, pt(c), axes, 0, 0, 360, cv::Scalar(label), cv::FILLED, cv::LINE_8);
  }
};

struct Rendered {
  cv::Mat image;  // RGB
  cv::Mat mask;
  JointSet joints;
};

Rendered render(const Identity& id, int height, int width, int camera, Rng& rng) {
  const double s = height / 128.0 * id.scale;
  cv::Mat img(height, width, CV_8UC3);
  cv::Mat mask(height, width, CV_8UC1, cv::Scalar(kBackground));
  const double g = rng.uniform(70, 190);
  img.setTo(cv::Scalar(g + rng.uniform(-25, 25), g + rng.uniform(-25, 25), g + rng.uniform(-25, 25)));
  Canvas cv_{img, mask};

  std::vector<cv::Point2d> p(kNumJoints);
  const double lean = rng.uniform(-10, 10) * kPi / 180.0;
  const cv::Point2d up = {std::sin(lean), -std::cos(lean)};
  const cv::Point2d side = {-up.y, up.x};  // image-right, perpendicular to the spine
  p[kPelvis] = {width / 2.0 + rng.uniform(-3, 3) * s, height * 0.53 + rng.uniform(-3, 3) * s};
  p[kThorax] = p[kPelvis] + up * (30 * s);
  p[kUpperNeck] = p[kThorax] + up * (5 * s);
  const double head_r = 7 * s;
  const cv::Point2d head_c = p[kUpperNeck] + up * (head_r + 1 * s);
  p[kHeadTop] = head_c + up * (0.8 * head_r);
  const double sh = 9 * s * id.shoulder;
  const double hip = 5 * s;
  // The person faces the camera: their right side is on the image left.
  p[kRShoulder] = p[kThorax] - side * sh;
  p[kLShoulder] = p[kThorax] + side * sh;
  p[kRHip] = p[kPelvis] - side * hip;
  p[kLHip] = p[kPelvis] + side * hip;

  auto limb = [&](int root, int mid, int end, double len1, double len2, double a1, double a2) {
    p[mid] = p[root] + dir(a1) * len1;
    p[end] = p[mid] + dir(a2) * len2;
  };
  const double deg = kPi / 180.0;
  {
    const double ra = -rng.uniform(-8, 25) * deg, la = rng.uniform(-8, 25) * deg;
    limb(kRHip, kRKnee, kRAnkle, 21 * s, 20 * s, ra, ra + rng.uniform(-35, 10) * deg);
    limb(kLHip, kLKnee, kLAnkle, 21 * s, 20 * s, la, la - rng.uniform(-35, 10) * deg);
  }
  {
    const double ra = -rng.uniform(20, 80) * deg, la = rng.uniform(20, 80) * deg;
    limb(kRShoulder, kRElbow, kRWrist, 14 * s, 13 * s, ra, ra + rng.uniform(0, 60) * deg);
    limb(kLShoulder, kLElbow, kLWrist, 14 * s, 13 * s, la, la - rng.uniform(0, 60) * deg);
  }

  const int leg_w = std::max(2, static_cast<int>(std::lround(6 * s * id.limb)));
  const int arm_w = std::max(2, static_cast<int>(std::lround(4.5 * s * id.limb)));
  const cv::Scalar shin = id.long_pants ? id.pants_rgb : id.skin_rgb;
  const cv::Scalar forearm = id.long_sleeves ? id.shirt_rgb : id.skin_rgb;

  for (auto [h, k, a] : {std::array<int, 3>{kRHip, kRKnee, kRAnkle}, std::array<int, 3>{kLHip, kLKnee, kLAnkle}}) {
    cv_.line(p[h], p[k], leg_w, id.pants_rgb, kLower);
    cv_.line(p[k], p[a], leg_w, shin, kLower);
  }
  const int shoe_a = std::max(2, static_cast<int>(std::lround(5 * s))), shoe_b = std::max(2, static_cast<int>(std::lround(3.5 * s)));
  cv_.ellipse(p[kRAnkle] + cv::Point2d(-1.5 * s, 2 * s), {shoe_a, shoe_b}, id.shoe_rgb, kShoes);
  cv_.ellipse(p[kLAnkle] + cv::Point2d(1.5 * s, 2 * s), {shoe_a, shoe_b}, id.shoe_rgb, kShoes);

  const cv::Point2d top = p[kThorax] + up * (2 * s);
  cv_.poly({top - side * sh, top + side * sh, p[kLHip] + side * (2 * s) + up * (4 * s),
            p[kRHip] - side * (2 * s) + up * (4 * s)},
           id.shirt_rgb, kUpper);
  cv_.poly({p[kRHip] - side * (3 * s) + up * (3 * s), p[kLHip] + side * (3 * s) + up * (3 * s),
            p[kLHip] + side * (3 * s) - up * (4 * s), p[kRHip] - side * (3 * s) - up * (4 * s)},
           id.pants_rgb, kLower);

  cv_.line(p[kThorax] + up * (3.5 * s), head_c, std::max(2, static_cast<int>(std::lround(4 * s))), id.skin_rgb, kHead);
  cv_.circle(head_c, static_cast<int>(std::lround(head_r)), id.skin_rgb, kHead);
  if (id.hat) {
    cv_.poly({head_c - side * (head_r + 2 * s) + up * (0.3 * head_r), head_c + side * (head_r + 2 * s) + up * (0.3 * head_r),
              head_c + side * (head_r + 2 * s) + up * (0.3 * head_r - 2 * s),
              head_c - side * (head_r + 2 * s) + up * (0.3 * head_r - 2 * s)},
             id.hat_rgb, kHead);
    cv_.poly({head_c - side * (0.8 * head_r) + up * (0.3 * head_r), head_c + side * (0.8 * head_r) + up * (0.3 * head_r),
              head_c + side * (0.7 * head_r) + up * (1.3 * head_r), head_c - side * (0.7 * head_r) + up * (1.3 * head_r)},
             id.hat_rgb, kHead);
  }

  for (auto [sh_, el, wr] : {std::array<int, 3>{kRShoulder, kRElbow, kRWrist}, std::array<int, 3>{kLShoulder, kLElbow, kLWrist}}) {
    cv_.line(p[sh_], p[el], arm_w, id.shirt_rgb, kUpper);
    cv_.line(p[el], p[wr], arm_w, forearm, kUpper);
  }

  // Per-camera illumination and sensor noise.
  static constexpr double kGain[] = {1.0, 0.85, 1.12};
  cv::Mat f;
  img.convertTo(f, CV_32FC3, kGain[camera % 3]);
  cv::Mat noise(f.size(), CV_32FC3);
  for (int r = 0; r < noise.rows; ++r) {
    auto* q = noise.ptr<float>(r);
    for (int c = 0; c < noise.cols * 3; ++c) q[c] = static_cast<float>(3.0 * rng.normal());
  }
  f += noise;
  f.convertTo(img, CV_8UC3);

  Rendered out{img, mask, {}};
  out.joints.head_size = 2 * head_r;
  for (const auto& q : p)
    out.joints.joints.push_back({q.x, q.y, q.x >= 0 && q.y >= 0 && q.x <= width - 1 && q.y <= height - 1});
  return out;
}

}  // namespace

std::vector<std::string> synthetic_joint_names() {
  return {"r_ankle", "r_knee",     "r_hip",    "l_hip",      "l_knee",     "l_ankle",  "pelvis",  "thorax",
          "upper_neck", "head_top", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist"};
}

std::vector<std::pair<int, int>> synthetic_joint_flip_pairs() {
  return {{kRAnkle, kLAnkle}, {kRKnee, kLKnee}, {kRHip, kLHip}, {kRWrist, kLWrist}, {kRElbow, kLElbow}, {kRShoulder, kLShoulder}};
}

AttributeSchema synthetic_attribute_schema() {
  return {{{"shirt_color", 5}, {"pants_color", 5}, {"hat", 2}, {"long_sleeves", 2}, {"long_pants", 2}}};
}

std::vector<int> synthetic_joint_parts() {
  return {kShoes, kLower, kLower, kLower, kLower, kShoes, kLower, kUpper,
          kHead,  kHead,  kUpper, kUpper, kUpper, kUpper, kUpper, kUpper};
}

DatasetManifest generate_synthetic(const SyntheticOptions& opt, const fs::path& out_dir) {
  if (opt.num_ids < 2) throw ConfigError("identities", "re-identification needs at least 2 identities");
  if (opt.samples_per_id < 1) throw ConfigError("images_per_id", "must be positive");
  if (opt.height < 32 || opt.width < 16) throw ConfigError("size", "image too small for the figure renderer");
  if (opt.query_gallery && opt.samples_per_id < 2)
    throw ConfigError("images_per_id", "query/gallery split needs at least 2 images per identity");

  fs::create_directories(out_dir / "images");
  fs::create_directories(out_dir / "masks");
  DatasetManifest m;
  m.name = opt.name;
  m.root = out_dir;
  m.tasks = {true, true, true, true};
  m.attribute_schema = synthetic_attribute_schema();
  m.joint_names = synthetic_joint_names();
  m.joint_flip_pairs = synthetic_joint_flip_pairs();
  m.part_names = merged_class_names();
  m.image_height = opt.height;
  m.image_width = opt.width;

  Rng master(opt.seed);
  const std::vector<int> png{cv::IMWRITE_PNG_COMPRESSION, 6};
  for (int i = 0; i < opt.num_ids; ++i) {
    Rng rng(master.fork());
    const Identity id = make_identity(rng);
    for (int k = 0; k < opt.samples_per_id; ++k) {
      const int camera = k % 3;
      auto r = render(id, opt.height, opt.width, camera, rng);
      char stem[32];
      std::snprintf(stem, sizeof stem, "%05d_%03d", i, k);
      const std::string img_rel = std::string("images/") + stem + ".png";
      const std::string mask_rel = std::string("masks/") + stem + ".png";
      cv::Mat bgr;
      cv::cvtColor(r.image, bgr, cv::COLOR_RGB2BGR);
      if (!cv::imwrite((out_dir / img_rel).string(), bgr, png) || !cv::imwrite((out_dir / mask_rel).string(), r.mask, png))
        throw Error("failed to write synthetic sample under " + out_dir.string());
      SampleRecord rec;
      rec.image = img_rel;
      rec.mask = mask_rel;
      rec.person_id = opt.id_offset + i;
      rec.camera_id = camera;
      rec.attributes = std::vector<int>{id.shirt, id.pants, id.hat ? 1 : 0, id.long_sleeves ? 1 : 0, id.long_pants ? 1 : 0};
      rec.joints = r.joints;
      rec.split = opt.query_gallery ? (k == 0 ? Split::Query : Split::Gallery) : Split::Train;
      m.records.push_back(std::move(rec));
    }
  }
  m.validate();
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace mtp::data
