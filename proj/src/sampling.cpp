#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <opencv2/imgproc.hpp>

#include "mtperson/data.hpp"
#include "mtperson/errors.hpp"

namespace mtp::data {

// ------------------------------------------------------------ augmentation

void AugmentOps::validate(const TaskFlags& tasks) const {
  if (hflip_p < 0.0 || hflip_p > 1.0) throw ConfigError("augment.hflip", "probability must lie in [0, 1]");
  if (affine) {
    if (!tasks.pose && !tasks.segmentation)
      throw ConfigError("augment.affine", "affine augmentation requires a pose or segmentation dataset");
    if (affine->rotation_deg < 0 || affine->translation_frac < 0 || affine->scale_min <= 0 ||
        affine->scale_max < affine->scale_min)
      throw ConfigError("augment.affine", "invalid affine range");
  }
}

void hflip(Sample& s, const FlipPairs& pairs) {
  const int w = s.image.cols;
  cv::flip(s.image, s.image, 1);
  if (s.joints) {
    for (auto& jt : s.joints->joints) jt.x = (w - 1) - jt.x;
    for (const auto& [a, b] : pairs.joints) std::swap(s.joints->joints.at(a), s.joints->joints.at(b));
  }
  if (s.mask) {
    cv::Mat flipped;
    cv::flip(*s.mask, flipped, 1);
    if (!pairs.parts.empty()) {
      std::array<std::uint8_t, 256> lut;
      std::iota(lut.begin(), lut.end(), 0);
      for (const auto& [a, b] : pairs.parts) std::swap(lut.at(a), lut.at(b));
      for (int r = 0; r < flipped.rows; ++r) {
        auto* p = flipped.ptr<std::uint8_t>(r);
        for (int c = 0; c < flipped.cols; ++c) p[c] = lut[p[c]];
      }
    }
    s.mask = flipped;
  }
}

void apply_affine(Sample& s, double rotation_deg, double tx, double ty, double scale) {
  if (rotation_deg == 0.0 && tx == 0.0 && ty == 0.0 && scale == 1.0) return;
  const int h = s.image.rows, w = s.image.cols;
  cv::Mat m = cv::getRotationMatrix2D(cv::Point2f((w - 1) * 0.5f, (h - 1) * 0.5f), rotation_deg, scale);
  m.at<double>(0, 2) += tx;
  m.at<double>(1, 2) += ty;
  cv::warpAffine(s.image, s.image, m, s.image.size(), cv::INTER_LINEAR, cv::BORDER_REPLICATE);
  if (s.mask) {
    cv::Mat out;
    cv::warpAffine(*s.mask, out, m, s.mask->size(), cv::INTER_NEAREST, cv::BORDER_CONSTANT, cv::Scalar(0));
    s.mask = out;
  }
  if (s.joints) {
    for (auto& jt : s.joints->joints) {
      const double x = m.at<double>(0, 0) * jt.x + m.at<double>(0, 1) * jt.y + m.at<double>(0, 2);
      const double y = m.at<double>(1, 0) * jt.x + m.at<double>(1, 1) * jt.y + m.at<double>(1, 2);
      jt.x = x;
      jt.y = y;
      if (x < 0 || y < 0 || x > w - 1 || y > h - 1) jt.visible = false;
    }
    s.joints->head_size *= scale;
  }
}

Sample augment(Sample s, const AugmentOps& ops, const FlipPairs& pairs, Rng& rng) {
  if (ops.hflip_p > 0.0 && rng.bernoulli(ops.hflip_p)) hflip(s, pairs);
  if (ops.affine) {
    const auto& a = *ops.affine;
    const double rot = rng.uniform(-a.rotation_deg, a.rotation_deg);
    const double tx = rng.uniform(-a.translation_frac, a.translation_frac) * s.image.cols;
    const double ty = rng.uniform(-a.translation_frac, a.translation_frac) * s.image.rows;
    const double sc = rng.uniform(a.scale_min, a.scale_max);
    apply_affine(s, rot, tx, ty, sc);
  }
  return s;
}

// --------------------------------------------------------------- batching

std::vector<std::vector<std::size_t>> make_pk_batches(const std::vector<std::pair<std::size_t, std::int64_t>>& items,
                                                      int P, int K, std::uint64_t seed,
                                                      std::optional<std::size_t> num_batches) {
  if (P < 1 || K < 1) throw ConfigError("pk", "P and K must be positive");
  std::map<std::int64_t, std::vector<std::size_t>> by_id;
  for (const auto& [idx, pid] : items)
    if (pid >= 0) by_id[pid].push_back(idx);
  if (static_cast<int>(by_id.size()) < P)
    throw CompositionError("need at least P=" + std::to_string(P) + " identities, found " +
                           std::to_string(by_id.size()));
  std::vector<std::int64_t> ids;
  for (const auto& kv : by_id) ids.push_back(kv.first);

  Rng rng(seed);
  const std::size_t per_epoch = ids.size() / static_cast<std::size_t>(P);
  const std::size_t total = num_batches.value_or(per_epoch);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(total);
  while (out.size() < total) {
    rng.shuffle(ids);
    for (std::size_t e = 0; e < per_epoch && out.size() < total; ++e) {
      std::vector<std::size_t> batch;
      batch.reserve(static_cast<std::size_t>(P) * K);
      for (int p = 0; p < P; ++p) {
        auto pool = by_id[ids[e * P + p]];
        if (static_cast<int>(pool.size()) >= K) {
          for (int k = 0; k < K; ++k) std::swap(pool[k], pool[k + rng.below(pool.size() - k)]);
          batch.insert(batch.end(), pool.begin(), pool.begin() + K);
        } else {
          batch.insert(batch.end(), pool.begin(), pool.end());
          for (int k = static_cast<int>(pool.size()); k < K; ++k) batch.push_back(pool[rng.below(pool.size())]);
        }
      }
      out.push_back(std::move(batch));
    }
  }
  return out;
}

BatchPlan make_pk_batches(const DatasetManifest& m, int P, int K, std::uint64_t seed,
                          std::optional<std::size_t> num_batches, Split split) {
  std::vector<std::pair<std::size_t, std::int64_t>> items;
  for (std::size_t i = 0; i < m.records.size(); ++i) {
    const auto& r = m.records[i];
    if (r.split == split && r.person_id) items.emplace_back(i, *r.person_id);
  }
  BatchPlan plan;
  plan.P = P;
  plan.K = K;
  for (auto& b : make_pk_batches(items, P, K, seed, num_batches)) plan.batches.push_back({m.name, std::move(b)});
  return plan;
}

BatchPlan make_plain_batches(const DatasetManifest& m, int batch_size, std::uint64_t seed,
                             std::optional<std::size_t> num_batches, Split split) {
  if (batch_size < 1) throw ConfigError("batch_size", "must be positive");
  auto idx = m.indices(split);
  if (idx.empty()) throw CompositionError("dataset '" + m.name + "' has no " + to_string(split) + " records");
  Rng rng(seed);
  const std::size_t per_epoch = std::max<std::size_t>(1, idx.size() / static_cast<std::size_t>(batch_size));
  const std::size_t total = num_batches.value_or(per_epoch);
  BatchPlan plan;
  while (plan.batches.size() < total) {
    rng.shuffle(idx);
    for (std::size_t e = 0; e < per_epoch && plan.batches.size() < total; ++e) {
      Batch b{m.name, {}};
      for (int k = 0; k < batch_size; ++k) b.indices.push_back(idx[(e * batch_size + k) % idx.size()]);
      plan.batches.push_back(std::move(b));
    }
  }
  return plan;
}

BatchPlan interleave(const std::vector<PlanFragment>& fragments, std::uint64_t seed,
                     std::optional<std::size_t> steps) {
  if (fragments.empty()) throw ConfigError("datasets", "interleave needs at least one dataset");
  double total_size = 0.0;
  std::size_t total_batches = 0;
  for (const auto& f : fragments) {
    if (f.plan.batches.empty()) throw CompositionError("dataset '" + f.dataset + "' produced no batches");
    total_size += static_cast<double>(f.size);
    total_batches += f.plan.batches.size();
  }
  if (!(total_size > 0.0)) throw ConfigError("datasets", "dataset sizes must not all be zero");
  std::vector<double> cumulative;
  double acc = 0.0;
  for (const auto& f : fragments) cumulative.push_back(acc += static_cast<double>(f.size) / total_size);

  Rng rng(seed);
  std::vector<std::size_t> cursor(fragments.size(), 0);
  BatchPlan out;
  if (fragments.size() == 1) {
    out.P = fragments[0].plan.P;
    out.K = fragments[0].plan.K;
  }
  const std::size_t n = steps.value_or(total_batches);
  out.batches.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    const double u = rng.uniform();
    std::size_t d = 0;
    while (d + 1 < fragments.size() && u >= cumulative[d]) ++d;
    const auto& f = fragments[d];
    out.batches.push_back(f.plan.batches[cursor[d]++ % f.plan.batches.size()]);
  }
  return out;
}

// ------------------------------------------------------- label utilities

std::vector<std::string> lip_class_names() {
  return {"background", "hat",      "hair",  "glove", "sunglasses", "upper-clothes", "dress",
          "coat",       "socks",    "pants", "jumpsuit", "scarf",   "skirt",         "face",
          "left-arm",   "right-arm", "left-leg", "right-leg", "left-shoe", "right-shoe"};
}

std::vector<std::string> merged_class_names() { return {"background", "head", "upper-body", "lower-body", "shoes"}; }

ClassMapping ClassMapping::identity(int num_classes) {
  ClassMapping m;
  for (int c = 0; c < num_classes; ++c) m.to[c] = c;
  return m;
}

ClassMapping ClassMapping::lip_to_five() {
  ClassMapping m;
  m.to[0] = 0;
  for (int c : {1, 2, 4, 13, 11}) m.to[c] = 1;           // hat hair sunglasses face scarf
  for (int c : {5, 7, 6, 10, 3, 14, 15}) m.to[c] = 2;    // upper-clothes coat dress jumpsuit glove arms
  for (int c : {9, 12, 8, 16, 17}) m.to[c] = 3;          // pants skirt socks legs
  for (int c : {18, 19}) m.to[c] = 4;                    // shoes
  return m;
}

ClassMapping ClassMapping::from_json(const nlohmann::json& j) {
  ClassMapping m;
  for (const auto& [k, v] : j.items()) {
    const int src = std::stoi(k);
    if (src < 0 || src > 255) throw ConfigError("mapping", "source label out of range: " + k);
    m.to[src] = v.get<int>();
  }
  return m;
}

nlohmann::json ClassMapping::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (int c = 0; c < 256; ++c)
    if (to[c] >= 0) j[std::to_string(c)] = to[c];
  return j;
}

Mask merge_classes(const Mask& mask, const ClassMapping& mapping) {
  Mask out = mask;
  for (auto& v : out.labels) {
    if (v == kIgnoreLabel) continue;
    const int t = mapping.to[v];
    if (t < 0) throw MappingError("label " + std::to_string(v) + " has no mapping");
    v = static_cast<std::uint8_t>(t);
  }
  return out;
}

DatasetManifest limit_identities(const DatasetManifest& m, std::size_t n, std::uint64_t seed) {
  auto ids = m.identities(Split::Train);
  if (n > ids.size())
    throw BoundsError("requested " + std::to_string(n) + " identities, only " + std::to_string(ids.size()) +
                      " available");
  Rng rng(seed);
  rng.shuffle(ids);
  ids.resize(n);
  std::sort(ids.begin(), ids.end());
  DatasetManifest out = m;
  out.records.clear();
  for (const auto& r : m.records) {
    const bool limited = r.split == Split::Train && r.person_id && *r.person_id >= 0;
    if (!limited || std::binary_search(ids.begin(), ids.end(), *r.person_id)) out.records.push_back(r);
  }
  return out;
}

}  // namespace mtp::data
