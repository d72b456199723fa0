#include "mtperson/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mtperson/errors.hpp"

namespace mtp::metrics {

namespace {

double euclidean(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return std::sqrt(s);
}

void check_table(const EmbeddingTable& t, const char* side) {
  if (t.camera_ids.size() != t.person_ids.size())
    throw ShapeError(std::string(side) + ": camera_ids and person_ids differ in length");
  if (t.values.size() != t.count() * static_cast<std::size_t>(t.dim))
    throw ShapeError(std::string(side) + ": values size does not match count x dim");
}

}  // namespace

double ReidReport::cmc_at(int k) const {
  if (cmc.empty() || k < 1) return 0.0;
  return cmc[std::min<std::size_t>(static_cast<std::size_t>(k), cmc.size()) - 1];
}

ReidReport reid_eval_distances(std::span<const double> dist, const std::vector<std::int64_t>& query_ids,
                               const std::vector<std::int64_t>& query_cams,
                               const std::vector<std::int64_t>& gallery_ids,
                               const std::vector<std::int64_t>& gallery_cams) {
  const std::size_t nq = query_ids.size();
  const std::size_t ng = gallery_ids.size();
  if (query_cams.size() != nq || gallery_cams.size() != ng)
    throw ShapeError("camera id count does not match person id count");
  if (dist.size() != nq * ng) throw ShapeError("distance matrix must be queries x gallery");
  if (nq == 0) throw Error("reid evaluation needs at least one query");
  if (ng == 0) throw Error("reid evaluation needs a non-empty gallery");

  ReidReport rep;
  std::vector<double> hits(ng, 0.0);
  double ap_sum = 0.0;
  std::vector<std::size_t> order(ng);
  for (std::size_t q = 0; q < nq; ++q) {
    const double* row = dist.data() + q * ng;
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });
    int rank = 0;
    int found = 0;
    int first_hit = -1;
    double precision_sum = 0.0;
    for (std::size_t g : order) {
      const auto gid = gallery_ids[g];
      if (gid == -1) continue;
      if (gid == query_ids[q] && gallery_cams[g] == query_cams[q]) continue;
      ++rank;
      if (gid == query_ids[q]) {
        ++found;
        if (first_hit < 0) first_hit = rank;
        precision_sum += static_cast<double>(found) / rank;
      }
    }
    if (found == 0) {
      ++rep.excluded_queries;
      continue;
    }
    ++rep.scored_queries;
    ap_sum += precision_sum / found;
    for (std::size_t k = static_cast<std::size_t>(first_hit) - 1; k < ng; ++k) hits[k] += 1.0;
  }
  if (rep.scored_queries == 0) throw Error("no query has a valid gallery match");
  rep.mAP = ap_sum / rep.scored_queries;
  rep.cmc.resize(ng);
  for (std::size_t k = 0; k < ng; ++k) rep.cmc[k] = hits[k] / rep.scored_queries;
  return rep;
}

ReidReport reid_eval(const RetrievalSet& rs) {
  check_table(rs.query, "query");
  check_table(rs.gallery, "gallery");
  if (rs.query.dim != rs.gallery.dim) throw ShapeError("query and gallery embedding dims differ");
  const std::size_t nq = rs.query.count();
  const std::size_t ng = rs.gallery.count();
  std::vector<double> dist(nq * ng);
  for (std::size_t q = 0; q < nq; ++q)
    for (std::size_t g = 0; g < ng; ++g) dist[q * ng + g] = euclidean(rs.query.row(q), rs.gallery.row(g));
  return reid_eval_distances(dist, rs.query.person_ids, rs.query.camera_ids, rs.gallery.person_ids,
                             rs.gallery.camera_ids);
}

PoseReport pckh(std::span<const JointSet> preds, std::span<const JointSet> gts, double alpha) {
  if (preds.size() != gts.size()) throw ShapeError("pckh: prediction and ground-truth counts differ");
  if (gts.empty()) throw Error("pckh: no instances");
  const std::size_t nj = gts.front().size();
  std::vector<int> correct(nj, 0);
  std::vector<int> visible(nj, 0);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].size() != nj || preds[i].size() != nj)
      throw ShapeError("pckh: instance " + std::to_string(i) + " has a different joint count");
    if (!(gts[i].head_size > 0.0))
      throw Error("pckh: instance " + std::to_string(i) + " has non-positive head size");
    const double thr = alpha * gts[i].head_size;
    for (std::size_t j = 0; j < nj; ++j) {
      const auto& g = gts[i].joints[j];
      if (!g.visible) continue;
      ++visible[j];
      const auto& p = preds[i].joints[j];
      if (std::hypot(p.x - g.x, p.y - g.y) <= thr) ++correct[j];
    }
  }
  PoseReport rep;
  rep.visible_counts = visible;
  rep.per_joint.resize(nj);
  long tot_correct = 0, tot_visible = 0;
  for (std::size_t j = 0; j < nj; ++j) {
    if (visible[j] == 0) continue;
    rep.per_joint[j] = static_cast<double>(correct[j]) / visible[j];
    tot_correct += correct[j];
    tot_visible += visible[j];
  }
  if (tot_visible == 0) throw Error("pckh: no visible ground-truth joint");
  rep.avg = static_cast<double>(tot_correct) / static_cast<double>(tot_visible);
  return rep;
}

std::vector<std::int64_t> confusion_matrix(std::span<const Mask> preds, std::span<const Mask> gts,
                                           int num_classes, std::uint8_t ignore) {
  if (preds.size() != gts.size()) throw ShapeError("seg_eval: prediction and ground-truth counts differ");
  if (num_classes < 1) throw ConfigError("num_classes", "must be positive");
  const auto P = static_cast<std::size_t>(num_classes);
  std::vector<std::int64_t> cm(P * P, 0);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const Mask& p = preds[i];
    const Mask& g = gts[i];
    if (p.height != g.height || p.width != g.width || p.labels.size() != g.labels.size())
      throw ShapeError("seg_eval: mask " + std::to_string(i) + " shapes differ");
    for (std::size_t k = 0; k < g.labels.size(); ++k) {
      const auto gl = g.labels[k];
      const auto pl = p.labels[k];
      if (gl == ignore || pl == ignore) continue;
      if (gl >= P || pl >= P)
        throw LabelError("seg_eval: label " + std::to_string(std::max(gl, pl)) + " >= " +
                         std::to_string(num_classes));
      ++cm[gl * P + pl];
    }
  }
  return cm;
}

SegReport seg_eval(std::span<const Mask> preds, std::span<const Mask> gts, int num_classes,
                   std::uint8_t ignore) {
  const auto cm = confusion_matrix(preds, gts, num_classes, ignore);
  const auto P = static_cast<std::size_t>(num_classes);
  std::int64_t total = 0, diag = 0;
  for (std::size_t c = 0; c < P; ++c) {
    diag += cm[c * P + c];
    for (std::size_t d = 0; d < P; ++d) total += cm[c * P + d];
  }
  if (total == 0) throw Error("seg_eval: no scored pixels");
  SegReport rep;
  rep.overall_acc = static_cast<double>(diag) / static_cast<double>(total);
  rep.per_class_iou.resize(P);
  double acc_sum = 0.0, iou_sum = 0.0;
  int acc_n = 0, iou_n = 0;
  for (std::size_t c = 0; c < P; ++c) {
    std::int64_t row = 0, col = 0;
    for (std::size_t d = 0; d < P; ++d) {
      row += cm[c * P + d];
      col += cm[d * P + c];
    }
    const std::int64_t tp = cm[c * P + c];
    if (row > 0) {
      acc_sum += static_cast<double>(tp) / static_cast<double>(row);
      ++acc_n;
    }
    const std::int64_t uni = row + col - tp;
    if (uni > 0) {
      rep.per_class_iou[c] = static_cast<double>(tp) / static_cast<double>(uni);
      iou_sum += *rep.per_class_iou[c];
      ++iou_n;
    }
  }
  rep.mean_acc = acc_sum / acc_n;
  rep.mIoU = iou_sum / iou_n;
  return rep;
}

AttributeReport attribute_eval(const std::vector<std::vector<int>>& preds,
                               const std::vector<std::vector<int>>& gts, const AttributeSchema& schema) {
  if (preds.size() != gts.size()) throw ShapeError("attribute_eval: prediction and label counts differ");
  const std::size_t na = schema.size();
  std::vector<long> correct(na, 0), labeled(na, 0);
  for (std::size_t i = 0; i < gts.size(); ++i) {
    if (gts[i].size() != na || preds[i].size() != na)
      throw ShapeError("attribute_eval: sample " + std::to_string(i) + " does not match the schema");
    for (std::size_t a = 0; a < na; ++a) {
      const int g = gts[i][a];
      if (g == kMissingLabel) continue;
      if (g < 0 || g >= schema.attributes[a].classes)
        throw LabelError("attribute '" + schema.attributes[a].name + "' label " + std::to_string(g));
      ++labeled[a];
      if (preds[i][a] == g) ++correct[a];
    }
  }
  AttributeReport rep;
  rep.per_attribute.resize(na);
  double sum = 0.0;
  int n = 0;
  for (std::size_t a = 0; a < na; ++a) {
    rep.names.push_back(schema.attributes[a].name);
    if (labeled[a] == 0) continue;
    rep.per_attribute[a] = static_cast<double>(correct[a]) / static_cast<double>(labeled[a]);
    sum += *rep.per_attribute[a];
    ++n;
  }
  if (n == 0) throw Error("attribute_eval: no labeled attribute");
  rep.avg = sum / n;
  return rep;
}

// ---------------------------------------------------------------- reporting

std::vector<std::pair<std::string, double>> MetricReport::flatten() const {
  std::vector<std::pair<std::string, double>> out;
  if (reid) {
    out.emplace_back("reid.mAP", reid->mAP);
    for (int k : {1, 5, 10}) out.emplace_back("reid.cmc@" + std::to_string(k), reid->cmc_at(k));
  }
  if (pose) {
    out.emplace_back("pose.pckh", pose->avg);
    for (std::size_t j = 0; j < pose->per_joint.size(); ++j)
      if (pose->per_joint[j]) out.emplace_back("pose.pckh." + std::to_string(j), *pose->per_joint[j]);
  }
  if (seg) {
    out.emplace_back("seg.overall_acc", seg->overall_acc);
    out.emplace_back("seg.mean_acc", seg->mean_acc);
    out.emplace_back("seg.mIoU", seg->mIoU);
    for (std::size_t c = 0; c < seg->per_class_iou.size(); ++c)
      if (seg->per_class_iou[c]) out.emplace_back("seg.iou." + std::to_string(c), *seg->per_class_iou[c]);
  }
  if (attributes) {
    out.emplace_back("attr.avg", attributes->avg);
    for (std::size_t a = 0; a < attributes->names.size(); ++a)
      if (attributes->per_attribute[a])
        out.emplace_back("attr." + attributes->names[a], *attributes->per_attribute[a]);
  }
  return out;
}

std::optional<double> MetricReport::get(const std::string& name) const {
  for (const auto& [k, v] : flatten())
    if (k == name) return v;
  return std::nullopt;
}

namespace {

nlohmann::json optional_array(const std::vector<std::optional<double>>& v) {
  auto arr = nlohmann::json::array();
  for (const auto& x : v) arr.push_back(x ? nlohmann::json(*x) : nlohmann::json(nullptr));
  return arr;
}

std::vector<std::optional<double>> optional_vector(const nlohmann::json& arr) {
  std::vector<std::optional<double>> v;
  for (const auto& x : arr) v.push_back(x.is_null() ? std::nullopt : std::optional<double>(x.get<double>()));
  return v;
}

}  // namespace

nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json j = nlohmann::json::object();
  if (r.reid) {
    j["reid"] = {{"mAP", r.reid->mAP},
                 {"cmc@1", r.reid->cmc_at(1)},
                 {"cmc@5", r.reid->cmc_at(5)},
                 {"cmc@10", r.reid->cmc_at(10)},
                 {"cmc", r.reid->cmc},
                 {"scored_queries", r.reid->scored_queries},
                 {"excluded_queries", r.reid->excluded_queries}};
  }
  if (r.pose) {
    j["pose"] = {{"pckh", r.pose->avg},
                 {"per_joint", optional_array(r.pose->per_joint)},
                 {"visible_counts", r.pose->visible_counts}};
  }
  if (r.seg) {
    j["seg"] = {{"overall_acc", r.seg->overall_acc},
                {"mean_acc", r.seg->mean_acc},
                {"mIoU", r.seg->mIoU},
                {"per_class_iou", optional_array(r.seg->per_class_iou)}};
  }
  if (r.attributes) {
    j["attributes"] = {{"avg", r.attributes->avg},
                       {"names", r.attributes->names},
                       {"per_attribute", optional_array(r.attributes->per_attribute)}};
  }
  return j;
}

MetricReport report_from_json(const nlohmann::json& j) {
  MetricReport r;
  if (j.contains("reid")) {
    const auto& s = j.at("reid");
    ReidReport x;
    x.mAP = s.at("mAP").get<double>();
    x.cmc = s.at("cmc").get<std::vector<double>>();
    x.scored_queries = s.value("scored_queries", 0);
    x.excluded_queries = s.value("excluded_queries", 0);
    r.reid = std::move(x);
  }
  if (j.contains("pose")) {
    const auto& s = j.at("pose");
    PoseReport x;
    x.avg = s.at("pckh").get<double>();
    x.per_joint = optional_vector(s.at("per_joint"));
    x.visible_counts = s.value("visible_counts", std::vector<int>{});
    r.pose = std::move(x);
  }
  if (j.contains("seg")) {
    const auto& s = j.at("seg");
    SegReport x;
    x.overall_acc = s.at("overall_acc").get<double>();
    x.mean_acc = s.at("mean_acc").get<double>();
    x.mIoU = s.at("mIoU").get<double>();
    x.per_class_iou = optional_vector(s.at("per_class_iou"));
    r.seg = std::move(x);
  }
  if (j.contains("attributes")) {
    const auto& s = j.at("attributes");
    AttributeReport x;
    x.avg = s.at("avg").get<double>();
    x.names = s.at("names").get<std::vector<std::string>>();
    x.per_attribute = optional_vector(s.at("per_attribute"));
    r.attributes = std::move(x);
  }
  return r;
}

std::pair<std::string, std::string> to_csv(const MetricReport& r) {
  std::ostringstream head, row;
  row.precision(10);
  bool first = true;
  for (const auto& [k, v] : r.flatten()) {
    if (!first) {
      head << ',';
      row << ',';
    }
    first = false;
    head << k;
    row << v;
  }
  return {head.str(), row.str()};
}

}  // namespace mtp::metrics
