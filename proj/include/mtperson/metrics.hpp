#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtperson/types.hpp"

namespace mtp::metrics {

/// Embeddings for one side of a retrieval split, stored row-major (count x dim).
struct EmbeddingTable {
  int dim = 0;
  std::vector<float> values;
  std::vector<std::int64_t> person_ids;  ///< -1 marks junk images
  std::vector<std::int64_t> camera_ids;

  std::size_t count() const noexcept { return person_ids.size(); }
  std::span<const float> row(std::size_t i) const {
    return {values.data() + i * static_cast<std::size_t>(dim), static_cast<std::size_t>(dim)};
  }
};

struct RetrievalSet {
  EmbeddingTable query;
  EmbeddingTable gallery;
};

struct ReidReport {
  double mAP = 0.0;
  std::vector<double> cmc;  ///< cmc[k-1] = fraction of scored queries hit within rank k
  int scored_queries = 0;
  int excluded_queries = 0;  ///< queries without any valid gallery match

  double cmc_at(int k) const;
};

/// Single-query ReID protocol: gallery ranked by ascending Euclidean distance
/// (ties by gallery index). Same-id-same-camera and junk (-1) gallery entries
/// are dropped per query.
ReidReport reid_eval(const RetrievalSet& rs);

/// Same protocol on precomputed query x gallery distances (row-major).
ReidReport reid_eval_distances(std::span<const double> dist, const std::vector<std::int64_t>& query_ids,
                               const std::vector<std::int64_t>& query_cams,
                               const std::vector<std::int64_t>& gallery_ids,
                               const std::vector<std::int64_t>& gallery_cams);

struct PoseReport {
  std::vector<std::optional<double>> per_joint;  ///< nullopt: no visible instance
  std::vector<int> visible_counts;
  double avg = 0.0;
};

/// PCKh@alpha: a visible joint is correct iff its distance to ground truth is
/// at most alpha * head_size.
PoseReport pckh(std::span<const JointSet> preds, std::span<const JointSet> gts, double alpha = 0.5);

struct SegReport {
  double overall_acc = 0.0;
  double mean_acc = 0.0;
  double mIoU = 0.0;
  std::vector<std::optional<double>> per_class_iou;  ///< nullopt: absent from pred and gt
};

/// Confusion-matrix based segmentation scores over `num_classes` labels.
/// Pixels labeled `ignore` in the ground truth are excluded.
SegReport seg_eval(std::span<const Mask> preds, std::span<const Mask> gts, int num_classes,
                   std::uint8_t ignore = kIgnoreLabel);

/// Row-major num_classes x num_classes matrix, rows = ground truth.
std::vector<std::int64_t> confusion_matrix(std::span<const Mask> preds, std::span<const Mask> gts,
                                           int num_classes, std::uint8_t ignore = kIgnoreLabel);

struct AttributeReport {
  std::vector<std::string> names;
  std::vector<std::optional<double>> per_attribute;  ///< nullopt: no labeled sample
  double avg = 0.0;
};

/// `preds[i][a]` is the predicted class of sample i for attribute a;
/// `gts[i][a]` the label or kMissingLabel.
AttributeReport attribute_eval(const std::vector<std::vector<int>>& preds,
                               const std::vector<std::vector<int>>& gts, const AttributeSchema& schema);

/// Task-keyed evaluation results.
struct MetricReport {
  std::optional<ReidReport> reid;
  std::optional<PoseReport> pose;
  std::optional<SegReport> seg;
  std::optional<AttributeReport> attributes;

  /// Flat metric name -> value view ("reid.mAP", "reid.cmc@1", "pose.pckh", ...).
  std::vector<std::pair<std::string, double>> flatten() const;
  std::optional<double> get(const std::string& name) const;
};

nlohmann::json to_json(const MetricReport& r);
MetricReport report_from_json(const nlohmann::json& j);
/// Header line and value line, comma separated, one column per flattened metric.
std::pair<std::string, std::string> to_csv(const MetricReport& r);

}  // namespace mtp::metrics
