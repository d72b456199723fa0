#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace mtp::losses {

enum class LossKind { Triplet, PersonCE, AttributeCE, PoseL2, SegBootstrap };

std::string to_string(LossKind k);
LossKind loss_from_string(const std::string& s);
inline constexpr LossKind kAllLosses[] = {LossKind::Triplet, LossKind::PersonCE, LossKind::AttributeCE,
                                          LossKind::PoseL2, LossKind::SegBootstrap};

struct MarginMode {
  enum class Kind { Hinge, SoftPlus } kind = Kind::SoftPlus;
  double margin = 0.0;  ///< Hinge only

  static MarginMode hinge(double m) { return {Kind::Hinge, m}; }
  static MarginMode softplus() { return {Kind::SoftPlus, 0.0}; }
};

/// Distance clamp applied before the square root.
inline constexpr double kDistanceFloor = 1e-12;

/// Pairwise Euclidean distances between the rows of `embeddings` (B x C).
/// The squared distance is clamped at kDistanceFloor before the square root
/// unless `squared` is set.
torch::Tensor pairwise_distances(const torch::Tensor& embeddings, bool squared = false);

/// Batch-hard triplet loss: per anchor the farthest same-identity sample and
/// the nearest other-identity sample. Every identity needs >= 2 samples and
/// at least two identities must be present (CompositionError otherwise).
torch::Tensor batch_hard_triplet(const torch::Tensor& embeddings, const std::vector<std::int64_t>& identities,
                                 MarginMode mode = MarginMode::softplus(), bool squared = false);

/// Mean of -ln p[label] over rows of a B x N probability matrix.
torch::Tensor person_ce(const torch::Tensor& probabilities, const std::vector<std::int64_t>& labels);
/// Same loss computed from logits through log-softmax.
torch::Tensor person_ce_logits(const torch::Tensor& logits, const std::vector<std::int64_t>& labels);

/// Unweighted mean over attributes of per-attribute batch-mean cross-entropy.
/// `labels` is B x A with -1 for missing; attributes without any label in the
/// batch are left out. Returns nullopt when every label is missing.
std::optional<torch::Tensor> attribute_ce(const std::vector<torch::Tensor>& probabilities,
                                          const torch::Tensor& labels);
std::optional<torch::Tensor> attribute_ce_logits(const std::vector<torch::Tensor>& logits,
                                                 const torch::Tensor& labels);

/// Mean over visible joints of the squared Euclidean distance between
/// predicted and ground-truth coordinates, both divided by `normalizer`.
/// `pred`, `gt`: B x J x 2; `visible`: B x J bool. nullopt without visible joints.
std::optional<torch::Tensor> pose_l2(const torch::Tensor& pred, const torch::Tensor& gt,
                                     const torch::Tensor& visible, double normalizer);

/// Per-pixel cross-entropy of B x P x H x W logits against B x H x W labels,
/// averaged over the ceil(keep_fraction * n) hardest non-ignored pixels.
std::optional<torch::Tensor> bootstrapped_ce(const torch::Tensor& logits, const torch::Tensor& labels,
                                             double keep_fraction = 0.25, std::int64_t ignore_label = 255);

/// Per-task losses for one batch plus their weighted total.
struct LossBundle {
  std::map<LossKind, torch::Tensor> parts;
  std::map<LossKind, double> weights;
  torch::Tensor total;

  double value(LossKind k) const { return parts.at(k).item<double>(); }
  bool has(LossKind k) const { return parts.count(k) != 0; }
};

/// total = sum of weight * loss over present parts (missing weights default
/// to 1). Empty losses are dropped. Weights must be positive.
LossBundle combine(const std::map<LossKind, std::optional<torch::Tensor>>& parts,
                   const std::map<LossKind, double>& weights = {});

}  // namespace mtp::losses
