#include "mtperson/losses.hpp"

#include <cmath>
#include <limits>
#include <unordered_map>

#include "mtperson/errors.hpp"

namespace mtp::losses {

namespace F = torch::nn::functional;

std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::Triplet: return "triplet";
    case LossKind::PersonCE: return "person_ce";
    case LossKind::AttributeCE: return "attribute_ce";
    case LossKind::PoseL2: return "pose_l2";
    case LossKind::SegBootstrap: return "seg_bce";
  }
  return "?";
}

LossKind loss_from_string(const std::string& s) {
  for (auto k : kAllLosses)
    if (to_string(k) == s) return k;
  if (s == "pose") return LossKind::PoseL2;
  if (s == "segmentation" || s == "seg") return LossKind::SegBootstrap;
  if (s == "attributes") return LossKind::AttributeCE;
  throw ConfigError("losses", "unknown loss '" + s + "'");
}

namespace {

torch::Tensor label_tensor(const std::vector<std::int64_t>& labels, std::int64_t classes,
                           const torch::Device& device) {
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= classes)
      throw LabelError("label " + std::to_string(labels[i]) + " at row " + std::to_string(i) +
                       " outside [0, " + std::to_string(classes) + ")");
  return torch::tensor(labels, torch::TensorOptions().dtype(torch::kLong)).to(device);
}

}  // namespace

torch::Tensor pairwise_distances(const torch::Tensor& embeddings, bool squared) {
  if (embeddings.dim() != 2) throw ShapeError("embeddings must be B x C");
  const auto diff = embeddings.unsqueeze(1) - embeddings.unsqueeze(0);
  const auto d2 = diff.pow(2).sum(-1);
  if (squared) return d2;
  return torch::sqrt(torch::clamp_min(d2, kDistanceFloor));
}

torch::Tensor batch_hard_triplet(const torch::Tensor& embeddings, const std::vector<std::int64_t>& identities,
                                 MarginMode mode, bool squared) {
  if (embeddings.dim() != 2) throw ShapeError("embeddings must be B x C");
  const auto b = embeddings.size(0);
  if (static_cast<std::int64_t>(identities.size()) != b)
    throw ShapeError("identity count does not match batch size");
  std::unordered_map<std::int64_t, int> counts;
  for (auto id : identities) ++counts[id];
  if (counts.size() < 2) throw CompositionError("batch needs at least two identities");
  for (const auto& [id, n] : counts)
    if (n < 2) throw CompositionError("identity " + std::to_string(id) + " has a single sample in the batch");

  const auto dev = embeddings.device();
  const auto ids = torch::tensor(identities, torch::TensorOptions().dtype(torch::kLong)).to(dev);
  const auto same = ids.unsqueeze(1) == ids.unsqueeze(0);
  const auto eye = torch::eye(b, torch::TensorOptions().dtype(torch::kBool).device(dev));
  const auto positive = same & ~eye;

  const auto d = pairwise_distances(embeddings, squared);
  const auto inf = std::numeric_limits<double>::infinity();
  const auto hardest_pos = torch::where(positive, d, torch::full_like(d, -inf)).amax(1);
  const auto hardest_neg = torch::where(same, torch::full_like(d, inf), d).amin(1);
  const auto gap = hardest_pos - hardest_neg;
  if (mode.kind == MarginMode::Kind::Hinge) return torch::relu(gap + mode.margin).mean();
  return F::softplus(gap).mean();
}

torch::Tensor person_ce(const torch::Tensor& probabilities, const std::vector<std::int64_t>& labels) {
  if (probabilities.dim() != 2) throw ShapeError("probabilities must be B x N");
  if (static_cast<std::int64_t>(labels.size()) != probabilities.size(0))
    throw ShapeError("label count does not match batch size");
  const auto lbl = label_tensor(labels, probabilities.size(1), probabilities.device());
  return -torch::log(probabilities.gather(1, lbl.unsqueeze(1))).mean();
}

torch::Tensor person_ce_logits(const torch::Tensor& logits, const std::vector<std::int64_t>& labels) {
  if (logits.dim() != 2) throw ShapeError("logits must be B x N");
  if (static_cast<std::int64_t>(labels.size()) != logits.size(0))
    throw ShapeError("label count does not match batch size");
  const auto lbl = label_tensor(labels, logits.size(1), logits.device());
  return -torch::log_softmax(logits, 1).gather(1, lbl.unsqueeze(1)).mean();
}

namespace {

std::optional<torch::Tensor> attribute_mean(const std::vector<torch::Tensor>& log_probs,
                                            const torch::Tensor& labels) {
  if (labels.dim() != 2 || labels.size(1) != static_cast<std::int64_t>(log_probs.size()))
    throw ShapeError("attribute labels must be B x A");
  torch::Tensor sum;
  int present = 0;
  for (std::size_t a = 0; a < log_probs.size(); ++a) {
    const auto& lp = log_probs[a];
    if (lp.dim() != 2 || lp.size(0) != labels.size(0)) throw ShapeError("attribute prediction must be B x classes");
    const auto col = labels.select(1, static_cast<std::int64_t>(a)).to(torch::kLong);
    const auto mask = col != -1;
    const auto n = mask.sum().item<std::int64_t>();
    if (n == 0) continue;
    const auto valid = col.masked_select(mask);
    if ((valid < 0).any().item<bool>() || (valid >= lp.size(1)).any().item<bool>())
      throw LabelError("attribute " + std::to_string(a) + " label outside [0, " + std::to_string(lp.size(1)) + ")");
    const auto rows = mask.nonzero().squeeze(1);
    const auto term = -lp.index_select(0, rows).gather(1, valid.unsqueeze(1)).mean();
    sum = sum.defined() ? sum + term : term;
    ++present;
  }
  if (present == 0) return std::nullopt;
  return sum / static_cast<double>(present);
}

}  // namespace

std::optional<torch::Tensor> attribute_ce(const std::vector<torch::Tensor>& probabilities,
                                          const torch::Tensor& labels) {
  std::vector<torch::Tensor> lp;
  lp.reserve(probabilities.size());
  for (const auto& p : probabilities) lp.push_back(torch::log(p));
  return attribute_mean(lp, labels);
}

std::optional<torch::Tensor> attribute_ce_logits(const std::vector<torch::Tensor>& logits,
                                                 const torch::Tensor& labels) {
  std::vector<torch::Tensor> lp;
  lp.reserve(logits.size());
  for (const auto& l : logits) lp.push_back(torch::log_softmax(l, 1));
  return attribute_mean(lp, labels);
}

std::optional<torch::Tensor> pose_l2(const torch::Tensor& pred, const torch::Tensor& gt,
                                     const torch::Tensor& visible, double normalizer) {
  if (pred.sizes() != gt.sizes() || pred.dim() != 3 || pred.size(2) != 2)
    throw ShapeError("pose_l2 expects matching B x J x 2 predictions and targets");
  if (visible.dim() != 2 || visible.size(0) != pred.size(0) || visible.size(1) != pred.size(1))
    throw ShapeError("visibility must be B x J");
  if (!(normalizer > 0.0)) throw ConfigError("normalizer", "must be positive");
  const auto vis = visible.to(torch::kBool);
  const auto n = vis.sum().item<std::int64_t>();
  if (n == 0) return std::nullopt;
  const auto sq = ((pred - gt) / normalizer).pow(2).sum(-1);
  return torch::where(vis, sq, torch::zeros_like(sq)).sum() / static_cast<double>(n);
}

std::optional<torch::Tensor> bootstrapped_ce(const torch::Tensor& logits, const torch::Tensor& labels,
                                             double keep_fraction, std::int64_t ignore_label) {
  if (!(keep_fraction > 0.0 && keep_fraction <= 1.0))
    throw ConfigError("keep_fraction", "must lie in (0, 1]");
  auto lg = logits.dim() == 3 ? logits.unsqueeze(0) : logits;
  auto lb = labels.dim() == 2 ? labels.unsqueeze(0) : labels;
  if (lg.dim() != 4 || lb.dim() != 3 || lg.size(0) != lb.size(0) || lg.size(2) != lb.size(1) ||
      lg.size(3) != lb.size(2))
    throw ShapeError("bootstrapped_ce expects B x P x H x W logits and B x H x W labels");
  lb = lb.to(torch::kLong);
  const auto valid = lb != ignore_label;
  const auto n = valid.sum().item<std::int64_t>();
  if (n == 0) return std::nullopt;
  if ((lb.masked_select(valid) >= lg.size(1)).any().item<bool>() || (lb.masked_select(valid) < 0).any().item<bool>())
    throw LabelError("segmentation label outside [0, " + std::to_string(lg.size(1)) + ")");
  const auto safe = torch::where(valid, lb, torch::zeros_like(lb));
  const auto ce = -torch::log_softmax(lg, 1).gather(1, safe.unsqueeze(1)).squeeze(1);
  const auto pixel = ce.masked_select(valid);
  auto k = static_cast<std::int64_t>(std::ceil(keep_fraction * static_cast<double>(n) - 1e-9));
  k = std::clamp<std::int64_t>(k, 1, n);
  if (k == n) return pixel.mean();
  return std::get<0>(pixel.topk(k)).mean();
}

LossBundle combine(const std::map<LossKind, std::optional<torch::Tensor>>& parts,
                   const std::map<LossKind, double>& weights) {
  LossBundle out;
  for (const auto& [kind, w] : weights)
    if (!(w > 0.0)) throw ConfigError("loss_weights." + to_string(kind), "weights must be positive");
  for (const auto& [kind, loss] : parts) {
    if (!loss) continue;
    const auto it = weights.find(kind);
    const double w = it == weights.end() ? 1.0 : it->second;
    out.parts[kind] = *loss;
    out.weights[kind] = w;
    const auto term = *loss * w;
    out.total = out.total.defined() ? out.total + term : term;
  }
  if (!out.total.defined()) out.total = torch::zeros({});
  return out;
}

}  // namespace mtp::losses
