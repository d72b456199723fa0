// Brute-force reference implementations. Deliberately naive: explicit loops,
// long double accumulation, no shared code with the library.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <torch/torch.h>

#include "mtperson/metrics.hpp"
#include "mtperson/random.hpp"
#include "mtperson/types.hpp"

namespace oracle {

struct Reid {
  double mAP = 0.0;
  std::vector<double> cmc;
  int scored = 0;
};

inline long double dist(const mtp::metrics::EmbeddingTable& a, std::size_t i, const mtp::metrics::EmbeddingTable& b,
                        std::size_t j) {
  long double s = 0;
  for (int d = 0; d < a.dim; ++d) {
    const long double x = static_cast<long double>(a.values[i * a.dim + d]) - b.values[j * b.dim + d];
    s += x * x;
  }
  return std::sqrt(s);
}

// Rank of each valid gallery item = number of valid items strictly before it
// (smaller distance, or equal distance and smaller index), plus one.
inline Reid reid(const mtp::metrics::RetrievalSet& rs) {
  const auto& q = rs.query;
  const auto& g = rs.gallery;
  Reid out;
  out.cmc.assign(g.count(), 0.0);
  long double ap_sum = 0;
  for (std::size_t i = 0; i < q.count(); ++i) {
    std::vector<std::size_t> valid;
    for (std::size_t j = 0; j < g.count(); ++j) {
      if (g.person_ids[j] == -1) continue;
      if (g.person_ids[j] == q.person_ids[i] && g.camera_ids[j] == q.camera_ids[i]) continue;
      valid.push_back(j);
    }
    std::vector<long double> d(g.count());
    for (auto j : valid) d[j] = dist(q, i, g, j);
    std::vector<int> relevant_ranks;
    for (auto j : valid) {
      if (g.person_ids[j] != q.person_ids[i]) continue;
      int rank = 1;
      for (auto k : valid)
        if (d[k] < d[j] || (d[k] == d[j] && k < j)) ++rank;
      relevant_ranks.push_back(rank);
    }
    if (relevant_ranks.empty()) continue;
    std::sort(relevant_ranks.begin(), relevant_ranks.end());
    long double ap = 0;
    for (std::size_t r = 0; r < relevant_ranks.size(); ++r)
      ap += static_cast<long double>(r + 1) / relevant_ranks[r];
    ap_sum += ap / relevant_ranks.size();
    for (std::size_t k = relevant_ranks[0] - 1; k < out.cmc.size(); ++k) out.cmc[k] += 1;
    ++out.scored;
  }
  if (out.scored > 0) {
    out.mAP = static_cast<double>(ap_sum / out.scored);
    for (auto& c : out.cmc) c /= out.scored;
  }
  return out;
}

struct Pck {
  std::vector<std::optional<double>> per_joint;
  double avg = 0.0;
};

inline Pck pckh(const std::vector<mtp::JointSet>& pred, const std::vector<mtp::JointSet>& gt, double alpha) {
  const std::size_t J = gt.at(0).joints.size();
  Pck out;
  long long total = 0, hit = 0;
  for (std::size_t j = 0; j < J; ++j) {
    long long n = 0, c = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      const auto& g = gt[i].joints[j];
      if (!g.visible) continue;
      const auto& p = pred[i].joints[j];
      const long double dx = p.x - g.x, dy = p.y - g.y;
      ++n;
      if (std::sqrt(dx * dx + dy * dy) <= alpha * gt[i].head_size) ++c;
    }
    total += n;
    hit += c;
    out.per_joint.push_back(n ? std::optional<double>(static_cast<double>(c) / n) : std::nullopt);
  }
  out.avg = total ? static_cast<double>(hit) / total : 0.0;
  return out;
}

struct Seg {
  double overall = 0.0, mean_acc = 0.0, miou = 0.0;
  std::vector<std::optional<double>> iou;
};

// Per-class set counting over the pixel lists; no matrix.
inline Seg seg(const std::vector<mtp::Mask>& pred, const std::vector<mtp::Mask>& gt, int P, int ignore) {
  Seg out;
  long long valid = 0, correct = 0;
  std::vector<long long> tp(P, 0), gt_n(P, 0), pr_n(P, 0);
  for (std::size_t i = 0; i < gt.size(); ++i)
    for (std::size_t k = 0; k < gt[i].labels.size(); ++k) {
      const int g = gt[i].labels[k], p = pred[i].labels[k];
      if (g == ignore || p == ignore) continue;
      ++valid;
      for (int c = 0; c < P; ++c) {
        if (g == c) ++gt_n[c];
        if (p == c) ++pr_n[c];
        if (g == c && p == c) ++tp[c];
      }
      if (g == p) ++correct;
    }
  out.overall = static_cast<double>(correct) / valid;
  long double acc = 0, iou = 0;
  int acc_n = 0, iou_n = 0;
  for (int c = 0; c < P; ++c) {
    if (gt_n[c] > 0) {
      acc += static_cast<long double>(tp[c]) / gt_n[c];
      ++acc_n;
    }
    const long long uni = gt_n[c] + pr_n[c] - tp[c];
    if (uni > 0) {
      const long double v = static_cast<long double>(tp[c]) / uni;
      out.iou.push_back(static_cast<double>(v));
      iou += v;
      ++iou_n;
    } else {
      out.iou.push_back(std::nullopt);
    }
  }
  out.mean_acc = static_cast<double>(acc / acc_n);
  out.miou = static_cast<double>(iou / iou_n);
  return out;
}

struct Attr {
  std::vector<std::optional<double>> per;
  double avg = 0.0;
};

inline Attr attributes(const std::vector<std::vector<int>>& pred, const std::vector<std::vector<int>>& gt,
                       std::size_t A) {
  Attr out;
  long double sum = 0;
  int n_present = 0;
  for (std::size_t a = 0; a < A; ++a) {
    int n = 0, c = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      if (gt[i][a] < 0) continue;
      ++n;
      if (pred[i][a] == gt[i][a]) ++c;
    }
    if (n) {
      out.per.push_back(static_cast<double>(c) / n);
      sum += static_cast<long double>(c) / n;
      ++n_present;
    } else {
      out.per.push_back(std::nullopt);
    }
  }
  out.avg = static_cast<double>(sum / n_present);
  return out;
}

// Batch-hard triplet: per anchor, scan every other sample.
inline double triplet(const std::vector<std::vector<double>>& e, const std::vector<std::int64_t>& ids, bool hinge,
                      double margin) {
  const std::size_t B = e.size();
  auto d = [&](std::size_t i, std::size_t j) {
    long double s = 0;
    for (std::size_t k = 0; k < e[i].size(); ++k) s += (e[i][k] - e[j][k]) * (e[i][k] - e[j][k]);
    return std::sqrt(std::max<long double>(s, 1e-12L));
  };
  long double total = 0;
  for (std::size_t a = 0; a < B; ++a) {
    long double hp = -1, hn = 1e300;
    for (std::size_t j = 0; j < B; ++j) {
      if (j == a) continue;
      if (ids[j] == ids[a]) hp = std::max(hp, d(a, j));
      else hn = std::min(hn, d(a, j));
    }
    const long double x = hp - hn;
    total += hinge ? std::max<long double>(0, x + margin) : std::log1p(std::exp(x));
  }
  return static_cast<double>(total / B);
}

// Per-pixel CE via explicit log-sum-exp, full descending sort, mean of the top k.
inline double bootstrapped(const torch::Tensor& logits, const torch::Tensor& labels, double keep, int ignore) {
  auto lg = logits.to(torch::kDouble).contiguous();
  auto lb = labels.to(torch::kLong).contiguous();
  if (lg.dim() == 3) {
    lg = lg.unsqueeze(0);
    lb = lb.unsqueeze(0);
  }
  const auto B = lg.size(0), P = lg.size(1), H = lg.size(2), W = lg.size(3);
  auto la = lg.accessor<double, 4>();
  auto ba = lb.accessor<std::int64_t, 3>();
  std::vector<long double> ce;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t y = 0; y < H; ++y)
      for (std::int64_t x = 0; x < W; ++x) {
        const auto t = ba[b][y][x];
        if (t == ignore) continue;
        long double mx = -1e300;
        for (std::int64_t p = 0; p < P; ++p) mx = std::max<long double>(mx, la[b][p][y][x]);
        long double s = 0;
        for (std::int64_t p = 0; p < P; ++p) s += std::exp(la[b][p][y][x] - mx);
        ce.push_back(mx + std::log(s) - la[b][t][y][x]);
      }
  std::sort(ce.begin(), ce.end(), std::greater<>());
  const auto n = static_cast<double>(ce.size());
  std::size_t k = static_cast<std::size_t>(std::ceil(keep * n - 1e-9));
  k = std::clamp<std::size_t>(k, 1, ce.size());
  long double s = 0;
  for (std::size_t i = 0; i < k; ++i) s += ce[i];
  return static_cast<double>(s / k);
}

// Max relative error between autograd and central differences of a scalar
// function of one double tensor.
inline double gradient_error(const std::function<torch::Tensor(const torch::Tensor&)>& f, torch::Tensor x,
                             double h = 1e-6) {
  x = x.to(torch::kDouble).detach().clone().set_requires_grad(true);
  auto y = f(x);
  auto g = torch::autograd::grad({y}, {x}, {}, false, false, true)[0];
  if (!g.defined()) g = torch::zeros_like(x);
  g = g.contiguous();
  auto flat = x.detach().clone().contiguous();
  auto fp = flat.view(-1);
  double worst = 0.0;
  torch::NoGradGuard ng;
  for (std::int64_t i = 0; i < fp.numel(); ++i) {
    const double v = fp[i].item<double>();
    fp[i] = v + h;
    const double up = f(flat).item<double>();
    fp[i] = v - h;
    const double dn = f(flat).item<double>();
    fp[i] = v;
    const double num = (up - dn) / (2 * h);
    const double ana = g.view(-1)[i].item<double>();
    const double err = std::abs(num - ana) / std::max({std::abs(num), std::abs(ana), 1e-4});
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace oracle
