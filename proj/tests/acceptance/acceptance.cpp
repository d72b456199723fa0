// Acceptance run: one PASS/FAIL line per criterion.
// Usage: acceptance [criterion numbers...]   (all when none given)
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>

#include "mtperson/backbone.hpp"
#include "mtperson/data.hpp"
#include "mtperson/heads.hpp"
#include "mtperson/losses.hpp"
#include "mtperson/metrics.hpp"
#include "mtperson/trainer.hpp"
#include "support/generators.hpp"
#include "support/oracles.hpp"
#include "support/tempdir.hpp"

using namespace mtp;
using losses::LossKind;
using losses::MarginMode;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

const testutil::TempDir& work() {
  static testutil::TempDir d("mtp-acceptance");
  return d;
}

// ------------------------------------------------------------------ 1

Outcome metric_oracles() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  double worst = 0;
  int mismatches = 0;
  auto diff = [&](double a, double b) { worst = std::max(worst, std::abs(a - b)); };
  auto same_opt = [&](const std::optional<double>& a, const std::optional<double>& b) {
    if (a.has_value() != b.has_value()) ++mismatches;
    else if (a) diff(*a, *b);
  };
  for (int it = 0; it < 200; ++it) {
    const auto rs = gen::retrieval(rng);
    const auto got = metrics::reid_eval(rs);
    const auto want = oracle::reid(rs);
    if (got.scored_queries != want.scored) ++mismatches;
    diff(got.mAP, want.mAP);
    for (std::size_t k = 0; k < want.cmc.size(); ++k) diff(got.cmc.at(k), want.cmc[k]);

    const auto p = gen::pose(rng);
    const auto gp = metrics::pckh(p.pred, p.gt);
    const auto wp = oracle::pckh(p.pred, p.gt, 0.5);
    diff(gp.avg, wp.avg);
    for (std::size_t j = 0; j < wp.per_joint.size(); ++j) same_opt(gp.per_joint.at(j), wp.per_joint[j]);

    const auto s = gen::seg(rng);
    const auto gs = metrics::seg_eval(s.pred, s.gt, s.classes);
    const auto ws = oracle::seg(s.pred, s.gt, s.classes, kIgnoreLabel);
    diff(gs.overall_acc, ws.overall);
    diff(gs.mean_acc, ws.mean_acc);
    diff(gs.mIoU, ws.miou);
    for (std::size_t c = 0; c < ws.iou.size(); ++c) same_opt(gs.per_class_iou.at(c), ws.iou[c]);

    const auto a = gen::attributes(rng);
    const auto ga = metrics::attribute_eval(a.pred, a.gt, a.schema);
    const auto wa = oracle::attributes(a.pred, a.gt, a.schema.size());
    diff(ga.avg, wa.avg);
    for (std::size_t k = 0; k < wa.per.size(); ++k) same_opt(ga.per_attribute.at(k), wa.per[k]);
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-9 && mismatches == 0 && secs < 60,
          "200 instances x 4 metrics, max |diff| " + fmt(worst) + ", presence mismatches " +
              std::to_string(mismatches) + ", " + fmt(secs, 3) + " s"};
}

// ------------------------------------------------------------------ 2

Outcome triplet_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(2002);
  double worst = 0;
  for (int it = 0; it < 500; ++it) {
    const int P = 2 + static_cast<int>(rng.below(7)), K = 2 + static_cast<int>(rng.below(4));
    const int D = 1 + static_cast<int>(rng.below(16));
    std::vector<std::vector<double>> e;
    std::vector<std::int64_t> ids;
    auto t = torch::empty({P * K, D}, torch::kDouble);
    for (int p = 0; p < P; ++p)
      for (int k = 0; k < K; ++k) {
        std::vector<double> row;
        for (int d = 0; d < D; ++d) {
          row.push_back(rng.normal());
          t[p * K + k][d] = row.back();
        }
        e.push_back(row);
        ids.push_back(1000 + p * 7);
      }
    const double margin = rng.uniform(0.05, 1.0);
    worst = std::max(worst, std::abs(losses::batch_hard_triplet(t, ids, MarginMode::softplus()).item<double>() -
                                     oracle::triplet(e, ids, false, 0)));
    worst = std::max(worst, std::abs(losses::batch_hard_triplet(t, ids, MarginMode::hinge(margin)).item<double>() -
                                     oracle::triplet(e, ids, true, margin)));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-6 && secs < 60,
          "500 PK batches x 2 margin modes, max |diff| " + fmt(worst) + ", " + fmt(secs, 3) + " s"};
}

// ------------------------------------------------------------------ 3

Outcome finite_differences() {
  const auto t0 = std::chrono::steady_clock::now();
  torch::manual_seed(3003);
  Rng rng(3003);
  std::map<std::string, double> worst;
  auto record = [&](const std::string& name, double e) { worst[name] = std::max(worst[name], e); };
  for (int it = 0; it < 50; ++it) {
    {
      const auto hm = torch::randn({2, 3, 4, 3}, torch::kDouble);
      const auto w = torch::randn({2, 3, 2}, torch::kDouble);
      const double T = rng.uniform(0.5, 2.0);
      record("soft_argmax", oracle::gradient_error([&](const torch::Tensor& x) { return (soft_argmax(x, T, 4.0) * w).sum(); }, hm));
    }
    {
      const int P = 2 + static_cast<int>(rng.below(3)), K = 2 + static_cast<int>(rng.below(2));
      std::vector<std::int64_t> ids;
      for (int p = 0; p < P; ++p)
        for (int k = 0; k < K; ++k) ids.push_back(p);
      const auto e = torch::randn({P * K, 4}, torch::kDouble);
      record("triplet_softplus", oracle::gradient_error(
                                     [&](const torch::Tensor& x) { return losses::batch_hard_triplet(x, ids); }, e));
      // Hinge: resample until no anchor sits within 1e-3 of the kink.
      const double margin = 0.3;
      torch::Tensor eh;
      for (;;) {
        eh = torch::randn({P * K, 4}, torch::kDouble);
        const auto d = losses::pairwise_distances(eh);
        bool clear = true;
        for (int a = 0; a < P * K; ++a) {
          double pos = 0, neg = 1e300;
          for (int b = 0; b < P * K; ++b) {
            if (b == a) continue;
            const double v = d[a][b].item<double>();
            if (ids[a] == ids[b]) pos = std::max(pos, v);
            else neg = std::min(neg, v);
          }
          clear &= std::abs(margin + pos - neg) > 1e-3;
        }
        if (clear) break;
      }
      record("triplet_hinge", oracle::gradient_error(
                                  [&](const torch::Tensor& x) {
                                    return losses::batch_hard_triplet(x, ids, MarginMode::hinge(margin));
                                  },
                                  eh));
    }
    {
      const int n = 2 + static_cast<int>(rng.below(4)), c = 2 + static_cast<int>(rng.below(5));
      std::vector<std::int64_t> labels;
      for (int i = 0; i < n; ++i) labels.push_back(static_cast<std::int64_t>(rng.below(c)));
      record("person_ce", oracle::gradient_error(
                              [&](const torch::Tensor& x) { return losses::person_ce_logits(x, labels); },
                              torch::randn({n, c}, torch::kDouble)));
    }
    {
      auto labels = torch::tensor({{0, 2}, {1, -1}, {1, 0}}, torch::kLong);
      record("attribute_ce", oracle::gradient_error(
                                 [&](const torch::Tensor& x) {
                                   return *losses::attribute_ce_logits({x.slice(1, 0, 2), x.slice(1, 2, 5)}, labels);
                                 },
                                 torch::randn({3, 5}, torch::kDouble)));
    }
    {
      const auto gt = torch::randn({2, 4, 2}, torch::kDouble) * 10;
      auto vis = torch::rand({2, 4}) > 0.3;
      vis[0][0] = true;
      record("pose_l2", oracle::gradient_error(
                            [&](const torch::Tensor& x) { return *losses::pose_l2(x, gt, vis, 16.0); },
                            torch::randn({2, 4, 2}, torch::kDouble) * 10));
    }
    {
      auto labels = torch::randint(0, 3, {1, 4, 4}, torch::kLong);
      labels[0][0][0] = 255;
      const double keep = rng.bernoulli(0.5) ? 0.25 : 0.5;
      record("bootstrapped_ce", oracle::gradient_error(
                                    [&](const torch::Tensor& x) { return *losses::bootstrapped_ce(x, labels, keep); },
                                    torch::randn({1, 3, 4, 4}, torch::kDouble)));
    }
  }
  double w = 0;
  std::string detail;
  for (const auto& [k, v] : worst) {
    w = std::max(w, v);
    detail += k + " " + fmt(v, 2) + "; ";
  }
  const double secs = seconds_since(t0);
  return {w < 1e-3 && secs < 120, "max relative error over 50 inputs each: " + detail + fmt(secs, 3) + " s"};
}

// ------------------------------------------------------------------ 4

Outcome bootstrap_oracle() {
  torch::manual_seed(4004);
  double worst = 0, mean_gap = 0;
  for (int it = 0; it < 100; ++it) {
    const auto logits = torch::randn({2, 5, 6, 4}, torch::kDouble);
    auto labels = torch::randint(0, 5, {2, 6, 4}, torch::kLong);
    labels.masked_fill_(torch::rand({2, 6, 4}) < 0.1, 255);
    labels[0][0][0] = 1;
    for (double keep : {0.25, 0.5, 1.0})
      worst = std::max(worst, std::abs(losses::bootstrapped_ce(logits, labels, keep)->item<double>() -
                                       oracle::bootstrapped(logits, labels, keep, 255)));
    const auto plain = torch::nn::functional::cross_entropy(
        logits, labels, torch::nn::functional::CrossEntropyFuncOptions().ignore_index(255));
    mean_gap = std::max(mean_gap, std::abs(losses::bootstrapped_ce(logits, labels, 1.0)->item<double>() -
                                           plain.item<double>()));
  }
  return {worst <= 1e-9 && mean_gap <= 1e-6,
          "keep {0.25,0.5,1} max |diff| vs oracle " + fmt(worst) + "; keep 1 vs mean CE " + fmt(mean_gap)};
}

// ------------------------------------------------------------------ 5

double batch_drift(NormKind kind) {
  torch::manual_seed(5005);
  BackboneConfig c;
  c.norm_kind = kind;
  auto b = build_backbone(c);
  b->train();
  const auto x = torch::rand({12, 3, c.input_height, c.input_width});
  const auto alone = b->forward(x.slice(0, 0, 2)).branches[0].slice(0, 0, 1);
  double drift = 0;
  for (const auto& others : {std::vector<long>{0, 2, 3, 4}, std::vector<long>{0, 5, 6, 7, 8, 9, 10, 11},
                             std::vector<long>{0, 1, 11}}) {
    const auto idx = torch::tensor(others, torch::kLong);
    const auto out = b->forward(x.index_select(0, idx)).branches[0].slice(0, 0, 1);
    drift = std::max(drift, (out - alone).abs().max().item<double>());
  }
  return drift;
}

Outcome norm_batch_dependence() {
  const double gn = batch_drift(NormKind::GroupNorm), bn = batch_drift(NormKind::BatchNorm);
  return {gn <= 1e-5 && bn > 1e-3, "GroupNorm drift " + fmt(gn) + ", BatchNorm (train) drift " + fmt(bn)};
}

// ------------------------------------------------------------------ 6

Outcome split_isolation() {
  torch::manual_seed(6006);
  ModelConfig mc;
  mc.backbone.topology = Topology::SplitOutput;
  mc.backbone.split_channels = 16;
  mc.heads = {Task::ReId, Task::Attributes, Task::Pose, Task::Segmentation};
  mc.num_persons = 4;
  mc.attributes = data::synthetic_attribute_schema();
  mc.num_joints = 16;
  mc.num_parts = 5;
  MultiTaskModel model(mc);
  const auto x = torch::rand({3, 3, 128, 64});
  const auto bo = model->backbone->forward(x);
  auto fm = bo.branches[0];
  fm.retain_grad();
  auto [pose_slice, shared_slice] = split_channels(fm, 16);
  const auto pose = model->pose->from_heatmaps(pose_slice);
  const auto gt = torch::rand({3, 16, 2}) * 64;
  const auto loss = *losses::pose_l2(pose.coords, gt, torch::ones({3, 16}, torch::kBool), 128.0);
  // Shared-slice consumers are built too, so any leak would show up.
  const auto emb = embed_head(shared_slice);
  (void)model->attributes->forward(emb);
  loss.backward();
  const double shared = fm.grad().slice(1, 16).abs().max().item<double>();
  const double pose_g = fm.grad().slice(1, 0, 16).abs().max().item<double>();
  return {shared == 0.0 && pose_g > 0.0,
          "max |d pose loss / d shared slice| = " + fmt(shared) + ", pose slice " + fmt(pose_g)};
}

// ------------------------------------------------------------------ 7

Outcome interleave_frequencies() {
  auto frag = [](const std::string& n, std::size_t size) {
    data::PlanFragment f{n, size, {}};
    f.plan.batches.push_back({n, {0}});
    return f;
  };
  const auto plan = data::interleave({frag("a", 1000), frag("b", 3000)}, 7007, 10000);
  double a = 0;
  for (const auto& b : plan.batches) a += b.dataset == "a";
  a /= plan.batches.size();

  const auto& dir = work();
  const auto m = data::generate_synthetic({.num_ids = 32, .samples_per_id = 8, .seed = 7}, dir / "c7");
  std::size_t ok = 0, total = 0;
  for (auto [P, K] : {std::pair{8, 4}, std::pair{4, 4}, std::pair{16, 2}}) {
    const auto pk = data::make_pk_batches(m, P, K, 7 + P, 1000);
    for (const auto& b : pk.batches) {
      std::map<std::int64_t, int> n;
      for (auto i : b.indices) ++n[*m.records[i].person_id];
      bool good = static_cast<int>(n.size()) == P && b.indices.size() == static_cast<std::size_t>(P * K);
      for (auto& [id, c] : n) good &= c == K;
      ok += good;
      ++total;
    }
  }
  return {std::abs(a - 0.25) <= 0.02 && std::abs((1 - a) - 0.75) <= 0.02 && ok == total,
          "frequencies " + fmt(a) + "/" + fmt(1 - a) + " over 10^4 draws; PK invariant " + std::to_string(ok) + "/" +
              std::to_string(total)};
}

// ------------------------------------------------------------ 8 and 9

struct OverfitRun {
  metrics::MetricReport report;
  double seconds = 0;
  std::int64_t steps = 0;
  std::int64_t parameters = 0;
  std::int64_t final_stage = 0;
};

constexpr std::int64_t kOverfitSteps = 1200;

const fs::path& overfit_data() {
  static const fs::path p = [] {
    const auto dir = work() / "overfit";
    data::generate_synthetic({.num_ids = 32, .samples_per_id = 8, .height = 128, .width = 64, .seed = 8}, dir);
    return dir / "manifest.json";
  }();
  return p;
}

OverfitRun overfit(Topology topology) {
  static std::map<Topology, OverfitRun> cache;
  if (auto it = cache.find(topology); it != cache.end()) return it->second;
  train::TrainConfig c;
  c.model.backbone.topology = topology;
  if (topology == Topology::MultiBranch) c.model.backbone.num_branches = 4;
  train::DatasetSpec d;
  d.manifest = overfit_data();
  d.losses = {LossKind::Triplet, LossKind::AttributeCE, LossKind::PoseL2, LossKind::SegBootstrap};
  d.P = 8;
  d.K = 4;
  c.datasets.push_back(d);
  c.steps = kOverfitSteps;
  c.seed = 1;
  const auto t0 = std::chrono::steady_clock::now();
  const auto res = train::train(c, work() / ("overfit-" + to_string(topology)));
  OverfitRun r;
  r.seconds = seconds_since(t0);
  r.report = *res.report;
  r.steps = static_cast<std::int64_t>(res.log.steps.size());
  auto model = load_model(res.final_checkpoint);
  r.parameters = parameter_count(*model);
  r.final_stage = model->backbone->final_stage_parameter_count();
  return cache[topology] = r;
}

bool overfit_ok(const OverfitRun& r, std::string& detail) {
  const double r1 = r.report.get("reid.cmc@1").value_or(0), pck = r.report.get("pose.pckh").value_or(0);
  const double miou = r.report.get("seg.mIoU").value_or(0), attr = r.report.get("attr.avg").value_or(0);
  detail += "rank-1 " + fmt(r1) + ", PCKh " + fmt(pck) + ", mIoU5 " + fmt(miou) + ", attr " + fmt(attr) + ", " +
            std::to_string(r.steps) + " steps, " + fmt(r.seconds, 4) + " s";
  return r1 >= 0.95 && pck >= 0.90 && miou >= 0.70 && attr >= 0.95 && r.steps <= 3000 && r.seconds < 900;
}

Outcome overfit_single() {
  std::string detail = "SingleBranch: ";
  const bool ok = overfit_ok(overfit(Topology::SingleBranch), detail);
  return {ok, detail};
}

Outcome topology_parity() {
  bool ok = true;
  std::string detail;
  for (auto t : {Topology::SingleBranch, Topology::MultiBranch, Topology::SplitOutput}) {
    detail += to_string(t) + ": ";
    ok &= overfit_ok(overfit(t), detail);
    detail += "; ";
  }
  const auto single = overfit(Topology::SingleBranch), multi = overfit(Topology::MultiBranch);
  const auto extra = multi.parameters - single.parameters;
  ok &= extra == 3 * single.final_stage;
  detail += "Multi - Single parameters = " + std::to_string(extra) + " vs 3 x final stage " +
            std::to_string(3 * single.final_stage);
  return {ok, detail};
}

// ------------------------------------------------------------------ 10

train::TrainConfig small_config(std::uint64_t seed, std::int64_t steps) {
  train::TrainConfig c;
  c.model.backbone.final_channels = 64;
  c.steps = steps;
  c.seed = seed;
  return c;
}

train::DatasetSpec pose_spec(const fs::path& m) {
  train::DatasetSpec d;
  d.manifest = m;
  d.losses = {LossKind::PoseL2};
  d.batch_size = 16;
  return d;
}

train::DatasetSpec reid_spec(const fs::path& m) {
  train::DatasetSpec d;
  d.manifest = m;
  d.losses = {LossKind::Triplet};
  d.P = 4;
  d.K = 4;
  return d;
}

Outcome pretrain_vs_joint() {
  const auto dir = work() / "c10";
  data::generate_synthetic({.num_ids = 32, .samples_per_id = 8, .seed = 100}, dir / "pose");
  data::generate_synthetic({.num_ids = 32, .samples_per_id = 8, .seed = 200, .id_offset = 1000}, dir / "reid");
  data::generate_synthetic({.num_ids = 16, .samples_per_id = 4, .seed = 300, .query_gallery = true, .id_offset = 5000},
                           dir / "test");
  const auto test = data::load_manifest(dir / "test/manifest.json");
  const std::int64_t phase = 300;
  double ft_sum = 0, joint_sum = 0;
  std::string detail;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto run = dir / ("seed" + std::to_string(seed));
    auto pre = small_config(seed, phase);
    pre.datasets = {pose_spec(dir / "pose/manifest.json")};
    pre.eval.enabled = false;
    const auto pre_ckpt = train::train(pre, run / "pretrain").final_checkpoint;

    auto ft = small_config(seed, phase);
    ft.model.heads = {Task::ReId, Task::Pose};
    ft.model.num_joints = 16;
    ft.datasets = {reid_spec(dir / "reid/manifest.json")};
    ft.init = train::InitConfig{pre_ckpt, {"backbone", "pose"}};
    ft.eval.enabled = false;
    auto ft_model = load_model(train::train(ft, run / "finetune").final_checkpoint);

    auto joint = small_config(seed, 2 * phase);
    joint.datasets = {pose_spec(dir / "pose/manifest.json"), reid_spec(dir / "reid/manifest.json")};
    joint.eval.enabled = false;
    auto joint_model = load_model(train::train(joint, run / "joint").final_checkpoint);

    const double f = *train::evaluate(ft_model, test, {Task::Pose}).get("pose.pckh");
    const double j = *train::evaluate(joint_model, test, {Task::Pose}).get("pose.pckh");
    ft_sum += f;
    joint_sum += j;
    detail += "seed " + std::to_string(seed) + " fine-tune " + fmt(f, 3) + " joint " + fmt(j, 3) + "; ";
  }
  return {ft_sum / 3 < joint_sum / 3,
          detail + "mean held-out PCKh fine-tune " + fmt(ft_sum / 3) + " < joint " + fmt(joint_sum / 3)};
}

// ------------------------------------------------------------------ 11

Outcome learning_curve() {
  const auto dir = work() / "c11";
  data::generate_synthetic({.num_ids = 32, .samples_per_id = 8, .seed = 200, .id_offset = 1000}, dir / "reid");
  data::generate_synthetic({.num_ids = 32, .samples_per_id = 8, .seed = 100}, dir / "aux");
  data::generate_synthetic({.num_ids = 48, .samples_per_id = 4, .seed = 301, .query_gallery = true, .id_offset = 6000},
                           dir / "test");
  const auto test = data::load_manifest(dir / "test/manifest.json");
  const std::int64_t steps = 200;
  const std::vector<std::size_t> subsets{4, 8, 16, 32};
  std::map<bool, std::vector<double>> curve;
  for (bool multi : {false, true})
    for (auto n : subsets) {
      double sum = 0;
      for (std::uint64_t seed : {1, 2, 3}) {
        auto c = small_config(seed, multi ? 2 * steps : steps);
        auto r = reid_spec(dir / "reid/manifest.json");
        r.limit_identities = n;
        c.datasets = {r};
        if (multi) {
          train::DatasetSpec aux;
          aux.manifest = dir / "aux/manifest.json";
          aux.losses = {LossKind::PoseL2, LossKind::SegBootstrap, LossKind::AttributeCE};
          aux.batch_size = 16;
          c.datasets.push_back(aux);
        }
        c.eval.enabled = false;
        const auto run = dir / ((multi ? "multi-" : "reid-") + std::to_string(n) + "-" + std::to_string(seed));
        auto model = load_model(train::train(c, run).final_checkpoint);
        sum += *train::evaluate(model, test, {Task::ReId}).get("reid.cmc@1");
      }
      curve[multi].push_back(sum / 3);
    }
  auto monotone = [](const std::vector<double>& v) {
    for (std::size_t i = 1; i < v.size(); ++i)
      if (v[i] < v[i - 1]) return false;
    return true;
  };
  auto show = [&](const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + std::to_string(subsets[i]) + ":" + fmt(v[i], 3);
    return s;
  };
  const bool ok = monotone(curve[false]) && monotone(curve[true]) && curve[true][0] >= curve[false][0];
  return {ok, "mean held-out rank-1, ReID-only [" + show(curve[false]) + "], multi-task [" + show(curve[true]) + "]"};
}

}  // namespace

int main(int argc, char** argv) {
  torch::set_num_threads(1);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"metric oracle equivalence", metric_oracles},
      {"batch-hard triplet oracle", triplet_oracle},
      {"finite-difference gradients", finite_differences},
      {"bootstrapped CE oracle", bootstrap_oracle},
      {"GroupNorm batch independence", norm_batch_dependence},
      {"SplitOutput gradient isolation", split_isolation},
      {"interleave frequencies and PK invariant", interleave_frequencies},
      {"overfit run", overfit_single},
      {"topology parity", topology_parity},
      {"pose pretrain then ReID fine-tune vs joint", pretrain_vs_joint},
      {"learning curve over identity subsets", learning_curve},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::stoi(argv[i]));
  if (selected.empty())
    for (int i = 1; i <= static_cast<int>(criteria.size()); ++i) selected.push_back(i);

  int failed = 0;
  for (int n : selected) {
    if (n < 1 || n > static_cast<int>(criteria.size())) {
      std::cerr << "no criterion " << n << "\n";
      return 2;
    }
    const auto& [name, fn] = criteria[n - 1];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("criterion %d %s: %s (%s)\n", n, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
  }
  return failed ? 1 : 0;
}
