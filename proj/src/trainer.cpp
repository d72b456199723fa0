#include "mtperson/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>

#include <opencv2/imgproc.hpp>

#include "mtperson/errors.hpp"

namespace mtp::train {

namespace fs = std::filesystem;
using json = nlohmann::json;
using losses::LossKind;

namespace {

const LossKind kLossOrder[] = {LossKind::Triplet, LossKind::PersonCE, LossKind::AttributeCE, LossKind::PoseL2,
                               LossKind::SegBootstrap};

Task task_of(LossKind k) {
  switch (k) {
    case LossKind::Triplet:
    case LossKind::PersonCE:
      return Task::ReId;
    case LossKind::AttributeCE:
      return Task::Attributes;
    case LossKind::PoseL2:
      return Task::Pose;
    case LossKind::SegBootstrap:
      return Task::Segmentation;
  }
  return Task::ReId;
}

std::string tname(Task t) { return std::string(to_string(t)); }

fs::path resolve_path(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

json augment_to_json(const data::AugmentOps& a) {
  json j{{"hflip", a.hflip_p}};
  if (a.affine) {
    j["affine"] = {{"rotation_deg", a.affine->rotation_deg},
                   {"translation_frac", a.affine->translation_frac},
                   {"scale_min", a.affine->scale_min},
                   {"scale_max", a.affine->scale_max}};
  } else {
    j["affine"] = nullptr;
  }
  return j;
}

data::AugmentOps augment_from_json(const json& j) {
  data::AugmentOps a;
  a.hflip_p = j.value("hflip", 0.0);
  if (j.contains("affine") && !j.at("affine").is_null()) {
    const auto& f = j.at("affine");
    data::AffineRange r;
    if (f.is_boolean()) {
      if (f.get<bool>()) a.affine = r;
    } else {
      r.rotation_deg = f.value("rotation_deg", r.rotation_deg);
      r.translation_frac = f.value("translation_frac", r.translation_frac);
      r.scale_min = f.value("scale_min", r.scale_min);
      r.scale_max = f.value("scale_max", r.scale_max);
      a.affine = r;
    }
  }
  return a;
}

}  // namespace

// ------------------------------------------------------------------ config

TrainConfig config_from_json(const json& j, const fs::path& base_dir) {
  static const std::set<std::string> known{"model",     "datasets", "loss_weights", "margin",           "keep_fraction",
                                           "optimizer", "schedule", "steps",        "seed",             "checkpoint_every",
                                           "log_every", "init",     "eval",         "threads",          "pose_normalizer"};
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError(k, "unknown config key");
  TrainConfig c;
  if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
  if (!j.contains("datasets") || j.at("datasets").empty()) throw ConfigError("datasets", "at least one dataset required");
  for (const auto& d : j.at("datasets")) {
    DatasetSpec s;
    if (!d.contains("manifest")) throw ConfigError("datasets.manifest", "missing");
    s.manifest = resolve_path(d.at("manifest").get<std::string>(), base_dir);
    for (const auto& l : d.value("losses", std::vector<std::string>{})) s.losses.insert(losses::loss_from_string(l));
    if (s.losses.empty()) throw ConfigError("datasets.losses", "dataset " + s.manifest.string() + " has no active loss");
    if (d.contains("batch")) {
      const auto& b = d.at("batch");
      s.P = b.value("P", s.P);
      s.K = b.value("K", s.K);
      s.batch_size = b.value("size", s.batch_size);
    }
    if (d.contains("augment")) s.augment = augment_from_json(d.at("augment"));
    if (d.contains("limit_identities") && !d.at("limit_identities").is_null())
      s.limit_identities = d.at("limit_identities").get<std::size_t>();
    c.datasets.push_back(std::move(s));
  }
  if (j.contains("loss_weights"))
    for (const auto& [k, v] : j.at("loss_weights").items()) c.loss_weights[losses::loss_from_string(k)] = v.get<double>();
  if (j.contains("margin")) {
    const auto& m = j.at("margin");
    if (m.is_string() && m.get<std::string>() == "softplus") {
      c.margin = losses::MarginMode::softplus();
    } else if (m.is_number()) {
      c.margin = losses::MarginMode::hinge(m.get<double>());
    } else if (m.is_object()) {
      const auto kind = m.value("kind", std::string("softplus"));
      if (kind == "softplus")
        c.margin = losses::MarginMode::softplus();
      else if (kind == "hinge")
        c.margin = losses::MarginMode::hinge(m.value("value", 0.2));
      else
        throw ConfigError("margin.kind", "expected softplus or hinge, got " + kind);
    } else {
      throw ConfigError("margin", "expected \"softplus\", a number, or {kind, value}");
    }
  }
  c.keep_fraction = j.value("keep_fraction", c.keep_fraction);
  if (j.contains("optimizer")) {
    const auto& o = j.at("optimizer");
    if (o.value("kind", std::string("adam")) != "adam") throw ConfigError("optimizer.kind", "only adam is supported");
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
  }
  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    c.schedule.decay_start = s.value("decay_start", c.schedule.decay_start);
    c.schedule.final_factor = s.value("final_factor", c.schedule.final_factor);
  }
  c.steps = j.value("steps", c.steps);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.log_every = j.value("log_every", c.log_every);
  c.pose_normalizer = j.value("pose_normalizer", c.pose_normalizer);
  c.threads = j.value("threads", c.threads);
  if (j.contains("init") && !j.at("init").is_null()) {
    InitConfig i;
    i.checkpoint = resolve_path(j.at("init").at("checkpoint").get<std::string>(), base_dir);
    i.scopes = j.at("init").value("scopes", i.scopes);
    c.init = i;
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    c.eval.enabled = e.value("enabled", true);
    if (e.contains("manifest") && !e.at("manifest").is_null())
      c.eval.manifest = resolve_path(e.at("manifest").get<std::string>(), base_dir);
    if (e.contains("split") && !e.at("split").is_null()) c.eval.split = data::split_from_string(e.at("split"));
    for (const auto& t : e.value("tasks", std::vector<std::string>{})) c.eval.tasks.insert(task_from_string(t));
  }
  return c;
}

json to_json(const TrainConfig& c) {
  json j;
  j["model"] = c.model;
  j["datasets"] = json::array();
  for (const auto& d : c.datasets) {
    json dj{{"manifest", d.manifest.string()},
            {"batch", {{"P", d.P}, {"K", d.K}, {"size", d.batch_size}}},
            {"augment", augment_to_json(d.augment)}};
    dj["losses"] = json::array();
    for (auto k : d.losses) dj["losses"].push_back(losses::to_string(k));
    dj["limit_identities"] = d.limit_identities ? json(*d.limit_identities) : json(nullptr);
    j["datasets"].push_back(dj);
  }
  j["loss_weights"] = json::object();
  for (const auto& [k, w] : c.loss_weights) j["loss_weights"][losses::to_string(k)] = w;
  if (c.margin.kind == losses::MarginMode::Kind::SoftPlus)
    j["margin"] = {{"kind", "softplus"}};
  else
    j["margin"] = {{"kind", "hinge"}, {"value", c.margin.margin}};
  j["keep_fraction"] = c.keep_fraction;
  j["optimizer"] = {{"kind", "adam"},
                    {"lr", c.optimizer.lr},
                    {"beta1", c.optimizer.beta1},
                    {"beta2", c.optimizer.beta2},
                    {"eps", c.optimizer.eps}};
  j["schedule"] = {{"decay_start", c.schedule.decay_start}, {"final_factor", c.schedule.final_factor}};
  j["steps"] = c.steps;
  j["seed"] = c.seed;
  j["checkpoint_every"] = c.checkpoint_every;
  j["log_every"] = c.log_every;
  j["pose_normalizer"] = c.pose_normalizer;
  j["threads"] = c.threads;
  if (c.init)
    j["init"] = {{"checkpoint", c.init->checkpoint.string()}, {"scopes", c.init->scopes}};
  else
    j["init"] = nullptr;
  json e{{"enabled", c.eval.enabled}};
  e["manifest"] = c.eval.manifest ? json(c.eval.manifest->string()) : json(nullptr);
  e["split"] = c.eval.split ? json(data::to_string(*c.eval.split)) : json(nullptr);
  e["tasks"] = json::array();
  for (auto t : c.eval.tasks) e["tasks"].push_back(tname(t));
  j["eval"] = e;
  return j;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config", "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config", path.string() + ": " + e.what());
  }
  return config_from_json(j, fs::absolute(path).parent_path());
}

// ------------------------------------------------------------------ RunLog

std::string RunLog::csv_header() { return "step,dataset,triplet,person_ce,attribute_ce,pose_l2,seg_bce,total,lr"; }

std::string RunLog::csv_row(const StepLog& s) {
  std::ostringstream o;
  o << std::setprecision(9) << s.step << ',' << s.dataset;
  for (auto k : kLossOrder) {
    o << ',';
    if (auto it = s.losses.find(k); it != s.losses.end()) o << it->second;
  }
  o << ',' << s.total << ',' << s.lr;
  return o.str();
}

void RunLog::write_csv(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << csv_header() << '\n';
  for (const auto& s : steps) out << csv_row(s) << '\n';
}

std::map<std::string, std::size_t> RunLog::dataset_counts() const {
  std::map<std::string, std::size_t> n;
  for (const auto& s : steps) ++n[s.dataset];
  return n;
}

RunLog read_run_log(const fs::path& csv) {
  std::ifstream in(csv);
  if (!in) throw Error("cannot read " + csv.string());
  std::string line;
  std::getline(in, line);
  if (line != RunLog::csv_header()) throw Error(csv.string() + " is not a run log");
  RunLog log;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    while (cells.size() < 9) cells.emplace_back();
    StepLog s;
    s.step = std::stoll(cells[0]);
    s.dataset = cells[1];
    for (std::size_t i = 0; i < 5; ++i)
      if (!cells[2 + i].empty()) s.losses[kLossOrder[i]] = std::stod(cells[2 + i]);
    s.total = std::stod(cells[7]);
    s.lr = std::stod(cells[8]);
    log.steps.push_back(std::move(s));
  }
  return log;
}

double scheduled_lr(const OptimizerConfig& opt, const ScheduleConfig& sched, std::int64_t step, std::int64_t total) {
  if (total <= 0) return opt.lr;
  const double start = sched.decay_start * static_cast<double>(total);
  const double t = static_cast<double>(step);
  if (t <= start || sched.decay_start >= 1.0) return opt.lr;
  const double frac = std::min(1.0, (t - start) / (static_cast<double>(total) - start));
  return opt.lr * std::pow(sched.final_factor, frac);
}

// ------------------------------------------------------------------ tensors

namespace {

torch::Tensor image_tensor(const cv::Mat& rgb) {
  CV_Assert(rgb.type() == CV_8UC3 && rgb.isContinuous());
  return torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8)
      .permute({2, 0, 1})
      .to(torch::kFloat32)
      .div(255.0);
}

torch::Tensor stack_images(const std::vector<data::Sample>& samples) {
  std::vector<torch::Tensor> imgs;
  imgs.reserve(samples.size());
  for (const auto& s : samples) {
    cv::Mat m = s.image.isContinuous() ? s.image : s.image.clone();
    imgs.push_back(image_tensor(m));
  }
  return torch::stack(imgs);
}

std::vector<data::Sample> load_samples(const data::DatasetManifest& m, const std::vector<std::size_t>& idx, int h,
                                       int w) {
  std::vector<data::Sample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(data::load_sample(m, i, h, w));
  return out;
}

std::set<Task> dataset_tasks(const DatasetSpec& d) {
  std::set<Task> t;
  for (auto k : d.losses) t.insert(task_of(k));
  return t;
}

}  // namespace

torch::Tensor load_images(const data::DatasetManifest& m, const std::vector<std::size_t>& indices, int height,
                          int width) {
  return stack_images(load_samples(m, indices, height, width));
}

// ------------------------------------------------------------------ Trainer

struct Trainer::State {
  TrainConfig cfg;
  ModelConfig model_cfg;
  std::vector<data::DatasetManifest> manifests;
  std::vector<std::string> names;
  std::map<std::string, std::size_t> by_name;
  std::vector<std::vector<std::optional<data::Sample>>> cache;
  std::vector<std::map<std::int64_t, std::int64_t>> class_label;  // per dataset: person id -> classifier label
  data::BatchPlan plan;
  MultiTaskModel model{nullptr};
  std::unique_ptr<torch::optim::Adam> optim;
  std::int64_t step = 0;
  RunLog log;
};

namespace {

void resolve_model(TrainConfig& cfg, const std::vector<data::DatasetManifest>& ms, ModelConfig& mc,
                   std::vector<std::map<std::int64_t, std::int64_t>>& class_label) {
  mc = cfg.model;
  std::set<Task> needed;
  for (const auto& d : cfg.datasets)
    for (auto t : dataset_tasks(d)) needed.insert(t);
  if (mc.heads.empty()) mc.heads = needed;
  for (auto t : needed)
    if (!mc.has(t)) throw ConfigError("model.heads", "an active loss needs the " + tname(t) + " head");

  class_label.assign(ms.size(), {});
  std::int64_t next = 0;
  for (std::size_t i = 0; i < ms.size(); ++i) {
    if (!cfg.datasets[i].losses.count(LossKind::PersonCE)) continue;
    for (auto pid : ms[i].identities(data::Split::Train)) class_label[i][pid] = next++;
  }
  if (next > 0) {
    if (mc.num_persons == 0) mc.num_persons = next;
    if (mc.num_persons != next)
      throw ConfigError("model.num_persons",
                        "config says " + std::to_string(mc.num_persons) + " but the training data has " +
                            std::to_string(next) + " identities");
  }
  for (std::size_t i = 0; i < ms.size(); ++i) {
    const auto& m = ms[i];
    const auto& ls = cfg.datasets[i].losses;
    if (ls.count(LossKind::AttributeCE)) {
      if (mc.attributes.empty()) mc.attributes = m.attribute_schema;
      if (mc.attributes.attributes.size() != m.attribute_schema.attributes.size())
        throw ConfigError("model.attributes", "attribute schema of " + m.name + " does not match the model");
    }
    if (ls.count(LossKind::PoseL2)) {
      if (mc.num_joints == 0) mc.num_joints = static_cast<std::int64_t>(m.joint_names.size());
      if (mc.num_joints != static_cast<std::int64_t>(m.joint_names.size()))
        throw ConfigError("model.num_joints", "joint count of " + m.name + " does not match the model");
    }
    if (ls.count(LossKind::SegBootstrap)) {
      if (mc.num_parts == 0) mc.num_parts = static_cast<std::int64_t>(m.part_names.size());
      if (mc.num_parts != static_cast<std::int64_t>(m.part_names.size()))
        throw ConfigError("model.num_parts", "part count of " + m.name + " does not match the model");
    }
  }
  if (mc.backbone.topology == Topology::SplitOutput && mc.backbone.split_channels == 0)
    mc.backbone.split_channels = mc.num_joints;
  mc.validate();
}

}  // namespace

Trainer::Trainer(TrainConfig config) : s_(std::make_unique<State>()) {
  auto& s = *s_;
  s.cfg = std::move(config);
  auto& cfg = s.cfg;
  if (cfg.threads > 0) torch::set_num_threads(cfg.threads);
  if (cfg.steps < 0) throw ConfigError("steps", "must be non-negative");
  if (!(cfg.keep_fraction > 0.0 && cfg.keep_fraction <= 1.0)) throw ConfigError("keep_fraction", "must be in (0, 1]");
  if (!(cfg.optimizer.lr > 0.0)) throw ConfigError("optimizer.lr", "must be positive");
  if (!(cfg.schedule.final_factor > 0.0 && cfg.schedule.final_factor <= 1.0))
    throw ConfigError("schedule.final_factor", "must be in (0, 1]");
  for (const auto& [k, w] : cfg.loss_weights)
    if (!(w > 0.0)) throw ConfigError("loss_weights." + losses::to_string(k), "must be positive");
  if (cfg.datasets.empty()) throw ConfigError("datasets", "at least one dataset required");

  // Manifests, task checks, identity limits.
  for (std::size_t i = 0; i < cfg.datasets.size(); ++i) {
    auto& d = cfg.datasets[i];
    auto m = data::load_manifest(d.manifest);
    for (auto k : d.losses) {
      if (!m.tasks.has(task_of(k)))
        throw ConfigError("datasets.losses", "loss " + losses::to_string(k) + " needs " + tname(task_of(k)) +
                                                 " labels, which " + m.name + " does not provide");
    }
    d.augment.validate(m.tasks);
    if (d.limit_identities) {
      if (!m.tasks.reid) throw ConfigError("datasets.limit_identities", m.name + " has no identities");
      m = data::limit_identities(m, *d.limit_identities, mix(cfg.seed, 0x11D5 + i));
    }
    std::string name = m.name.empty() ? "dataset" : m.name;
    for (int n = 2; s.by_name.count(name); ++n) name = m.name + "#" + std::to_string(n);
    s.by_name[name] = i;
    s.names.push_back(name);
    s.cache.emplace_back(m.size());
    s.manifests.push_back(std::move(m));
  }
  resolve_model(cfg, s.manifests, s.model_cfg, s.class_label);

  // Interleaved plan. Each fragment holds enough batches for the whole run.
  std::vector<data::PlanFragment> frags;
  for (std::size_t i = 0; i < cfg.datasets.size(); ++i) {
    const auto& d = cfg.datasets[i];
    const auto& m = s.manifests[i];
    const auto seed = mix(cfg.seed, 0xBA7C + i);
    const auto want = static_cast<std::size_t>(std::max<std::int64_t>(cfg.steps, 1));
    data::PlanFragment f;
    f.dataset = s.names[i];
    f.size = m.indices(data::Split::Train).size();
    if (f.size == 0) throw ConfigError("datasets", m.name + " has no train records");
    f.plan = d.losses.count(LossKind::Triplet) ? data::make_pk_batches(m, d.P, d.K, seed, want)
                                               : data::make_plain_batches(m, d.batch_size, seed, want);
    for (auto& b : f.plan.batches) b.dataset = s.names[i];
    frags.push_back(std::move(f));
  }
  s.plan = data::interleave(frags, mix(cfg.seed, 0x1E4), static_cast<std::size_t>(cfg.steps));

  torch::manual_seed(mix(cfg.seed, 0x3D));
  s.model = MultiTaskModel(s.model_cfg);
  if (cfg.init) init_from_checkpoint(s.model, cfg.init->checkpoint, cfg.init->scopes);
  s.model->train();
  s.optim = std::make_unique<torch::optim::Adam>(
      s.model->parameters(), torch::optim::AdamOptions(cfg.optimizer.lr)
                                 .betas({cfg.optimizer.beta1, cfg.optimizer.beta2})
                                 .eps(cfg.optimizer.eps));
}

Trainer::~Trainer() = default;

const TrainConfig& Trainer::config() const { return s_->cfg; }
const ModelConfig& Trainer::model_config() const { return s_->model_cfg; }
MultiTaskModel& Trainer::model() { return s_->model; }
const data::BatchPlan& Trainer::plan() const { return s_->plan; }
const std::vector<data::DatasetManifest>& Trainer::manifests() const { return s_->manifests; }
std::int64_t Trainer::step() const { return s_->step; }
const RunLog& Trainer::log() const { return s_->log; }

BatchTensors Trainer::load_batch(const data::Batch& batch, std::optional<std::int64_t> augment_step) const {
  auto& s = *s_;
  const auto di = s.by_name.at(batch.dataset);
  const auto& m = s.manifests[di];
  const auto& spec = s.cfg.datasets[di];
  const auto& bc = s.model_cfg.backbone;
  const auto h = static_cast<int>(bc.input_height), w = static_cast<int>(bc.input_width);
  const data::FlipPairs pairs{m.joint_flip_pairs, m.part_flip_pairs};
  const auto n = static_cast<std::int64_t>(batch.indices.size());

  std::vector<data::Sample> samples;
  samples.reserve(batch.indices.size());
  for (std::size_t p = 0; p < batch.indices.size(); ++p) {
    const auto idx = batch.indices[p];
    auto& slot = s.cache[di][idx];
    if (!slot) slot = data::load_sample(m, idx, h, w);
    if (augment_step) {
      Rng rng(mix(mix(s.cfg.seed, static_cast<std::uint64_t>(*augment_step)), p));
      samples.push_back(data::augment(*slot, spec.augment, pairs, rng));
    } else {
      samples.push_back(*slot);
    }
  }

  BatchTensors bt;
  bt.dataset = batch.dataset;
  bt.images = stack_images(samples);
  if (m.tasks.reid) {
    for (const auto& smp : samples) {
      const auto pid = smp.person_id.value_or(-1);
      bt.person_ids.push_back(pid);
      const auto& lab = s.class_label[di];
      auto it = lab.find(pid);
      bt.class_labels.push_back(it == lab.end() ? -1 : it->second);
    }
  }
  if (m.tasks.attributes) {
    const auto a = static_cast<std::int64_t>(m.attribute_schema.size());
    bt.attributes = torch::full({n, a}, kMissingLabel, torch::kLong);
    auto acc = bt.attributes.accessor<std::int64_t, 2>();
    for (std::int64_t i = 0; i < n; ++i)
      if (const auto& at = samples[i].attributes)
        for (std::int64_t k = 0; k < a; ++k) acc[i][k] = (*at)[k];
  }
  if (m.tasks.pose) {
    const auto j = static_cast<std::int64_t>(m.joint_names.size());
    bt.joints = torch::zeros({n, j, 2});
    bt.visible = torch::zeros({n, j}, torch::kBool);
    auto ja = bt.joints.accessor<float, 3>();
    auto va = bt.visible.accessor<bool, 2>();
    for (std::int64_t i = 0; i < n; ++i) {
      if (!samples[i].joints) continue;
      for (std::int64_t k = 0; k < j; ++k) {
        const auto& jt = samples[i].joints->joints[k];
        ja[i][k][0] = static_cast<float>(jt.x);
        ja[i][k][1] = static_cast<float>(jt.y);
        va[i][k] = jt.visible;
      }
    }
  }
  if (m.tasks.segmentation) {
    bt.masks = torch::full({n, h, w}, static_cast<std::int64_t>(kIgnoreLabel), torch::kLong);
    for (std::int64_t i = 0; i < n; ++i) {
      if (!samples[i].mask) continue;
      cv::Mat mk = samples[i].mask->isContinuous() ? *samples[i].mask : samples[i].mask->clone();
      bt.masks[i].copy_(torch::from_blob(mk.data, {h, w}, torch::kUInt8).to(torch::kLong));
    }
  }
  return bt;
}

losses::LossBundle Trainer::compute_losses(const BatchTensors& bt) {
  auto& s = *s_;
  const auto di = s.by_name.at(bt.dataset);
  const auto& active = s.cfg.datasets[di].losses;
  const auto tasks = dataset_tasks(s.cfg.datasets[di]);
  auto out = s.model->forward(bt.images, tasks);

  std::map<LossKind, std::optional<torch::Tensor>> parts;
  for (auto k : active) {
    switch (k) {
      case LossKind::Triplet:
        parts[k] = losses::batch_hard_triplet(out.embedding, bt.person_ids, s.cfg.margin);
        break;
      case LossKind::PersonCE:
        parts[k] = losses::person_ce_logits(out.person_logits, bt.class_labels);
        break;
      case LossKind::AttributeCE:
        parts[k] = losses::attribute_ce_logits(out.attribute_logits, bt.attributes);
        break;
      case LossKind::PoseL2: {
        const double norm = s.cfg.pose_normalizer > 0.0 ? s.cfg.pose_normalizer
                                                        : static_cast<double>(s.model_cfg.backbone.input_height);
        parts[k] = losses::pose_l2(out.pose.coords, bt.joints, bt.visible, norm);
        break;
      }
      case LossKind::SegBootstrap:
        parts[k] = losses::bootstrapped_ce(out.seg_logits, bt.masks, s.cfg.keep_fraction);
        break;
    }
  }
  return losses::combine(parts, s.cfg.loss_weights);
}

StepLog Trainer::train_step() {
  auto& s = *s_;
  if (s.step >= static_cast<std::int64_t>(s.plan.batches.size()))
    throw Error("training plan exhausted after " + std::to_string(s.step) + " steps");
  const auto& batch = s.plan.batches[static_cast<std::size_t>(s.step)];
  const double lr = scheduled_lr(s.cfg.optimizer, s.cfg.schedule, s.step, s.cfg.steps);
  for (auto& g : s.optim->param_groups()) static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);

  s.model->train();
  auto bt = load_batch(batch, s.step);
  auto bundle = compute_losses(bt);

  StepLog log;
  log.step = s.step;
  log.dataset = batch.dataset;
  log.lr = lr;
  for (const auto& [k, v] : bundle.parts) {
    const double x = v.item<double>();
    if (!std::isfinite(x))
      throw DivergenceError("non-finite " + losses::to_string(k) + " loss at step " + std::to_string(s.step) +
                            " on dataset " + batch.dataset);
    log.losses[k] = x;
  }
  log.total = bundle.total.item<double>();
  if (!std::isfinite(log.total))
    throw DivergenceError("non-finite total loss at step " + std::to_string(s.step) + " on dataset " + batch.dataset);

  s.optim->zero_grad();
  if (bundle.total.requires_grad()) {
    bundle.total.backward();
    s.optim->step();
  }
  ++s.step;
  s.log.steps.push_back(log);
  return log;
}

void Trainer::save(const fs::path& checkpoint) const {
  auto& s = *s_;
  json meta{{"step", s.step}, {"seed", s.cfg.seed}};
  // Label vocabularies, so predictions can be written back as annotations.
  for (std::size_t i = 0; i < s.manifests.size(); ++i) {
    const auto& m = s.manifests[i];
    const auto& ls = s.cfg.datasets[i].losses;
    if (ls.count(LossKind::PoseL2) && !meta.contains("joint_names")) {
      meta["joint_names"] = m.joint_names;
      meta["joint_flip_pairs"] = m.joint_flip_pairs;
    }
    if (ls.count(LossKind::SegBootstrap) && !meta.contains("part_names")) {
      meta["part_names"] = m.part_names;
      meta["part_flip_pairs"] = m.part_flip_pairs;
    }
  }
  save_checkpoint(s.model, checkpoint, meta);
  const auto tmp = fs::path(checkpoint.string() + ".optim.tmp");
  torch::save(*s.optim, tmp.string());
  fs::rename(tmp, checkpoint.string() + ".optim");
}

void Trainer::resume(const fs::path& checkpoint) {
  auto& s = *s_;
  const auto info = read_checkpoint_info(checkpoint);
  load_checkpoint(s.model, checkpoint);
  const auto optim_path = fs::path(checkpoint.string() + ".optim");
  if (!fs::exists(optim_path)) throw LoadError("optimizer state " + optim_path.string() + " is missing");
  torch::load(*s.optim, optim_path.string());
  s.step = info.meta.value("step", std::int64_t{0});
  if (s.step > static_cast<std::int64_t>(s.plan.batches.size()))
    throw LoadError("checkpoint step " + std::to_string(s.step) + " is beyond the configured run");
}

// ------------------------------------------------------------------ evaluation

namespace {

struct EvalSelection {
  std::vector<std::size_t> query, gallery;  // ReID
  bool all_vs_all = false;
  std::vector<std::size_t> labeled;  // other tasks
};

EvalSelection select_records(const data::DatasetManifest& m, std::optional<data::Split> split) {
  using data::Split;
  EvalSelection sel;
  const auto q = m.indices(Split::Query), g = m.indices(Split::Gallery);
  const bool qg = !q.empty() && !g.empty();
  if (split) {
    if (*split == Split::Query || *split == Split::Gallery) {
      sel.query = q;
      sel.gallery = g;
      sel.labeled = m.indices(*split);
    } else {
      sel.query = sel.gallery = sel.labeled = m.indices(*split);
      sel.all_vs_all = true;
    }
    return sel;
  }
  if (qg) {
    sel.query = q;
    sel.gallery = g;
    sel.labeled = q;
    sel.labeled.insert(sel.labeled.end(), g.begin(), g.end());
    std::sort(sel.labeled.begin(), sel.labeled.end());
  } else {
    sel.query = sel.gallery = m.indices(Split::Train);
    sel.all_vs_all = true;
    const auto v = m.indices(Split::Val);
    sel.labeled = v.empty() ? sel.query : v;
  }
  return sel;
}

struct RawPredictions {
  Predictions p;
  std::vector<data::Sample> samples;
};

RawPredictions run_model(MultiTaskModel& model, const data::DatasetManifest& m, const std::vector<std::size_t>& idx,
                         const std::set<Task>& tasks, int batch_size) {
  const auto& mc = model->config();
  const int h = static_cast<int>(mc.backbone.input_height), w = static_cast<int>(mc.backbone.input_width);
  RawPredictions r;
  r.samples = load_samples(m, idx, h, w);
  const bool was_training = model->is_training();
  model->eval();
  torch::NoGradGuard ng;
  for (std::size_t b = 0; b < idx.size(); b += static_cast<std::size_t>(batch_size)) {
    const auto e = std::min(idx.size(), b + static_cast<std::size_t>(batch_size));
    std::vector<data::Sample> chunk(r.samples.begin() + b, r.samples.begin() + e);
    auto out = model->forward(stack_images(chunk), tasks);
    const auto n = static_cast<std::int64_t>(e - b);
    if (tasks.count(Task::ReId)) {
      auto emb = out.embedding.contiguous();
      r.p.embedding_dim = static_cast<int>(emb.size(1));
      r.p.embeddings.insert(r.p.embeddings.end(), emb.data_ptr<float>(), emb.data_ptr<float>() + emb.numel());
    }
    if (tasks.count(Task::Attributes)) {
      std::vector<torch::Tensor> am;
      for (auto& l : out.attribute_logits) am.push_back(l.argmax(1));
      for (std::int64_t i = 0; i < n; ++i) {
        std::vector<int> v;
        for (auto& t : am) v.push_back(static_cast<int>(t[i].item<std::int64_t>()));
        r.p.attributes.push_back(std::move(v));
      }
    }
    if (tasks.count(Task::Pose)) {
      auto c = out.pose.coords.contiguous();
      auto ca = c.accessor<float, 3>();
      for (std::int64_t i = 0; i < n; ++i) {
        JointSet js;
        for (std::int64_t k = 0; k < c.size(1); ++k) js.joints.push_back({ca[i][k][0], ca[i][k][1], true});
        const auto& gt = chunk[static_cast<std::size_t>(i)].joints;
        js.head_size = gt ? gt->head_size : 0.0;
        r.p.joints.push_back(std::move(js));
      }
    }
    if (tasks.count(Task::Segmentation)) {
      auto lab = out.seg_logits.argmax(1).to(torch::kUInt8).contiguous();
      for (std::int64_t i = 0; i < n; ++i) {
        Mask mk(h, w);
        std::copy_n(lab[i].data_ptr<std::uint8_t>(), h * w, mk.labels.begin());
        r.p.masks.push_back(std::move(mk));
      }
    }
  }
  if (was_training) model->train();
  return r;
}

std::vector<std::size_t> with_label(const data::DatasetManifest& m, const std::vector<std::size_t>& idx, Task t) {
  std::vector<std::size_t> out;
  for (auto i : idx) {
    const auto& r = m.records[i];
    const bool ok = (t == Task::Attributes && r.attributes) || (t == Task::Pose && r.joints) ||
                    (t == Task::Segmentation && r.mask) || (t == Task::ReId && r.person_id);
    if (ok) out.push_back(i);
  }
  return out;
}

}  // namespace

Predictions predict(MultiTaskModel& model, const data::DatasetManifest& m, const std::vector<std::size_t>& indices,
                    const std::set<Task>& tasks, int batch_size) {
  for (auto t : tasks)
    if (!model->config().has(t)) throw TaskError("model has no " + tname(t) + " head");
  return run_model(model, m, indices, tasks, batch_size).p;
}

metrics::MetricReport evaluate(MultiTaskModel& model, const data::DatasetManifest& m, const std::set<Task>& tasks,
                               std::optional<data::Split> split, int batch_size) {
  const auto& mc = model->config();
  for (auto t : tasks) {
    if (!mc.has(t)) throw TaskError("checkpoint has no " + tname(t) + " head");
    if (!m.tasks.has(t)) throw TaskError(m.name + " has no " + tname(t) + " labels");
  }
  const auto sel = select_records(m, split);
  metrics::MetricReport rep;

  if (tasks.count(Task::ReId)) {
    const auto q = with_label(m, sel.query, Task::ReId);
    const auto g = sel.all_vs_all ? q : with_label(m, sel.gallery, Task::ReId);
    if (q.empty()) throw Error("ReID evaluation of " + m.name + " has zero queries");
    if (g.empty()) throw Error("ReID evaluation of " + m.name + " has an empty gallery");
    auto table = [&](const std::vector<std::size_t>& idx) {
      auto p = run_model(model, m, idx, {Task::ReId}, batch_size).p;
      metrics::EmbeddingTable t;
      t.dim = p.embedding_dim;
      t.values = std::move(p.embeddings);
      for (auto i : idx) {
        const auto& r = m.records[i];
        t.person_ids.push_back(*r.person_id);
        // Without camera labels every image is its own camera.
        t.camera_ids.push_back(r.camera_id ? *r.camera_id : -1 - static_cast<std::int64_t>(i));
      }
      return t;
    };
    metrics::RetrievalSet rs;
    rs.query = table(q);
    rs.gallery = sel.all_vs_all ? rs.query : table(g);
    rep.reid = metrics::reid_eval(rs);
  }

  std::set<Task> rest;
  for (auto t : tasks)
    if (t != Task::ReId) rest.insert(t);
  for (auto t : rest) {
    const auto idx = with_label(m, sel.labeled, t);
    if (idx.empty()) throw Error(tname(t) + " evaluation of " + m.name + " has no labeled records");
    auto r = run_model(model, m, idx, {t}, batch_size);
    if (t == Task::Attributes) {
      std::vector<std::vector<int>> gts;
      for (const auto& s : r.samples) gts.push_back(*s.attributes);
      rep.attributes = metrics::attribute_eval(r.p.attributes, gts, mc.attributes);
    } else if (t == Task::Pose) {
      std::vector<JointSet> gts;
      for (const auto& s : r.samples) gts.push_back(*s.joints);
      rep.pose = metrics::pckh(r.p.joints, gts);
    } else if (t == Task::Segmentation) {
      std::vector<Mask> gts;
      for (const auto& s : r.samples) gts.push_back(data::to_mask(*s.mask));
      rep.seg = metrics::seg_eval(r.p.masks, gts, static_cast<int>(mc.num_parts));
    }
  }
  return rep;
}

metrics::MetricReport evaluate(const fs::path& checkpoint, const fs::path& manifest, const std::set<Task>& tasks,
                               std::optional<data::Split> split) {
  auto model = load_model(checkpoint);
  return evaluate(model, data::load_manifest(manifest), tasks, split);
}

// ------------------------------------------------------------------ train()

namespace {

void write_report(const metrics::MetricReport& r, const fs::path& dir) {
  std::ofstream(dir / "metrics.json") << metrics::to_json(r).dump(2) << '\n';
  const auto [head, row] = metrics::to_csv(r);
  std::ofstream(dir / "metrics.csv") << head << '\n' << row << '\n';
}

}  // namespace

TrainResult train(const TrainConfig& config, const fs::path& run_dir, const TrainOptions& options) {
  fs::create_directories(run_dir / "checkpoints");
  Trainer tr(config);
  {
    auto resolved = to_json(tr.config());
    resolved["model"] = tr.model_config();
    std::ofstream(run_dir / "resolved_config.json") << resolved.dump(2) << '\n';
  }
  auto& model = tr.model();
  const auto params = parameter_count(*model);
  const auto acts = model->estimated_activations_per_sample();
  {
    json est{{"parameters", params}, {"activations_per_sample", acts}};
    std::ofstream(run_dir / "estimate.json") << est.dump(2) << '\n';
  }
  if (config.log_every > 0)
    std::cerr << "model: " << params << " parameters, ~" << acts << " activations per sample\n";

  RunLog prior;
  if (options.resume) {
    tr.resume(*options.resume);
    const auto csv = run_dir / "runlog.csv";
    if (fs::exists(csv)) {
      prior = read_run_log(csv);
      std::erase_if(prior.steps, [&](const StepLog& s) { return s.step >= tr.step(); });
    }
  }

  const auto final_ckpt = run_dir / "checkpoints" / "final.pt";
  RunLog log = prior;
  auto flush_log = [&] { log.write_csv(run_dir / "runlog.csv"); };
  while (tr.step() < config.steps) {
    auto s = tr.train_step();
    log.steps.push_back(s);
    if (options.on_step) options.on_step(s);
    if (config.log_every > 0 && (s.step + 1) % config.log_every == 0) {
      std::cerr << "step " << s.step + 1 << "/" << config.steps << " [" << s.dataset << "] total " << s.total
                << " lr " << s.lr << '\n';
    }
    if (config.checkpoint_every > 0 && tr.step() % config.checkpoint_every == 0 && tr.step() < config.steps) {
      tr.save(run_dir / "checkpoints" / ("step_" + std::to_string(tr.step()) + ".pt"));
      flush_log();
    }
  }
  tr.save(final_ckpt);
  flush_log();

  TrainResult res;
  res.final_checkpoint = final_ckpt;
  if (config.eval.enabled) {
    const auto m = config.eval.manifest ? data::load_manifest(*config.eval.manifest) : tr.manifests().front();
    std::set<Task> tasks = config.eval.tasks;
    if (tasks.empty())
      for (auto t : tr.model_config().heads)
        if (m.tasks.has(t)) tasks.insert(t);
    auto rep = evaluate(model, m, tasks, config.eval.split);
    write_report(rep, run_dir);
    log.evals.emplace_back(tr.step(), rep);
    res.report = std::move(rep);
  }
  res.log = std::move(log);
  return res;
}

}  // namespace mtp::train
