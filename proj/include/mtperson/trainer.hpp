#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mtperson/data.hpp"
#include "mtperson/losses.hpp"
#include "mtperson/metrics.hpp"
#include "mtperson/model.hpp"

namespace mtp::train {

/// One dataset taking part in (interleaved) training.
struct DatasetSpec {
  std::filesystem::path manifest;
  std::set<losses::LossKind> losses;  ///< active losses for batches of this dataset
  int P = 8;                          ///< PK composition, used when the triplet loss is active
  int K = 4;
  int batch_size = 32;                ///< plain batches otherwise
  data::AugmentOps augment;
  std::optional<std::size_t> limit_identities;
};

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Constant rate, then exponential decay to final_factor * lr over the
/// remaining fraction of training.
struct ScheduleConfig {
  double decay_start = 2.0 / 3.0;
  double final_factor = 0.01;
};

struct InitConfig {
  std::filesystem::path checkpoint;
  std::vector<std::string> scopes{"all"};
};

struct EvalConfig {
  bool enabled = true;
  std::optional<std::filesystem::path> manifest;  ///< defaults to the first dataset
  std::optional<data::Split> split;              ///< nullopt: automatic protocol
  std::set<Task> tasks;                           ///< empty: all heads the data supports
};

struct TrainConfig {
  ModelConfig model;  ///< heads/sizes left empty are inferred from the datasets
  std::vector<DatasetSpec> datasets;
  std::map<losses::LossKind, double> loss_weights;
  losses::MarginMode margin = losses::MarginMode::softplus();
  double keep_fraction = 0.25;
  double pose_normalizer = 0.0;  ///< pose loss distance scale in pixels, 0 = input height
  OptimizerConfig optimizer;
  ScheduleConfig schedule;
  std::int64_t steps = 1000;
  std::uint64_t seed = 0;
  std::int64_t checkpoint_every = 0;  ///< 0: final checkpoint only
  std::int64_t log_every = 0;         ///< progress line cadence on stderr, 0 = silent
  std::optional<InitConfig> init;
  EvalConfig eval;
  int threads = 1;
};

/// Parses a config; relative paths resolve against `base_dir`.
TrainConfig config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const TrainConfig& c);
TrainConfig load_config(const std::filesystem::path& path);

struct StepLog {
  std::int64_t step = 0;
  std::string dataset;
  std::map<losses::LossKind, double> losses;
  double total = 0.0;
  double lr = 0.0;
};

struct RunLog {
  std::vector<StepLog> steps;
  std::vector<std::pair<std::int64_t, metrics::MetricReport>> evals;

  static std::string csv_header();
  static std::string csv_row(const StepLog& s);
  void write_csv(const std::filesystem::path& path) const;
  /// Batches per dataset name.
  std::map<std::string, std::size_t> dataset_counts() const;
};

RunLog read_run_log(const std::filesystem::path& csv);

/// Learning rate at `step` of `total` steps.
double scheduled_lr(const OptimizerConfig& opt, const ScheduleConfig& sched, std::int64_t step, std::int64_t total);

/// Tensors for one batch.
struct BatchTensors {
  std::string dataset;
  torch::Tensor images;          ///< N x 3 x H x W in [0, 1]
  std::vector<std::int64_t> person_ids;
  std::vector<std::int64_t> class_labels;  ///< contiguous person-classifier labels
  torch::Tensor attributes;      ///< N x A long, -1 missing
  torch::Tensor joints;          ///< N x J x 2
  torch::Tensor visible;         ///< N x J bool
  torch::Tensor masks;           ///< N x H x W long
};

/// Joint optimization over an interleaved batch plan.
class Trainer {
 public:
  explicit Trainer(TrainConfig config);
  ~Trainer();
  Trainer(const Trainer&) = delete;
  Trainer& operator=(const Trainer&) = delete;

  const TrainConfig& config() const;
  const ModelConfig& model_config() const;
  MultiTaskModel& model();
  const data::BatchPlan& plan() const;
  const std::vector<data::DatasetManifest>& manifests() const;
  std::int64_t step() const;

  /// Decoded (and, with `augment_step`, augmented) tensors of a plan batch.
  BatchTensors load_batch(const data::Batch& batch, std::optional<std::int64_t> augment_step) const;
  /// Forward pass plus the dataset's active losses; no optimizer step.
  losses::LossBundle compute_losses(const BatchTensors& batch);
  /// One optimizer step on the next plan batch. DivergenceError on NaN/Inf.
  StepLog train_step();
  const RunLog& log() const;

  void save(const std::filesystem::path& checkpoint) const;
  /// Restores model, optimizer state and step counter from `save` output.
  void resume(const std::filesystem::path& checkpoint);

 private:
  struct State;
  std::unique_ptr<State> s_;
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  RunLog log;
  std::optional<metrics::MetricReport> report;
};

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::function<void(const StepLog&)> on_step;
};

/// Full run into `run_dir`: resolved config, RunLog CSV, checkpoints and the
/// final MetricReport (JSON + CSV).
TrainResult train(const TrainConfig& config, const std::filesystem::path& run_dir, const TrainOptions& options = {});

/// Inference-mode evaluation. With `split` unset, ReID uses the query/gallery
/// records if present and all-vs-all over train records otherwise; other
/// tasks use query+gallery, val, or train records, in that order.
metrics::MetricReport evaluate(MultiTaskModel& model, const data::DatasetManifest& manifest,
                               const std::set<Task>& tasks, std::optional<data::Split> split = std::nullopt,
                               int batch_size = 64);

metrics::MetricReport evaluate(const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
                               const std::set<Task>& tasks, std::optional<data::Split> split = std::nullopt);

/// Images of `indices` as an N x 3 x H x W float tensor at the model input size.
torch::Tensor load_images(const data::DatasetManifest& m, const std::vector<std::size_t>& indices, int height,
                          int width);

/// Model predictions in label space.
struct Predictions {
  std::vector<JointSet> joints;
  std::vector<Mask> masks;
  std::vector<std::vector<int>> attributes;
  std::vector<float> embeddings;  ///< row-major N x D
  int embedding_dim = 0;
};

Predictions predict(MultiTaskModel& model, const data::DatasetManifest& m, const std::vector<std::size_t>& indices,
                    const std::set<Task>& tasks, int batch_size = 64);

}  // namespace mtp::train

namespace mtp::data {

/// Annotates `target` with the predictions of a pose model and a segmentation
/// model (either may be empty), writing masks to out_dir/pseudo_masks and the
/// extended manifest to out_dir/manifest.json. With `mapping`, predicted
/// masks are relabeled through it.
DatasetManifest pseudo_label(const DatasetManifest& target, const std::optional<std::filesystem::path>& pose_checkpoint,
                             const std::optional<std::filesystem::path>& seg_checkpoint,
                             const std::filesystem::path& out_dir,
                             const std::optional<ClassMapping>& mapping = std::nullopt);

}  // namespace mtp::data
