#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "mtperson/backbone.hpp"
#include "mtperson/heads.hpp"
#include "mtperson/types.hpp"

namespace mtp {

/// Backbone topology plus the set of attached heads.
struct ModelConfig {
  BackboneConfig backbone;
  std::set<Task> heads;                 ///< tasks with an attached head
  std::int64_t num_persons = 0;         ///< > 0 adds the person classifier to the ReID head
  AttributeSchema attributes;
  std::int64_t num_joints = 0;
  std::int64_t num_parts = 0;
  double temperature = 1.0;             ///< soft-argmax temperature
  std::optional<NormKind> head_norm;    ///< classifier/attribute norm; defaults to the backbone's
  std::int64_t seg_width = 32;
  std::map<Task, std::int64_t> branch_of;  ///< MultiBranch routing; defaults to head order mod K

  bool has(Task t) const { return heads.count(t) != 0; }
  NormKind effective_head_norm() const { return head_norm.value_or(backbone.norm_kind); }
  /// Branch feeding a task (0 unless MultiBranch).
  std::int64_t branch(Task t) const;
  /// Embedding dimension seen by the non-pose heads.
  std::int64_t embedding_dim() const;
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ModelOutput {
  torch::Tensor embedding;                   ///< N x D (ReID)
  torch::Tensor person_logits;               ///< N x num_persons, when the classifier exists
  std::vector<torch::Tensor> attribute_logits;
  PoseOutput pose;
  torch::Tensor seg_logits;                  ///< N x P x H x W
};

class MultiTaskModelImpl : public torch::nn::Module {
 public:
  explicit MultiTaskModelImpl(ModelConfig config);

  /// Runs the backbone once and the heads of the requested tasks.
  ModelOutput forward(const torch::Tensor& images, const std::set<Task>& tasks);

  const ModelConfig& config() const { return config_; }
  Backbone backbone{nullptr};
  ClassifierHead classifier{nullptr};
  AttributeHead attributes{nullptr};
  PoseHead pose{nullptr};
  SegHead segmentation{nullptr};

  /// Rough per-sample activation element count of one forward pass.
  std::int64_t estimated_activations_per_sample() const;

 private:
  ModelConfig config_;
};
TORCH_MODULE(MultiTaskModel);

/// Parameter scope names: "all", "backbone", "heads", or a module name
/// ("classifier", "attributes", "pose", "segmentation", "backbone.final0", ...).
bool scope_matches(const std::string& scope, const std::string& parameter_name);

/// Archive holding every named parameter and buffer plus metadata (model
/// config and training step).
void save_checkpoint(MultiTaskModel& model, const std::filesystem::path& path, const nlohmann::json& extra = {});

struct CheckpointInfo {
  ModelConfig config;
  nlohmann::json meta;
};

CheckpointInfo read_checkpoint_info(const std::filesystem::path& path);

/// Builds a model from the config stored in the checkpoint and loads all weights.
MultiTaskModel load_model(const std::filesystem::path& path);

/// Loads every tensor into `model`; the stored model config must equal the
/// model's (LoadError otherwise).
void load_checkpoint(MultiTaskModel& model, const std::filesystem::path& path);

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;  ///< model tensors outside the scopes
};

/// Copies the tensors under `scopes` from the checkpoint; everything else keeps
/// its current (fresh) values. LoadError on shape mismatch or a scope that
/// matches nothing.
LoadReport init_from_checkpoint(MultiTaskModel& model, const std::filesystem::path& path,
                                const std::vector<std::string>& scopes);

}  // namespace mtp
