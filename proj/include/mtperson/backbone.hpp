#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

namespace mtp {

enum class Topology { SingleBranch, MultiBranch, SplitOutput };
enum class NormKind { GroupNorm, BatchNorm };

std::string to_string(Topology t);
std::string to_string(NormKind n);
Topology topology_from_string(const std::string& s);
NormKind norm_from_string(const std::string& s);

/// Staged residual feature extractor. Each entry of `stage_channels` is one
/// stride-2 stage; a final stride-1 stage produces `final_channels`, so the
/// output stride is 2^len(stage_channels).
struct BackboneConfig {
  Topology topology = Topology::SingleBranch;
  std::vector<std::int64_t> stage_channels{16, 32, 48, 64};
  std::int64_t final_channels = 128;
  NormKind norm_kind = NormKind::GroupNorm;
  std::int64_t norm_groups = 8;
  std::int64_t num_branches = 1;    ///< MultiBranch only
  std::int64_t split_channels = 0;  ///< SplitOutput only: joint heatmap channels
  std::int64_t input_height = 128;
  std::int64_t input_width = 64;
  std::int64_t total_stride = 16;
  double input_mean = 0.5;
  double input_std = 0.5;

  /// Throws ConfigError naming the offending field.
  void validate() const;

  std::int64_t output_height() const { return input_height / total_stride; }
  std::int64_t output_width() const { return input_width / total_stride; }
  /// Number of output branches (K for MultiBranch, else 1).
  std::int64_t branch_count() const { return topology == Topology::MultiBranch ? num_branches : 1; }

  bool operator==(const BackboneConfig&) const = default;
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

/// GroupNorm or BatchNorm over `channels`, chosen at construction.
class Norm2dImpl : public torch::nn::Module {
 public:
  Norm2dImpl(NormKind kind, std::int64_t channels, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm gn_{nullptr};
  torch::nn::BatchNorm2d bn_{nullptr};
};
TORCH_MODULE(Norm2d);

/// conv3x3-norm-relu-conv3x3-norm with a projection shortcut when shape changes.
class ResidualBlockImpl : public torch::nn::Module {
 public:
  ResidualBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride, NormKind kind,
                    std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, proj_{nullptr};
  Norm2d norm1_{nullptr}, norm2_{nullptr}, proj_norm_{nullptr};
};
TORCH_MODULE(ResidualBlock);

struct BackboneOutput {
  /// One feature map per branch, N x C x H/S x W/S.
  std::vector<torch::Tensor> branches;
  /// Shared-stage outputs at strides S/4 and S/2, tapped without modification.
  std::vector<torch::Tensor> laterals;
};

class BackboneImpl : public torch::nn::Module {
 public:
  explicit BackboneImpl(BackboneConfig config);

  /// `images` is N x 3 x H x W with values in [0, 1]; normalized internally.
  BackboneOutput forward(const torch::Tensor& images);

  const BackboneConfig& config() const { return config_; }
  /// Channels of the stage outputs exposed as `laterals`.
  std::vector<std::int64_t> lateral_channels() const;
  /// Parameter count of one copy of the final (stride-1) stage.
  std::int64_t final_stage_parameter_count() const;

 private:
  BackboneConfig config_;
  std::vector<ResidualBlock> stages_;
  std::vector<ResidualBlock> finals_;
};
TORCH_MODULE(Backbone);

/// Builds the configured extractor; validates the config first.
Backbone build_backbone(const BackboneConfig& config);

/// Number of scalar parameters of a module.
std::int64_t parameter_count(const torch::nn::Module& m);

/// Channel-wise split of an N x C x H x W map into the first `j` channels
/// (pose) and the remaining C - j (shared). Throws BoundsError unless 0 < j < C.
std::pair<torch::Tensor, torch::Tensor> split_channels(const torch::Tensor& fm, std::int64_t j);

}  // namespace mtp
