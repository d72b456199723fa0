#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

#include "mtperson/backbone.hpp"
#include "mtperson/types.hpp"

namespace mtp {

/// Global max pooling: N x C x H x W -> N x C. Parameter free.
torch::Tensor embed_head(const torch::Tensor& fm);

/// Normalization for N x C vectors (BatchNorm1d or GroupNorm).
class Norm1dImpl : public torch::nn::Module {
 public:
  Norm1dImpl(NormKind kind, std::int64_t channels, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm gn_{nullptr};
  torch::nn::BatchNorm1d bn_{nullptr};
};
TORCH_MODULE(Norm1d);

/// Person classification: norm -> affine -> (softmax). `forward` returns logits.
class ClassifierHeadImpl : public torch::nn::Module {
 public:
  ClassifierHeadImpl(std::int64_t embedding_dim, std::int64_t num_persons, NormKind norm, std::int64_t groups);
  torch::Tensor forward(const torch::Tensor& embedding);
  torch::Tensor probabilities(const torch::Tensor& embedding) { return torch::softmax(forward(embedding), 1); }

  torch::nn::Linear fc{nullptr};

 private:
  Norm1d norm_{nullptr};
};
TORCH_MODULE(ClassifierHead);

/// Shared norm + ReLU stem followed by one independent affine layer per
/// attribute. `forward` returns one N x classes_a logit tensor per attribute.
class AttributeHeadImpl : public torch::nn::Module {
 public:
  AttributeHeadImpl(std::int64_t embedding_dim, AttributeSchema schema, NormKind norm, std::int64_t groups);
  std::vector<torch::Tensor> forward(const torch::Tensor& embedding);
  std::vector<torch::Tensor> probabilities(const torch::Tensor& embedding);

  const AttributeSchema& schema() const { return schema_; }
  std::vector<torch::nn::Linear> fcs;

 private:
  AttributeSchema schema_;
  Norm1d norm_{nullptr};
};
TORCH_MODULE(AttributeHead);

/// Differentiable coordinate extraction. `heatmaps` is N x J x h x w; each map
/// goes through a spatial softmax of temperature * logits and the expected
/// cell center is mapped to input pixels as ((col + 0.5) * stride,
/// (row + 0.5) * stride). Returns N x J x 2 holding (x, y).
torch::Tensor soft_argmax(const torch::Tensor& heatmaps, double temperature, double stride);

struct PoseOutput {
  torch::Tensor heatmaps;  ///< N x J x h x w
  torch::Tensor coords;    ///< N x J x 2, input pixels
};

/// 1x1 convolution to one heatmap per joint, then soft-argmax. With
/// in_channels == 0 the head has no convolution and only `from_heatmaps` works.
class PoseHeadImpl : public torch::nn::Module {
 public:
  PoseHeadImpl(std::int64_t in_channels, std::int64_t num_joints, double temperature, double stride);
  PoseOutput forward(const torch::Tensor& fm);
  /// Soft-argmax on maps that already are heatmaps (split-output topology).
  PoseOutput from_heatmaps(const torch::Tensor& heatmaps) const;

  double temperature() const { return temperature_; }

 private:
  torch::nn::Conv2d conv_{nullptr};
  double temperature_;
  double stride_;
};
TORCH_MODULE(PoseHead);

struct SegHeadOptions {
  std::vector<std::int64_t> level_channels;  ///< input channels at strides S/4, S/2, S
  std::int64_t num_classes = 5;
  std::int64_t width = 32;  ///< pyramid channel width
  NormKind norm = NormKind::GroupNorm;
  std::int64_t groups = 8;
  std::int64_t input_height = 128;
  std::int64_t input_width = 64;
  std::int64_t total_stride = 16;
};

/// Pyramid segmentation head: lateral 1x1 projections with a top-down pathway,
/// per-level 3x3 conv + upsampling to stride S/4, summed, projected to classes
/// and bilinearly upsampled to full input resolution.
class SegHeadImpl : public torch::nn::Module {
 public:
  explicit SegHeadImpl(SegHeadOptions options);
  /// `levels` = {stride S/4, stride S/2, stride S}. Returns N x P x H x W logits.
  torch::Tensor forward(const std::vector<torch::Tensor>& levels);

  const SegHeadOptions& options() const { return opt_; }

 private:
  SegHeadOptions opt_;
  std::vector<torch::nn::Conv2d> lateral_;
  // Level S/4: one conv stage. S/2: one conv stage + 2x up. S: two (conv stage + 2x up).
  std::vector<std::vector<std::pair<torch::nn::Conv2d, Norm2d>>> refine_;
  torch::nn::Conv2d classifier_{nullptr};
};
TORCH_MODULE(SegHead);

}  // namespace mtp
