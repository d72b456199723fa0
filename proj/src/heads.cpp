#include "mtperson/heads.hpp"

#include "mtperson/errors.hpp"

namespace mtp {

namespace F = torch::nn::functional;

torch::Tensor embed_head(const torch::Tensor& fm) {
  if (fm.dim() != 4) throw ShapeError("embed_head expects N x C x H x W");
  return fm.amax({2, 3});
}

Norm1dImpl::Norm1dImpl(NormKind kind, std::int64_t channels, std::int64_t groups) {
  if (kind == NormKind::GroupNorm)
    gn_ = register_module("gn", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels)));
  else
    bn_ = register_module("bn", torch::nn::BatchNorm1d(channels));
}

torch::Tensor Norm1dImpl::forward(const torch::Tensor& x) { return gn_ ? gn_(x) : bn_(x); }

ClassifierHeadImpl::ClassifierHeadImpl(std::int64_t embedding_dim, std::int64_t num_persons, NormKind norm,
                                       std::int64_t groups) {
  if (num_persons < 2) throw ConfigError("num_persons", "person classification needs at least 2 classes");
  norm_ = register_module("norm", Norm1d(norm, embedding_dim, groups));
  fc = register_module("fc", torch::nn::Linear(embedding_dim, num_persons));
}

torch::Tensor ClassifierHeadImpl::forward(const torch::Tensor& embedding) { return fc(norm_(embedding)); }

AttributeHeadImpl::AttributeHeadImpl(std::int64_t embedding_dim, AttributeSchema schema, NormKind norm,
                                     std::int64_t groups)
    : schema_(std::move(schema)) {
  schema_.validate();
  if (schema_.empty()) throw ConfigError("attributes", "attribute head needs at least one attribute");
  norm_ = register_module("norm", Norm1d(norm, embedding_dim, groups));
  for (std::size_t a = 0; a < schema_.size(); ++a) {
    fcs.push_back(register_module("fc" + std::to_string(a),
                                  torch::nn::Linear(embedding_dim, schema_.attributes[a].classes)));
  }
}

std::vector<torch::Tensor> AttributeHeadImpl::forward(const torch::Tensor& embedding) {
  const auto stem = torch::relu(norm_(embedding));
  std::vector<torch::Tensor> out;
  out.reserve(fcs.size());
  for (auto& fc : fcs) out.push_back(fc(stem));
  return out;
}

std::vector<torch::Tensor> AttributeHeadImpl::probabilities(const torch::Tensor& embedding) {
  auto logits = forward(embedding);
  for (auto& l : logits) l = torch::softmax(l, 1);
  return logits;
}

torch::Tensor soft_argmax(const torch::Tensor& heatmaps, double temperature, double stride) {
  if (heatmaps.dim() != 4) throw ShapeError("soft_argmax expects N x J x h x w");
  if (!(temperature > 0.0)) throw ConfigError("temperature", "must be positive");
  const auto n = heatmaps.size(0), j = heatmaps.size(1), h = heatmaps.size(2), w = heatmaps.size(3);
  const auto opts = heatmaps.options();
  const auto prob = torch::softmax(heatmaps.reshape({n, j, h * w}) * temperature, -1).reshape({n, j, h, w});
  const auto xs = (torch::arange(w, opts) + 0.5) * stride;
  const auto ys = (torch::arange(h, opts) + 0.5) * stride;
  const auto x = (prob.sum(2) * xs).sum(-1);
  const auto y = (prob.sum(3) * ys).sum(-1);
  return torch::stack({x, y}, -1);
}

PoseHeadImpl::PoseHeadImpl(std::int64_t in_channels, std::int64_t num_joints, double temperature, double stride)
    : temperature_(temperature), stride_(stride) {
  if (num_joints < 1) throw ConfigError("num_joints", "must be at least 1");
  if (!(temperature > 0.0)) throw ConfigError("temperature", "must be positive");
  if (in_channels > 0)
    conv_ = register_module("conv", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, num_joints, 1)));
}

PoseOutput PoseHeadImpl::forward(const torch::Tensor& fm) {
  if (!conv_) throw ShapeError("pose head was built without a heatmap convolution");
  return from_heatmaps(conv_(fm));
}

PoseOutput PoseHeadImpl::from_heatmaps(const torch::Tensor& heatmaps) const {
  return {heatmaps, soft_argmax(heatmaps, temperature_, stride_)};
}

SegHeadImpl::SegHeadImpl(SegHeadOptions options) : opt_(std::move(options)) {
  using torch::nn::Conv2dOptions;
  if (opt_.level_channels.size() != 3) throw ConfigError("seg.level_channels", "needs exactly three levels");
  if (opt_.num_classes < 2) throw ConfigError("num_parts", "segmentation needs at least 2 classes");
  if (opt_.width % opt_.groups != 0) throw ConfigError("seg.width", "must be divisible by norm groups");
  if (opt_.total_stride % 4 != 0) throw ConfigError("total_stride", "segmentation needs a stride divisible by 4");
  for (std::size_t l = 0; l < 3; ++l) {
    lateral_.push_back(register_module("lateral" + std::to_string(l),
                                       torch::nn::Conv2d(Conv2dOptions(opt_.level_channels[l], opt_.width, 1))));
    const std::size_t stages = l == 0 ? 1 : l;
    std::vector<std::pair<torch::nn::Conv2d, Norm2d>> chain;
    for (std::size_t s = 0; s < stages; ++s) {
      const auto tag = std::to_string(l) + "_" + std::to_string(s);
      auto conv = register_module("refine" + tag, torch::nn::Conv2d(Conv2dOptions(opt_.width, opt_.width, 3)
                                                                       .padding(1)
                                                                       .bias(false)));
      auto norm = register_module("refine_norm" + tag, Norm2d(opt_.norm, opt_.width, opt_.groups));
      chain.emplace_back(conv, norm);
    }
    refine_.push_back(std::move(chain));
  }
  classifier_ = register_module("classifier", torch::nn::Conv2d(Conv2dOptions(opt_.width, opt_.num_classes, 1)));
}

namespace {

torch::Tensor upsample(const torch::Tensor& x, std::int64_t h, std::int64_t w) {
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<std::int64_t>{h, w})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

}  // namespace

torch::Tensor SegHeadImpl::forward(const std::vector<torch::Tensor>& levels) {
  if (levels.size() != 3) throw ShapeError("seg head expects three pyramid levels");
  const std::int64_t strides[3] = {opt_.total_stride / 4, opt_.total_stride / 2, opt_.total_stride};
  for (std::size_t l = 0; l < 3; ++l) {
    const auto& x = levels[l];
    if (x.dim() != 4 || x.size(1) != opt_.level_channels[l] || x.size(2) * strides[l] != opt_.input_height ||
        x.size(3) * strides[l] != opt_.input_width) {
      throw ShapeError("pyramid level " + std::to_string(l) + " has shape " + c10::str(x.sizes()) +
                       ", inconsistent with stride " + std::to_string(strides[l]));
    }
  }
  // Top-down pathway.
  std::vector<torch::Tensor> p(3);
  p[2] = lateral_[2](levels[2]);
  for (int l = 1; l >= 0; --l) {
    const auto lat = lateral_[l](levels[l]);
    p[l] = lat + upsample(p[l + 1], lat.size(2), lat.size(3));
  }
  const auto qh = opt_.input_height / strides[0];
  const auto qw = opt_.input_width / strides[0];
  torch::Tensor sum;
  for (std::size_t l = 0; l < 3; ++l) {
    auto x = p[l];
    for (auto& [conv, norm] : refine_[l]) {
      x = torch::relu(norm(conv(x)));
      if (l > 0) x = upsample(x, x.size(2) * 2, x.size(3) * 2);
    }
    if (x.size(2) != qh || x.size(3) != qw) x = upsample(x, qh, qw);
    sum = sum.defined() ? sum + x : x;
  }
  return upsample(classifier_(sum), opt_.input_height, opt_.input_width);
}

}  // namespace mtp
