#include "mtperson/backbone.hpp"

#include "mtperson/errors.hpp"

namespace mtp {

namespace F = torch::nn::functional;

std::string to_string(Topology t) {
  switch (t) {
    case Topology::SingleBranch: return "single";
    case Topology::MultiBranch: return "multi";
    case Topology::SplitOutput: return "split";
  }
  return "?";
}

std::string to_string(NormKind n) { return n == NormKind::GroupNorm ? "group" : "batch"; }

Topology topology_from_string(const std::string& s) {
  if (s == "single" || s == "SingleBranch") return Topology::SingleBranch;
  if (s == "multi" || s == "MultiBranch") return Topology::MultiBranch;
  if (s == "split" || s == "SplitOutput") return Topology::SplitOutput;
  throw ConfigError("topology", "unknown topology '" + s + "'");
}

NormKind norm_from_string(const std::string& s) {
  if (s == "group" || s == "GroupNorm") return NormKind::GroupNorm;
  if (s == "batch" || s == "BatchNorm") return NormKind::BatchNorm;
  throw ConfigError("norm_kind", "unknown normalization '" + s + "'");
}

void BackboneConfig::validate() const {
  if (stage_channels.size() < 3) throw ConfigError("stage_channels", "needs at least 3 downsampling stages");
  for (std::size_t i = 0; i < stage_channels.size(); ++i)
    if (stage_channels[i] <= 0)
      throw ConfigError("stage_channels[" + std::to_string(i) + "]", "must be positive");
  if (final_channels <= 0) throw ConfigError("final_channels", "must be positive");
  if (norm_groups <= 0) throw ConfigError("norm_groups", "must be positive");
  if (final_channels % norm_groups != 0)
    throw ConfigError("norm_groups", "does not divide final_channels");
  for (std::size_t i = 0; i < stage_channels.size(); ++i)
    if (stage_channels[i] % norm_groups != 0)
      throw ConfigError("norm_groups", "does not divide stage_channels[" + std::to_string(i) + "]");
  if (total_stride != (std::int64_t{1} << stage_channels.size()))
    throw ConfigError("total_stride", "must equal 2^len(stage_channels) = " +
                                          std::to_string(std::int64_t{1} << stage_channels.size()));
  if (input_height <= 0 || input_height % total_stride != 0)
    throw ConfigError("input_height", "must be a positive multiple of total_stride");
  if (input_width <= 0 || input_width % total_stride != 0)
    throw ConfigError("input_width", "must be a positive multiple of total_stride");
  if (!(input_std > 0.0)) throw ConfigError("input_std", "must be positive");
  switch (topology) {
    case Topology::MultiBranch:
      if (num_branches < 1) throw ConfigError("num_branches", "MultiBranch needs at least one branch");
      if (split_channels != 0) throw ConfigError("split_channels", "only valid for SplitOutput");
      break;
    case Topology::SplitOutput:
      if (split_channels <= 0 || split_channels >= final_channels)
        throw ConfigError("split_channels", "SplitOutput requires 0 < split_channels < final_channels");
      if (num_branches != 1) throw ConfigError("num_branches", "only valid for MultiBranch");
      break;
    case Topology::SingleBranch:
      if (num_branches != 1) throw ConfigError("num_branches", "only valid for MultiBranch");
      if (split_channels != 0) throw ConfigError("split_channels", "only valid for SplitOutput");
      break;
  }
}

void to_json(nlohmann::json& j, const BackboneConfig& c) {
  j = {{"topology", to_string(c.topology)},
       {"stage_channels", c.stage_channels},
       {"final_channels", c.final_channels},
       {"norm_kind", to_string(c.norm_kind)},
       {"norm_groups", c.norm_groups},
       {"num_branches", c.num_branches},
       {"split_channels", c.split_channels},
       {"input_height", c.input_height},
       {"input_width", c.input_width},
       {"total_stride", c.total_stride},
       {"input_mean", c.input_mean},
       {"input_std", c.input_std}};
}

void from_json(const nlohmann::json& j, BackboneConfig& c) {
  BackboneConfig d;
  c.topology = topology_from_string(j.value("topology", to_string(d.topology)));
  c.stage_channels = j.value("stage_channels", d.stage_channels);
  c.final_channels = j.value("final_channels", d.final_channels);
  c.norm_kind = norm_from_string(j.value("norm_kind", to_string(d.norm_kind)));
  c.norm_groups = j.value("norm_groups", d.norm_groups);
  c.num_branches = j.value("num_branches", d.num_branches);
  c.split_channels = j.value("split_channels", d.split_channels);
  c.input_height = j.value("input_height", d.input_height);
  c.input_width = j.value("input_width", d.input_width);
  c.total_stride = j.value("total_stride", d.total_stride);
  c.input_mean = j.value("input_mean", d.input_mean);
  c.input_std = j.value("input_std", d.input_std);
}

Norm2dImpl::Norm2dImpl(NormKind kind, std::int64_t channels, std::int64_t groups) {
  if (kind == NormKind::GroupNorm)
    gn_ = register_module("gn", torch::nn::GroupNorm(torch::nn::GroupNormOptions(groups, channels)));
  else
    bn_ = register_module("bn", torch::nn::BatchNorm2d(channels));
}

torch::Tensor Norm2dImpl::forward(const torch::Tensor& x) { return gn_ ? gn_(x) : bn_(x); }

ResidualBlockImpl::ResidualBlockImpl(std::int64_t in, std::int64_t out, std::int64_t stride, NormKind kind,
                                     std::int64_t groups) {
  using torch::nn::Conv2dOptions;
  conv1_ = register_module(
      "conv1", torch::nn::Conv2d(Conv2dOptions(in, out, 3).stride(stride).padding(1).bias(false)));
  norm1_ = register_module("norm1", Norm2d(kind, out, groups));
  conv2_ = register_module("conv2", torch::nn::Conv2d(Conv2dOptions(out, out, 3).padding(1).bias(false)));
  norm2_ = register_module("norm2", Norm2d(kind, out, groups));
  if (in != out || stride != 1) {
    proj_ = register_module("proj",
                            torch::nn::Conv2d(Conv2dOptions(in, out, 1).stride(stride).bias(false)));
    proj_norm_ = register_module("proj_norm", Norm2d(kind, out, groups));
  }
}

torch::Tensor ResidualBlockImpl::forward(const torch::Tensor& x) {
  auto y = torch::relu(norm1_(conv1_(x)));
  y = norm2_(conv2_(y));
  auto skip = proj_ ? proj_norm_(proj_(x)) : x;
  return torch::relu(y + skip);
}

BackboneImpl::BackboneImpl(BackboneConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& ch = config_.stage_channels;
  std::int64_t in = 3;
  for (std::size_t i = 0; i < ch.size(); ++i) {
    stages_.push_back(register_module("stage" + std::to_string(i),
                                      ResidualBlock(in, ch[i], 2, config_.norm_kind, config_.norm_groups)));
    in = ch[i];
  }
  for (std::int64_t k = 0; k < config_.branch_count(); ++k) {
    finals_.push_back(register_module(
        "final" + std::to_string(k),
        ResidualBlock(in, config_.final_channels, 1, config_.norm_kind, config_.norm_groups)));
  }
  // Every branch starts from the same final-stage weights.
  torch::NoGradGuard no_grad;
  const auto src = finals_.front()->named_parameters();
  for (std::size_t k = 1; k < finals_.size(); ++k)
    for (auto& p : finals_[k]->named_parameters()) p.value().copy_(src[p.key()]);
}

BackboneOutput BackboneImpl::forward(const torch::Tensor& images) {
  const auto& c = config_;
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != c.input_height ||
      images.size(3) != c.input_width) {
    throw ShapeError("backbone expects N x 3 x " + std::to_string(c.input_height) + " x " +
                     std::to_string(c.input_width) + ", got " + c10::str(images.sizes()));
  }
  auto x = (images - c.input_mean) / c.input_std;
  BackboneOutput out;
  const auto n = stages_.size();
  for (std::size_t i = 0; i < n; ++i) {
    x = stages_[i]->forward(x);
    if (i == n - 3 || i == n - 2) out.laterals.push_back(x);
  }
  for (auto& f : finals_) out.branches.push_back(f->forward(x));
  return out;
}

std::vector<std::int64_t> BackboneImpl::lateral_channels() const {
  const auto& ch = config_.stage_channels;
  return {ch[ch.size() - 3], ch[ch.size() - 2]};
}

std::int64_t BackboneImpl::final_stage_parameter_count() const { return parameter_count(*finals_.front()); }

Backbone build_backbone(const BackboneConfig& config) {
  config.validate();
  return Backbone(config);
}

std::int64_t parameter_count(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

std::pair<torch::Tensor, torch::Tensor> split_channels(const torch::Tensor& fm, std::int64_t j) {
  if (fm.dim() != 4) throw ShapeError("split_channels expects N x C x H x W");
  const auto c = fm.size(1);
  if (j <= 0 || j >= c)
    throw BoundsError("split_channels: need 0 < j < C, got j=" + std::to_string(j) + ", C=" + std::to_string(c));
  return {fm.narrow(1, 0, j), fm.narrow(1, j, c - j)};
}

}  // namespace mtp
