#include "mtperson/model.hpp"

#include <cstring>

#include "mtperson/errors.hpp"

namespace mtp {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kMetaKey = "__meta__";
constexpr const char* kFormat = "mtperson-checkpoint-1";

int task_index(Task t) { return static_cast<int>(t); }

torch::Tensor string_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<std::int64_t>(s.size())}, torch::kUInt8);
  if (!s.empty()) std::memcpy(t.data_ptr<std::uint8_t>(), s.data(), s.size());
  return t;
}

std::string tensor_string(const torch::Tensor& t) {
  const auto c = t.contiguous();
  return {reinterpret_cast<const char*>(c.data_ptr<std::uint8_t>()), static_cast<std::size_t>(c.numel())};
}

std::vector<std::pair<std::string, torch::Tensor>> named_tensors(torch::nn::Module& m) {
  std::vector<std::pair<std::string, torch::Tensor>> out;
  for (auto& p : m.named_parameters()) out.emplace_back(p.key(), p.value());
  for (auto& b : m.named_buffers()) out.emplace_back(b.key(), b.value());
  return out;
}

}  // namespace

std::int64_t ModelConfig::branch(Task t) const {
  if (backbone.topology != Topology::MultiBranch) return 0;
  const auto it = branch_of.find(t);
  if (it != branch_of.end()) return it->second;
  return task_index(t) % backbone.num_branches;
}

std::int64_t ModelConfig::embedding_dim() const {
  if (backbone.topology == Topology::SplitOutput) return backbone.final_channels - backbone.split_channels;
  return backbone.final_channels;
}

void ModelConfig::validate() const {
  backbone.validate();
  if (heads.empty()) throw ConfigError("heads", "model needs at least one head");
  if (!(temperature > 0.0)) throw ConfigError("temperature", "must be positive");
  if (num_persons == 1 || num_persons < 0) throw ConfigError("num_persons", "must be 0 or at least 2");
  if (num_persons > 0 && !has(Task::ReId)) throw ConfigError("num_persons", "person classifier needs the reid head");
  if (has(Task::Attributes)) {
    attributes.validate();
    if (attributes.empty()) throw ConfigError("attributes", "attribute head needs a schema");
  }
  if (has(Task::Pose) && num_joints < 1) throw ConfigError("num_joints", "pose head needs joints");
  if (has(Task::Segmentation) && num_parts < 2) throw ConfigError("num_parts", "segmentation needs at least 2 classes");
  if (has(Task::Segmentation) && seg_width % backbone.norm_groups != 0)
    throw ConfigError("seg_width", "must be divisible by norm_groups");
  if (backbone.topology == Topology::SplitOutput) {
    if (!has(Task::Pose)) throw ConfigError("heads", "SplitOutput needs the pose head");
    if (backbone.split_channels != num_joints)
      throw ConfigError("split_channels", "must equal num_joints for SplitOutput");
  }
  if ((has(Task::Attributes) || num_persons > 0) && effective_head_norm() == NormKind::GroupNorm &&
      embedding_dim() % backbone.norm_groups != 0)
    throw ConfigError("norm_groups", "does not divide the embedding dimension");
  for (const auto& [t, b] : branch_of)
    if (b < 0 || b >= backbone.branch_count())
      throw ConfigError("branch_of." + std::string(to_string(t)), "branch index out of range");
}

void to_json(json& j, const ModelConfig& c) {
  j = json::object();
  j["backbone"] = c.backbone;
  auto heads = json::array();
  for (auto t : c.heads) heads.push_back(std::string(to_string(t)));
  j["heads"] = heads;
  j["num_persons"] = c.num_persons;
  auto attrs = json::array();
  for (const auto& a : c.attributes.attributes) attrs.push_back({{"name", a.name}, {"classes", a.classes}});
  j["attributes"] = attrs;
  j["num_joints"] = c.num_joints;
  j["num_parts"] = c.num_parts;
  j["temperature"] = c.temperature;
  j["head_norm"] = c.head_norm ? json(to_string(*c.head_norm)) : json(nullptr);
  j["seg_width"] = c.seg_width;
  json routing = json::object();
  for (const auto& [t, b] : c.branch_of) routing[std::string(to_string(t))] = b;
  j["branch_of"] = routing;
}

void from_json(const json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (j.contains("backbone")) c.backbone = j.at("backbone").get<BackboneConfig>();
  for (const auto& h : j.value("heads", std::vector<std::string>{})) c.heads.insert(task_from_string(h));
  c.num_persons = j.value("num_persons", std::int64_t{0});
  if (j.contains("attributes"))
    for (const auto& a : j.at("attributes"))
      c.attributes.attributes.push_back({a.at("name").get<std::string>(), a.at("classes").get<int>()});
  c.num_joints = j.value("num_joints", std::int64_t{0});
  c.num_parts = j.value("num_parts", std::int64_t{0});
  c.temperature = j.value("temperature", 1.0);
  if (j.contains("head_norm") && !j.at("head_norm").is_null())
    c.head_norm = norm_from_string(j.at("head_norm").get<std::string>());
  c.seg_width = j.value("seg_width", std::int64_t{32});
  if (j.contains("branch_of"))
    for (const auto& [k, v] : j.at("branch_of").items()) c.branch_of[task_from_string(k)] = v.get<std::int64_t>();
}

MultiTaskModelImpl::MultiTaskModelImpl(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& bc = config_.backbone;
  backbone = register_module("backbone", Backbone(bc));
  const auto dim = config_.embedding_dim();
  const auto hn = config_.effective_head_norm();
  if (config_.num_persons > 0)
    classifier = register_module("classifier", ClassifierHead(dim, config_.num_persons, hn, bc.norm_groups));
  if (config_.has(Task::Attributes))
    attributes = register_module("attributes", AttributeHead(dim, config_.attributes, hn, bc.norm_groups));
  if (config_.has(Task::Pose)) {
    const auto in = bc.topology == Topology::SplitOutput ? 0 : bc.final_channels;
    pose = register_module("pose", PoseHead(in, config_.num_joints, config_.temperature,
                                            static_cast<double>(bc.total_stride)));
  }
  if (config_.has(Task::Segmentation)) {
    SegHeadOptions o;
    const auto lat = backbone->lateral_channels();
    o.level_channels = {lat[0], lat[1], dim};
    o.num_classes = config_.num_parts;
    o.width = config_.seg_width;
    o.norm = bc.norm_kind;
    o.groups = bc.norm_groups;
    o.input_height = bc.input_height;
    o.input_width = bc.input_width;
    o.total_stride = bc.total_stride;
    segmentation = register_module("segmentation", SegHead(o));
  }
}

ModelOutput MultiTaskModelImpl::forward(const torch::Tensor& images, const std::set<Task>& tasks) {
  for (auto t : tasks)
    if (!config_.has(t)) throw TaskError("model has no " + std::string(to_string(t)) + " head");
  const auto bo = backbone->forward(images);
  const bool split = config_.backbone.topology == Topology::SplitOutput;
  torch::Tensor pose_slice, shared_slice;
  if (split) std::tie(pose_slice, shared_slice) = split_channels(bo.branches[0], config_.backbone.split_channels);
  auto features = [&](Task t) -> torch::Tensor {
    if (split) return t == Task::Pose ? pose_slice : shared_slice;
    return bo.branches[static_cast<std::size_t>(config_.branch(t))];
  };

  ModelOutput out;
  if (tasks.count(Task::ReId)) {
    out.embedding = embed_head(features(Task::ReId));
    if (classifier) out.person_logits = classifier->forward(out.embedding);
  }
  if (tasks.count(Task::Attributes)) {
    const bool shared = out.embedding.defined() && config_.branch(Task::Attributes) == config_.branch(Task::ReId);
    out.attribute_logits = attributes->forward(shared ? out.embedding : embed_head(features(Task::Attributes)));
  }
  if (tasks.count(Task::Pose)) out.pose = split ? pose->from_heatmaps(pose_slice) : pose->forward(features(Task::Pose));
  if (tasks.count(Task::Segmentation))
    out.seg_logits = segmentation->forward({bo.laterals[0], bo.laterals[1], features(Task::Segmentation)});
  return out;
}

std::int64_t MultiTaskModelImpl::estimated_activations_per_sample() const {
  const auto& bc = config_.backbone;
  std::int64_t h = bc.input_height, w = bc.input_width, total = 3 * h * w;
  for (auto c : bc.stage_channels) {
    h /= 2;
    w /= 2;
    total += 4 * c * h * w;
  }
  total += 4 * bc.final_channels * h * w * bc.branch_count();
  if (config_.has(Task::Segmentation)) {
    const auto qh = bc.input_height / 4, qw = bc.input_width / 4;
    total += 8 * config_.seg_width * qh * qw + 2 * config_.num_parts * bc.input_height * bc.input_width;
  }
  return total;
}

bool scope_matches(const std::string& scope, const std::string& name) {
  if (scope == "all") return true;
  if (scope == "heads")
    return scope_matches("classifier", name) || scope_matches("attributes", name) || scope_matches("pose", name) ||
           scope_matches("segmentation", name);
  return name == scope || (name.size() > scope.size() && name.compare(0, scope.size(), scope) == 0 &&
                           name[scope.size()] == '.');
}

void save_checkpoint(MultiTaskModel& model, const fs::path& path, const json& extra) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  torch::serialize::OutputArchive ar;
  for (auto& [name, t] : named_tensors(*model)) ar.write(name, t.detach().cpu());
  json meta = extra.is_object() ? extra : json::object();
  meta["format"] = kFormat;
  meta["model"] = model->config();
  ar.write(kMetaKey, string_tensor(meta.dump()));
  const auto tmp = path.string() + ".tmp";
  ar.save_to(tmp);
  fs::rename(tmp, path);
}

namespace {

torch::serialize::InputArchive open_archive(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("checkpoint not found: " + path.string());
  torch::serialize::InputArchive ar;
  try {
    ar.load_from(path.string());
  } catch (const c10::Error& e) {
    throw LoadError("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  return ar;
}

json archive_meta(torch::serialize::InputArchive& ar, const fs::path& path) {
  torch::Tensor t;
  if (!ar.try_read(kMetaKey, t)) throw LoadError("checkpoint " + path.string() + " has no metadata");
  auto meta = json::parse(tensor_string(t));
  if (meta.value("format", std::string()) != kFormat) throw LoadError("unsupported checkpoint format in " + path.string());
  return meta;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const fs::path& path) {
  auto ar = open_archive(path);
  CheckpointInfo info;
  info.meta = archive_meta(ar, path);
  info.config = info.meta.at("model").get<ModelConfig>();
  return info;
}

void load_checkpoint(MultiTaskModel& model, const fs::path& path) {
  auto ar = open_archive(path);
  const auto meta = archive_meta(ar, path);
  const auto stored = meta.at("model").get<ModelConfig>();
  if (!(stored == model->config())) {
    throw LoadError("checkpoint " + path.string() + " was built for a different model configuration: stored " +
                    json(stored).dump() + ", expected " + json(model->config()).dump());
  }
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : named_tensors(*model)) {
    torch::Tensor src;
    if (!ar.try_read(name, src)) throw LoadError("checkpoint lacks tensor '" + name + "'");
    if (src.sizes() != t.sizes())
      throw LoadError("shape mismatch for '" + name + "': checkpoint " + c10::str(src.sizes()) + ", model " +
                      c10::str(t.sizes()));
    t.copy_(src);
  }
}

MultiTaskModel load_model(const fs::path& path) {
  const auto info = read_checkpoint_info(path);
  MultiTaskModel model(info.config);
  load_checkpoint(model, path);
  return model;
}

LoadReport init_from_checkpoint(MultiTaskModel& model, const fs::path& path, const std::vector<std::string>& scopes) {
  if (scopes.empty()) throw LoadError("no parameter scopes requested");
  auto ar = open_archive(path);
  archive_meta(ar, path);
  const auto keys = ar.keys();
  const std::set<std::string> stored(keys.begin(), keys.end());
  auto tensors = named_tensors(*model);
  for (const auto& s : scopes) {
    bool in_model = false, in_ckpt = false;
    for (const auto& [name, t] : tensors) in_model = in_model || scope_matches(s, name);
    for (const auto& k : stored) in_ckpt = in_ckpt || (k != kMetaKey && scope_matches(s, k));
    if (!in_model) throw LoadError("scope '" + s + "' matches no parameter of the model");
    if (!in_ckpt) throw LoadError("scope '" + s + "' matches no tensor in " + path.string());
  }
  LoadReport rep;
  torch::NoGradGuard no_grad;
  for (auto& [name, t] : tensors) {
    bool wanted = false;
    for (const auto& s : scopes) wanted = wanted || scope_matches(s, name);
    if (!wanted) {
      rep.skipped.push_back(name);
      continue;
    }
    if (!stored.count(name)) throw LoadError("checkpoint lacks tensor '" + name + "'");
    torch::Tensor src;
    ar.read(name, src);
    if (src.sizes() != t.sizes())
      throw LoadError("shape mismatch for '" + name + "': checkpoint " + c10::str(src.sizes()) + ", model " +
                      c10::str(t.sizes()));
    t.copy_(src);
    rep.loaded.push_back(name);
  }
  return rep;
}

}  // namespace mtp
