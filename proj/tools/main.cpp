#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mtperson/convert.hpp"
#include "mtperson/errors.hpp"
#include "mtperson/trainer.hpp"
#include "plot.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace mtp;

namespace {

fs::path runs_root() {
  if (const char* e = std::getenv("MTPERSON_RUNS_DIR"); e && *e) return e;
  return "runs";
}

fs::path default_out(const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y%m%d-%H%M%S", std::localtime(&now));
  auto p = runs_root() / (command + "-" + buf);
  for (int n = 2; fs::exists(p); ++n) p = runs_root() / (command + "-" + buf + "-" + std::to_string(n));
  return p;
}

void write_json(const fs::path& p, const json& j) {
  fs::create_directories(p.parent_path().empty() ? fs::path(".") : p.parent_path());
  std::ofstream(p) << j.dump(2) << '\n';
}

std::set<Task> parse_tasks(const std::string& csv) {
  std::set<Task> out;
  std::stringstream ss(csv);
  for (std::string t; std::getline(ss, t, ',');)
    if (!t.empty()) out.insert(task_from_string(t));
  return out;
}

std::vector<std::string> split_csv(const std::string& csv) {
  std::vector<std::string> out;
  std::stringstream ss(csv);
  for (std::string t; std::getline(ss, t, ',');)
    if (!t.empty()) out.push_back(t);
  return out;
}

std::string task_list(const std::set<Task>& ts) {
  std::string s;
  for (auto t : ts) s += (s.empty() ? "" : ",") + std::string(to_string(t));
  return s;
}

// ------------------------------------------------------------------ synth

struct SynthArgs {
  fs::path out;
  int identities = 32;
  int per_id = 8;
  std::string size = "128x64";
  std::uint64_t seed = 0;
  bool query_gallery = false;
  std::int64_t id_offset = 0;
  std::string name = "synthetic";
  bool force = false;
};

int run_synth(const SynthArgs& a) {
  if (a.identities < 2) throw ConfigError("identities", "need at least 2 identities for re-identification");
  if (a.per_id < 2) throw ConfigError("images-per-id", "need at least 2 images per identity");
  int h = 0, w = 0;
  if (std::sscanf(a.size.c_str(), "%dx%d", &h, &w) != 2 || h <= 0 || w <= 0)
    throw ConfigError("size", "expected HxW, e.g. 128x64");
  if (fs::exists(a.out) && !fs::is_empty(a.out)) {
    if (!a.force) throw ConfigError("out", a.out.string() + " is not empty; pass --force to overwrite");
    fs::remove_all(a.out);
  }
  data::SyntheticOptions o;
  o.num_ids = a.identities;
  o.samples_per_id = a.per_id;
  o.height = h;
  o.width = w;
  o.seed = a.seed;
  o.query_gallery = a.query_gallery;
  o.id_offset = a.id_offset;
  o.name = a.name;
  const auto m = data::generate_synthetic(o, a.out);
  write_json(a.out / "resolved_config.json", {{"command", "synth"},
                                               {"identities", a.identities},
                                               {"images_per_id", a.per_id},
                                               {"size", a.size},
                                               {"seed", a.seed},
                                               {"query_gallery", a.query_gallery},
                                               {"id_offset", a.id_offset},
                                               {"name", a.name}});
  std::cout << (a.out / "manifest.json").string() << '\n';
  std::cerr << m.size() << " records\n";
  return 0;
}

// ------------------------------------------------------------------ convert

struct ConvertArgs {
  std::string format;
  fs::path source, out;
  std::string attributes;
  bool merge_five = false;
};

int run_convert(const ConvertArgs& a) {
  std::optional<fs::path> attrs;
  if (!a.attributes.empty()) attrs = a.attributes;
  const auto m = data::convert_dataset(a.format, a.source, a.out, attrs, a.merge_five);
  write_json(a.out / "resolved_config.json", {{"command", "convert"},
                                               {"format", a.format},
                                               {"source", fs::absolute(a.source).string()},
                                               {"attributes", a.attributes},
                                               {"merge_five", a.merge_five}});
  std::cout << (a.out / "manifest.json").string() << '\n';
  std::cerr << m.size() << " records\n";
  return 0;
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  fs::path config, out, init, resume;
  std::vector<std::string> scopes;
  long long limit_identities = -1;
  long long steps = -1;
  long long seed = -1;
  bool quiet = false;
};

int run_train(const TrainArgs& a) {
  fs::path out = a.out;
  fs::path config_path = a.config;
  if (!a.resume.empty()) {
    // <run>/checkpoints/<name>.pt
    const auto run = fs::absolute(a.resume).parent_path().parent_path();
    if (out.empty()) out = run;
    if (config_path.empty()) config_path = run / "resolved_config.json";
  }
  if (config_path.empty()) throw ConfigError("config", "--config is required");
  auto cfg = train::load_config(config_path);
  if (a.limit_identities >= 0) {
    bool any = false;
    for (auto& d : cfg.datasets)
      if (d.losses.count(losses::LossKind::Triplet) || d.losses.count(losses::LossKind::PersonCE)) {
        d.limit_identities = static_cast<std::size_t>(a.limit_identities);
        any = true;
      }
    if (!any) throw ConfigError("limit-identities", "no dataset trains re-identification");
  }
  if (!a.init.empty()) cfg.init = train::InitConfig{fs::absolute(a.init), a.scopes.empty() ? std::vector<std::string>{"all"} : a.scopes};
  else if (!a.scopes.empty()) throw ConfigError("scopes", "--scopes needs --init");
  if (a.steps >= 0) cfg.steps = a.steps;
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  if (a.quiet) cfg.log_every = 0;
  else if (cfg.log_every == 0) cfg.log_every = 50;
  if (out.empty()) out = default_out("train");

  train::TrainOptions opt;
  if (!a.resume.empty()) opt.resume = fs::absolute(a.resume);
  const auto res = train::train(cfg, out, opt);
  if (res.report)
    for (const auto& [k, v] : res.report->flatten())
      if (k.find('.', k.find('.') + 1) == std::string::npos || k.rfind("reid.", 0) == 0) std::cerr << k << " = " << v << '\n';
  std::cout << out.string() << '\n';
  return 0;
}

// ------------------------------------------------------------------ evaluate

struct EvalArgs {
  fs::path checkpoint, manifest, out;
  std::string tasks, split;
};

int run_evaluate(const EvalArgs& a) {
  const auto info = read_checkpoint_info(a.checkpoint);
  const auto manifest = data::load_manifest(a.manifest);
  std::set<Task> tasks = a.tasks.empty() ? std::set<Task>{} : parse_tasks(a.tasks);
  if (tasks.empty())
    for (auto t : info.config.heads)
      if (manifest.tasks.has(t)) tasks.insert(t);
  std::optional<data::Split> split;
  if (!a.split.empty()) split = data::split_from_string(a.split);
  auto model = load_model(a.checkpoint);
  const auto rep = train::evaluate(model, manifest, tasks, split);
  const auto out = a.out.empty() ? default_out("evaluate") : a.out;
  fs::create_directories(out);
  write_json(out / "resolved_config.json", {{"command", "evaluate"},
                                            {"checkpoint", fs::absolute(a.checkpoint).string()},
                                            {"manifest", fs::absolute(a.manifest).string()},
                                            {"tasks", task_list(tasks)},
                                            {"split", a.split}});
  write_json(out / "metrics.json", metrics::to_json(rep));
  const auto [head, row] = metrics::to_csv(rep);
  std::ofstream(out / "metrics.csv") << head << '\n' << row << '\n';
  std::cout << metrics::to_json(rep).dump(2) << '\n';
  return 0;
}

// ------------------------------------------------------------------ pseudo-label

struct PseudoArgs {
  fs::path manifest, pose, seg, out;
  bool merge_five = false;
};

int run_pseudo(const PseudoArgs& a) {
  const auto m = data::load_manifest(a.manifest);
  std::optional<fs::path> pose, seg;
  if (!a.pose.empty()) pose = a.pose;
  if (!a.seg.empty()) seg = a.seg;
  std::optional<data::ClassMapping> mapping;
  if (a.merge_five) mapping = data::ClassMapping::lip_to_five();
  const auto out = data::pseudo_label(m, pose, seg, a.out, mapping);
  write_json(a.out / "resolved_config.json", {{"command", "pseudo-label"},
                                               {"manifest", fs::absolute(a.manifest).string()},
                                               {"pose_checkpoint", pose ? fs::absolute(*pose).string() : ""},
                                               {"seg_checkpoint", seg ? fs::absolute(*seg).string() : ""},
                                               {"merge_five", a.merge_five}});
  std::cout << (a.out / "manifest.json").string() << '\n';
  std::cerr << out.size() << " records annotated\n";
  return 0;
}

// ------------------------------------------------------------------ visualize

struct VisArgs {
  fs::path checkpoint, out;
  std::vector<std::string> images;
  std::string tasks;
  int scale = 3;
};

const cv::Scalar kPartColors[] = {{0, 0, 0},       {0, 0, 220},     {0, 200, 0},     {220, 0, 0},    {0, 200, 220},
                                  {220, 0, 220},   {220, 220, 0},   {0, 128, 255},   {255, 128, 0},  {128, 0, 255},
                                  {0, 255, 128},   {128, 255, 0},   {255, 0, 128},   {64, 64, 192},  {192, 64, 64},
                                  {64, 192, 64},   {192, 192, 64},  {64, 192, 192},  {192, 64, 192}, {128, 128, 128}};

const std::pair<int, int> kSkeleton16[] = {{0, 1},  {1, 2},  {2, 6},   {3, 6},   {3, 4},   {4, 5},   {6, 7}, {7, 8},
                                           {8, 9},  {10, 11}, {11, 12}, {12, 7}, {13, 7}, {13, 14}, {14, 15}};

int run_visualize(const VisArgs& a) {
  const auto info = read_checkpoint_info(a.checkpoint);
  const auto& mc = info.config;
  std::set<Task> want = a.tasks.empty() ? std::set<Task>{Task::Pose, Task::Segmentation, Task::Attributes}
                                        : parse_tasks(a.tasks);
  std::set<Task> tasks;
  for (auto t : want) {
    if (mc.has(t)) {
      tasks.insert(t);
    } else if (!a.tasks.empty()) {
      throw TaskError("checkpoint has no " + std::string(to_string(t)) + " head");
    } else if (t != Task::Attributes) {
      std::cerr << "warning: checkpoint has no " << to_string(t) << " head; skipping that overlay\n";
    }
  }
  tasks.erase(Task::ReId);
  if (tasks.empty()) throw TaskError("checkpoint has none of the pose, segmentation or attribute heads");

  // Inputs: image files or manifests.
  data::DatasetManifest m;
  m.name = "visualize";
  m.root = fs::current_path();
  for (const auto& p : a.images) {
    if (fs::path(p).extension() == ".json") {
      const auto sub = data::load_manifest(p);
      for (const auto& r : sub.records) {
        data::SampleRecord rr;
        rr.image = fs::absolute(sub.resolve(r.image)).string();
        m.records.push_back(rr);
      }
    } else {
      if (!fs::exists(p)) throw LoadError("image " + p + " does not exist");
      data::SampleRecord rr;
      rr.image = fs::absolute(p).string();
      m.records.push_back(rr);
    }
  }
  if (m.records.empty()) throw ConfigError("images", "no input images");
  std::vector<std::size_t> idx(m.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;

  auto model = load_model(a.checkpoint);
  const auto pred = train::predict(model, m, idx, tasks);
  const int h = static_cast<int>(mc.backbone.input_height), w = static_cast<int>(mc.backbone.input_width);
  const int s = std::max(1, a.scale);
  fs::create_directories(a.out);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    cv::Mat img = cv::imread(m.records[i].image, cv::IMREAD_COLOR);
    if (img.empty()) throw LoadError("cannot read " + m.records[i].image);
    cv::resize(img, img, cv::Size(w * s, h * s), 0, 0, cv::INTER_LINEAR);
    if (tasks.count(Task::Segmentation)) {
      cv::Mat mk = data::from_mask(pred.masks[i]);
      cv::resize(mk, mk, img.size(), 0, 0, cv::INTER_NEAREST);
      cv::Mat color(img.size(), CV_8UC3, cv::Scalar(0, 0, 0));
      for (int r = 0; r < mk.rows; ++r)
        for (int c = 0; c < mk.cols; ++c) {
          const auto l = mk.at<std::uint8_t>(r, c);
          const auto& k = kPartColors[l % std::size(kPartColors)];
          color.at<cv::Vec3b>(r, c) = cv::Vec3b(k[0], k[1], k[2]);
        }
      cv::Mat blended;
      cv::addWeighted(img, 0.55, color, 0.45, 0.0, blended);
      blended.copyTo(img, mk != 0);
    }
    if (tasks.count(Task::Pose)) {
      const auto& js = pred.joints[i].joints;
      auto pt = [&](int j) { return cv::Point(cvRound(js[j].x * s), cvRound(js[j].y * s)); };
      if (js.size() == 16)
        for (auto [p, q] : kSkeleton16) cv::line(img, pt(p), pt(q), cv::Scalar(255, 255, 255), 2, cv::LINE_AA);
      for (std::size_t j = 0; j < js.size(); ++j)
        cv::circle(img, pt(static_cast<int>(j)), 3, cv::Scalar(0, 255, 255), cv::FILLED, cv::LINE_AA);
    }
    if (tasks.count(Task::Attributes)) {
      int y = 14;
      for (std::size_t k = 0; k < mc.attributes.size(); ++k) {
        const auto& at = mc.attributes.attributes[k];
        const int v = pred.attributes[i][k];
        std::string text = at.name + "=" + std::to_string(v);
        if (at.name == "gender") {
          text = v == 0 ? "male" : "female";
          cv::rectangle(img, cv::Rect(0, 0, img.cols, img.rows), v == 0 ? cv::Scalar(255, 128, 0) : cv::Scalar(128, 0, 255), 3);
        }
        cv::putText(img, text, cv::Point(4, y), cv::FONT_HERSHEY_SIMPLEX, 0.35, cv::Scalar(0, 0, 0), 2, cv::LINE_AA);
        cv::putText(img, text, cv::Point(4, y), cv::FONT_HERSHEY_SIMPLEX, 0.35, cv::Scalar(255, 255, 255), 1, cv::LINE_AA);
        y += 12;
      }
    }
    char name[16];
    std::snprintf(name, sizeof name, "%04zu_", i);
    cv::imwrite((a.out / (name + fs::path(m.records[i].image).stem().string() + ".png")).string(), img);
  }
  write_json(a.out / "resolved_config.json", {{"command", "visualize"},
                                               {"checkpoint", fs::absolute(a.checkpoint).string()},
                                               {"images", a.images},
                                               {"tasks", task_list(tasks)},
                                               {"scale", s}});
  std::cout << a.out.string() << '\n';
  return 0;
}

// ------------------------------------------------------------------ plot-curve

struct PlotArgs {
  std::vector<std::string> runs;
  std::string metric = "reid.cmc@1";
  fs::path out;
};

double run_x(const fs::path& run) {
  std::ifstream in(run / "resolved_config.json");
  if (!in) throw LoadError("run " + run.string() + " has no resolved_config.json");
  json j;
  in >> j;
  for (const auto& d : j.at("datasets")) {
    const auto ls = d.value("losses", std::vector<std::string>{});
    const bool reid = std::find(ls.begin(), ls.end(), "triplet") != ls.end() ||
                      std::find(ls.begin(), ls.end(), "person_ce") != ls.end();
    if (!reid) continue;
    if (!d.at("limit_identities").is_null()) return d.at("limit_identities").get<double>();
    return static_cast<double>(data::load_manifest(d.at("manifest").get<std::string>(), false)
                                   .identities(data::Split::Train)
                                   .size());
  }
  throw LoadError("run " + run.string() + " trains no re-identification dataset");
}

int run_plot(const PlotArgs& a) {
  std::map<std::string, std::map<double, std::pair<double, int>>> acc;
  std::vector<std::string> order;
  for (const auto& entry : a.runs) {
    std::string label = "runs", dir = entry;
    if (auto eq = entry.find('='); eq != std::string::npos) {
      label = entry.substr(0, eq);
      dir = entry.substr(eq + 1);
    }
    if (!acc.count(label)) order.push_back(label);
    auto& series = acc[label];
    for (const auto& run : split_csv(dir)) {
      std::ifstream in(fs::path(run) / "metrics.json");
      if (!in) throw LoadError("run " + run + " has no metrics.json");
      json j;
      in >> j;
      const auto v = metrics::report_from_json(j).get(a.metric);
      if (!v) throw ConfigError("metric", "metric " + a.metric + " is absent from run " + run);
      auto& [sum, n] = series[run_x(run)];
      sum += *v;
      ++n;
    }
  }
  std::vector<tools::Series> series;
  for (const auto& label : order) {
    tools::Series s{label, {}};
    for (const auto& [x, sn] : acc[label]) s.points.push_back({x, sn.first / sn.second, sn.second});
    series.push_back(std::move(s));
  }
  fs::create_directories(a.out);
  std::ofstream(a.out / "curve.svg") << tools::render_svg(series, "training identities", a.metric);
  std::ofstream(a.out / "curve.csv") << tools::render_csv(series);
  write_json(a.out / "resolved_config.json", {{"command", "plot-curve"}, {"runs", a.runs}, {"metric", a.metric}});
  std::cout << (a.out / "curve.svg").string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task person analysis: synthesis, training, evaluation and plotting"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth", "Render a synthetic multi-task dataset");
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--identities", sa.identities, "Number of identities");
  synth->add_option("--images-per-id", sa.per_id, "Images per identity");
  synth->add_option("--size", sa.size, "Image size HxW");
  synth->add_option("--seed", sa.seed, "Random seed");
  synth->add_flag("--query-gallery", sa.query_gallery, "First image of each identity is a query, the rest gallery");
  synth->add_option("--id-offset", sa.id_offset, "Added to every person id");
  synth->add_option("--name", sa.name, "Dataset name");
  synth->add_flag("--force", sa.force, "Overwrite a non-empty output directory");

  ConvertArgs ca;
  auto* convert = app.add_subcommand("convert", "Write a manifest for a dataset in its original layout");
  convert->add_option("--format", ca.format, "market, mpii or lip")->required()->check(CLI::IsMember({"market", "mpii", "lip"}));
  convert->add_option("--source", ca.source, "Dataset root")->required();
  convert->add_option("--out", ca.out, "Output directory")->required();
  convert->add_option("--attributes", ca.attributes, "Market attribute CSV (person_id,<names>)");
  convert->add_flag("--merge-five", ca.merge_five, "LIP: merge into background/head/upper/lower/shoes");

  TrainArgs ta;
  auto* trn = app.add_subcommand("train", "Train a model from a JSON config");
  trn->add_option("--config", ta.config, "Training config (JSON)");
  trn->add_option("--out", ta.out, "Run directory");
  trn->add_option("--limit-identities", ta.limit_identities, "Train on this many identities of each ReID dataset");
  trn->add_option("--init", ta.init, "Initialize from a checkpoint");
  trn->add_option("--scopes", ta.scopes, "Parameter scopes loaded by --init")->delimiter(',');
  trn->add_option("--resume", ta.resume, "Continue a run from one of its checkpoints");
  trn->add_option("--steps", ta.steps, "Override the step count");
  trn->add_option("--seed", ta.seed, "Override the seed");
  trn->add_flag("--quiet", ta.quiet, "No progress output");

  EvalArgs ea;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on a manifest");
  ev->add_option("--checkpoint", ea.checkpoint)->required();
  ev->add_option("--manifest", ea.manifest)->required();
  ev->add_option("--tasks", ea.tasks, "Comma-separated subset of reid,attributes,pose,segmentation");
  ev->add_option("--split", ea.split, "train, query, gallery or val (default: automatic)");
  ev->add_option("--out", ea.out, "Output directory");

  PseudoArgs pa;
  auto* ps = app.add_subcommand("pseudo-label", "Annotate a dataset with pose and segmentation predictions");
  ps->add_option("--manifest", pa.manifest)->required();
  ps->add_option("--pose-checkpoint", pa.pose);
  ps->add_option("--seg-checkpoint", pa.seg);
  ps->add_option("--out", pa.out)->required();
  ps->add_flag("--merge-five", pa.merge_five, "Relabel predicted LIP classes into five merged classes");

  VisArgs va;
  auto* vis = app.add_subcommand("visualize", "Render prediction overlays");
  vis->add_option("--checkpoint", va.checkpoint)->required();
  vis->add_option("--images", va.images, "Image files or manifests")->required();
  vis->add_option("--out", va.out)->required();
  vis->add_option("--tasks", va.tasks, "Subset of pose,segmentation,attributes");
  vis->add_option("--scale", va.scale, "Upscaling factor");

  PlotArgs pla;
  auto* plot = app.add_subcommand("plot-curve", "Plot a metric against the number of training identities");
  plot->add_option("--runs", pla.runs, "[label=]run_dir[,run_dir...]; repeated labels form one series")->required();
  plot->add_option("--metric", pla.metric, "Flattened metric name, e.g. reid.cmc@1");
  plot->add_option("--out", pla.out, "Output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return run_synth(sa);
    if (*convert) return run_convert(ca);
    if (*trn) return run_train(ta);
    if (*ev) return run_evaluate(ea);
    if (*ps) return run_pseudo(pa);
    if (*vis) return run_visualize(va);
    if (*plot) {
      if (pla.out.empty()) pla.out = default_out("plot");
      return run_plot(pla);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
