#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "mtperson/data.hpp"
#include "mtperson/errors.hpp"
#include "mtperson/losses.hpp"
#include "mtperson/metrics.hpp"
#include "mtperson/trainer.hpp"

namespace py = pybind11;
using namespace mtp;

namespace {

// Reports and configs cross the boundary as JSON text; the Python side parses them.
std::string report_json(const metrics::MetricReport& r) { return metrics::to_json(r).dump(); }

std::set<Task> tasks_of(const std::vector<std::string>& names) {
  std::set<Task> out;
  for (const auto& n : names) out.insert(task_from_string(n));
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-task person model: synthetic data, training, evaluation and metrics";

  py::register_exception<Error>(m, "Error");

  m.def(
      "generate_synthetic",
      [](const std::filesystem::path& out, int identities, int images_per_id, int height, int width,
         std::uint64_t seed, bool query_gallery) {
        data::SyntheticOptions o;
        o.num_ids = identities;
        o.samples_per_id = images_per_id;
        o.height = height;
        o.width = width;
        o.seed = seed;
        o.query_gallery = query_gallery;
        return data::generate_synthetic(o, out).size();
      },
      py::arg("out"), py::arg("identities") = 32, py::arg("images_per_id") = 8, py::arg("height") = 128,
      py::arg("width") = 64, py::arg("seed") = 0, py::arg("query_gallery") = false,
      "Renders a synthetic dataset into `out`; returns the record count.");

  m.def(
      "manifest_json", [](const std::filesystem::path& p) { return data::to_json(data::load_manifest(p)).dump(); },
      py::arg("path"));

  m.def(
      "train",
      [](const std::string& config_json, const std::filesystem::path& base_dir, const std::filesystem::path& run_dir) {
        const auto cfg = train::config_from_json(nlohmann::json::parse(config_json), base_dir);
        py::gil_scoped_release nogil;
        const auto res = train::train(cfg, run_dir);
        return res.report ? report_json(*res.report) : std::string("{}");
      },
      py::arg("config_json"), py::arg("base_dir"), py::arg("run_dir"),
      "Runs training into `run_dir`; returns the final report as JSON text.");

  m.def(
      "evaluate",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& manifest,
         const std::vector<std::string>& tasks) {
        py::gil_scoped_release nogil;
        return report_json(train::evaluate(checkpoint, manifest, tasks_of(tasks)));
      },
      py::arg("checkpoint"), py::arg("manifest"), py::arg("tasks"));

  m.def(
      "reid_eval",
      [](const std::vector<double>& dist, const std::vector<std::int64_t>& qid, const std::vector<std::int64_t>& qcam,
         const std::vector<std::int64_t>& gid, const std::vector<std::int64_t>& gcam) {
        const auto r = metrics::reid_eval_distances(dist, qid, qcam, gid, gcam);
        return py::make_tuple(r.mAP, r.cmc);
      },
      py::arg("distances"), py::arg("query_ids"), py::arg("query_cams"), py::arg("gallery_ids"),
      py::arg("gallery_cams"), "Row-major query x gallery distances; returns (mAP, cmc).");

  m.def(
      "pckh",
      [](const std::vector<std::vector<std::array<double, 3>>>& pred,
         const std::vector<std::vector<std::array<double, 3>>>& gt, const std::vector<double>& head_sizes,
         double alpha) {
        auto convert = [&](const auto& src) {
          std::vector<JointSet> out;
          for (std::size_t i = 0; i < src.size(); ++i) {
            JointSet js;
            js.head_size = head_sizes.at(i);
            for (const auto& j : src[i]) js.joints.push_back({j[0], j[1], j[2] > 0});
            out.push_back(js);
          }
          return out;
        };
        const auto p = convert(pred), g = convert(gt);
        return metrics::pckh(p, g, alpha).avg;
      },
      py::arg("pred"), py::arg("gt"), py::arg("head_sizes"), py::arg("alpha") = 0.5,
      "Joints as [x, y, visible] triples per person.");

  m.def(
      "triplet_loss",
      [](const std::vector<std::vector<double>>& embeddings, const std::vector<std::int64_t>& ids,
         std::optional<double> margin) {
        const auto n = static_cast<std::int64_t>(embeddings.size());
        const auto d = n ? static_cast<std::int64_t>(embeddings[0].size()) : 0;
        auto t = torch::empty({n, d}, torch::kDouble);
        auto acc = t.accessor<double, 2>();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t k = 0; k < d; ++k) acc[i][k] = embeddings[i].at(k);
        const auto mode = margin ? losses::MarginMode::hinge(*margin) : losses::MarginMode::softplus();
        return losses::batch_hard_triplet(t, ids, mode).item<double>();
      },
      py::arg("embeddings"), py::arg("ids"), py::arg("margin") = py::none(),
      "Batch-hard triplet loss; soft-plus margin unless `margin` is given.");
}
