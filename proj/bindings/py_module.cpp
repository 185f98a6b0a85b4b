// Python surface: the saliency math on numpy arrays plus the config-driven
// pipeline stages. Heavy lifting stays in the C++ core; this layer only
// converts buffers and strings.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "tsgf/pipeline.hpp"
#include "tsgf/saliency.hpp"
#include "tsgf/tensor.hpp"

namespace py = pybind11;

namespace {

using CArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

tsgf::Tensor tensor_from(const CArray& arr) {
  tsgf::Shape shape(arr.ndim());
  for (py::ssize_t i = 0; i < arr.ndim(); ++i) shape[i] = arr.shape(i);
  std::vector<double> data(arr.data(), arr.data() + arr.size());
  return tsgf::Tensor::from_data(std::move(shape), std::move(data));
}

py::array_t<double> array_from(const tsgf::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> arr(shape);
  std::copy(t.data().begin(), t.data().end(), arr.mutable_data());
  return arr;
}

tsgf::WindowSpec make_window(int k, const std::string& kind) {
  tsgf::WindowSpec w;
  w.k = k;
  if (kind == "uniform")
    w.kind = tsgf::WindowSpec::Kind::Uniform;
  else if (kind == "triangular")
    w.kind = tsgf::WindowSpec::Kind::Triangular;
  else
    throw std::invalid_argument("window kind must be 'uniform' or 'triangular', got '" +
                                kind + "'");
  return w;
}

tsgf::EpsilonRule make_rule(double quantile, std::optional<double> absolute) {
  tsgf::EpsilonRule r;
  r.quantile = quantile;
  r.absolute = absolute;
  return r;
}

tsgf::PipelineConfig config_from(const std::string& json_text) {
  return tsgf::parse_pipeline_config(json_text, "<python>");
}

// Runs one pipeline stage and hands its log text back to the caller.
template <typename Fn>
std::string run_stage(const std::string& json_text, Fn&& fn) {
  tsgf::PipelineConfig cfg = config_from(json_text);
  std::ostringstream out;
  fn(cfg, out);
  return out.str();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Video dataset distillation with a temporal saliency filter";

  m.def(
      "frame_differences",
      [](const CArray& video) { return tsgf::frame_differences(tensor_from(video)); },
      py::arg("video"),
      "Per-frame mean absolute pixel difference against temporal neighbors; "
      "expects a [T,C,H,W] array.");

  m.def(
      "smooth_saliency",
      [](const std::vector<double>& d, int window_k, const std::string& window_kind) {
        return tsgf::smooth_saliency(d, make_window(window_k, window_kind));
      },
      py::arg("d"), py::arg("window_k") = 2, py::arg("window_kind") = "uniform",
      "Causal windowed smoothing of a difference profile.");

  m.def(
      "build_mask",
      [](const std::vector<double>& s, double quantile, std::optional<double> absolute) {
        return tsgf::build_mask(s, make_rule(quantile, absolute));
      },
      py::arg("s"), py::arg("quantile") = 0.8, py::arg("absolute") = py::none(),
      "Returns (mask, epsilon). Mask entries live in [0,1] and are 0 exactly "
      "where s_i >= epsilon.");

  m.def(
      "saliency_profile",
      [](const CArray& video, int window_k, const std::string& window_kind,
         double quantile, std::optional<double> absolute) {
        tsgf::SaliencyProfile p =
            tsgf::saliency_profile(tensor_from(video), make_window(window_k, window_kind),
                                   make_rule(quantile, absolute));
        py::dict out;
        out["d"] = p.d;
        out["s"] = p.s;
        out["epsilon"] = p.epsilon;
        out["mask"] = p.mask;
        return out;
      },
      py::arg("video"), py::arg("window_k") = 2, py::arg("window_kind") = "uniform",
      py::arg("quantile") = 0.8, py::arg("absolute") = py::none(),
      "Full per-video profile: raw differences, smoothed saliency, threshold, mask.");

  m.def(
      "gated_augment",
      [](const CArray& video, const std::vector<double>& s, double epsilon,
         const CArray& partner, std::uint64_t seed, double box_ratio_min,
         double box_ratio_max) {
        tsgf::AugmentSpec spec;
        spec.seed = seed;
        spec.box_ratio_min = box_ratio_min;
        spec.box_ratio_max = box_ratio_max;
        return array_from(tsgf::gated_augment(tensor_from(video), s, epsilon,
                                              tensor_from(partner), spec));
      },
      py::arg("video"), py::arg("s"), py::arg("epsilon"), py::arg("partner"),
      py::arg("seed") = 0, py::arg("box_ratio_min") = 0.3,
      py::arg("box_ratio_max") = 0.7,
      "Copies partner pixels into one fixed box on every frame with s_i <= epsilon; "
      "other frames come back bit-identical.");

  m.def(
      "default_config",
      [] {
        tsgf::PipelineConfig cfg;
        tsgf::finalize_seeds(cfg);
        return tsgf::pipeline_config_json(cfg);
      },
      "Built-in pipeline configuration as a JSON string.");

  m.def(
      "gen_data",
      [](const std::string& config_json) {
        return run_stage(config_json, tsgf::cmd_gen_data);
      },
      py::arg("config_json"), "Generate the toy dataset under the configured run dir.");

  m.def(
      "train_teacher",
      [](const std::string& config_json) {
        return run_stage(config_json, tsgf::cmd_train_teacher);
      },
      py::arg("config_json"), "Train and checkpoint the frozen teacher.");

  m.def(
      "distill",
      [](const std::string& config_json) {
        return run_stage(config_json, tsgf::cmd_distill);
      },
      py::arg("config_json"), "Distill a synthetic set with the saved teacher.");

  m.def(
      "evaluate",
      [](const std::string& config_json, bool cross_arch) {
        return run_stage(config_json, [&](const tsgf::PipelineConfig& cfg,
                                          std::ostream& out) {
          tsgf::cmd_evaluate(cfg, cross_arch, out);
        });
      },
      py::arg("config_json"), py::arg("cross_arch") = false,
      "Train students on the distilled set and report accuracy.");

  m.def(
      "ablate",
      [](const std::string& config_json, const std::string& suite) {
        return run_stage(config_json, [&](const tsgf::PipelineConfig& cfg,
                                          std::ostream& out) {
          tsgf::cmd_ablate(cfg, suite, out);
        });
      },
      py::arg("config_json"), py::arg("suite"), "Run one ablation suite.");

  m.def(
      "run_all",
      [](const std::string& config_json, bool cross_arch) {
        return run_stage(config_json, [&](const tsgf::PipelineConfig& cfg,
                                          std::ostream& out) {
          tsgf::cmd_run_all(cfg, cross_arch, out);
        });
      },
      py::arg("config_json"), py::arg("cross_arch") = false,
      "Full pipeline: gen-data, train-teacher, distill, evaluate.");
}
