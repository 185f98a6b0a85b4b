// tsgf: saliency-guided video dataset distillation, end to end from one binary.
//
// Exit codes: 0 success, 1 user error (bad flags, bad config, missing
// upstream artifacts, diverged runs), 2 internal invariant violation.

#include <cstdint>
#include <iostream>
#include <optional>
#include <stdexcept>
#include <string>

#include <CLI11.hpp>

#include "tsgf/pipeline.hpp"
#include "tsgf/tensor.hpp"
#include "tsgf/tensor_io.hpp"

namespace {

// Everything the flag surface can override. Optionals stay empty when the
// flag was not given, so config-file values survive untouched.
struct Overrides {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool no_tsgf_o = false;  // disable masked updates
  bool no_tsgf_a = false;  // disable gated augmentation
  std::string init;        // "real" | "noise"
  std::optional<std::int64_t> ipc;
  std::optional<double> epsilon_q;
  std::optional<int> window_k;
};

// Precedence: flag > config file > built-in default. Seeds are re-derived
// after the global seed is settled so every stage follows an override.
tsgf::PipelineConfig resolve(const Overrides& ov) {
  tsgf::PipelineConfig cfg;
  if (!ov.config_path.empty()) cfg = tsgf::load_pipeline_config(ov.config_path);
  if (!ov.out_dir.empty()) cfg.out_dir = ov.out_dir;
  if (ov.seed) cfg.seed = *ov.seed;
  if (ov.no_tsgf_o) cfg.distill.mask_updates = false;
  if (ov.no_tsgf_a) cfg.distill.augment = false;
  if (!ov.init.empty()) {
    if (ov.init == "real")
      cfg.distill.init = tsgf::InitMethod::Real;
    else if (ov.init == "noise")
      cfg.distill.init = tsgf::InitMethod::Noise;
    else
      throw std::invalid_argument("--init must be 'real' or 'noise', got '" +
                                  ov.init + "'");
  }
  if (ov.ipc) cfg.distill.ipc = *ov.ipc;
  if (ov.epsilon_q) cfg.distill.epsilon.quantile = *ov.epsilon_q;
  if (ov.window_k) cfg.distill.window.k = *ov.window_k;
  tsgf::finalize_seeds(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Video dataset distillation with a temporal saliency filter"};
  app.require_subcommand(1);

  Overrides ov;
  app.add_option("--config", ov.config_path,
                 "JSON config file; missing keys keep their defaults");
  app.add_option("--out", ov.out_dir, "run directory for artifacts");
  app.add_option("--seed", ov.seed, "global seed; stage seeds derive from it");
  app.add_flag("--no-tsgf-o", ov.no_tsgf_o,
               "disable saliency-masked pixel updates");
  app.add_flag("--no-tsgf-a", ov.no_tsgf_a, "disable gated augmentation");
  app.add_option("--init", ov.init, "synthetic init: real|noise");
  app.add_option("--ipc", ov.ipc, "distilled videos per class");
  app.add_option("--epsilon-q", ov.epsilon_q,
                 "saliency threshold quantile in [0,1]");
  app.add_option("--window-k", ov.window_k, "smoothing window looks back k frames");

  auto* gen = app.add_subcommand("gen-data", "generate the toy video dataset");
  auto* teach = app.add_subcommand("train-teacher", "train the frozen teacher");
  auto* dist = app.add_subcommand("distill", "distill a synthetic video set");

  auto* eval = app.add_subcommand("evaluate", "train students on the distilled set");
  bool eval_cross = false;
  eval->add_flag("--cross-arch", eval_cross,
                 "also evaluate across all student architectures");

  auto* abl = app.add_subcommand("ablate", "run an ablation suite");
  std::string suite;
  abl->add_option("--suite", suite,
                  "components|init|ipc|augmentation|frames|static_dynamic")
      ->required();

  auto* insp = app.add_subcommand("inspect-saliency",
                                  "print per-frame saliency for one video tensor");
  std::string video_path;
  std::optional<double> epsilon_abs;
  insp->add_option("video", video_path, "rank-4 [T,C,H,W] tensor file")
      ->required();
  insp->add_option("--epsilon-abs", epsilon_abs,
                   "absolute saliency threshold, overrides the quantile");

  auto* runall = app.add_subcommand("run-all",
                                    "gen-data, train-teacher, distill, evaluate");
  bool runall_cross = false;
  runall->add_flag("--cross-arch", runall_cross,
                   "include the cross-architecture table");

  for (auto* sub : app.get_subcommands({}))
    sub->fallthrough();  // global flags may follow the subcommand name

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;  // help is a success, any parse failure is a user error
  }

  try {
    tsgf::PipelineConfig cfg = resolve(ov);
    if (app.got_subcommand(gen)) {
      tsgf::cmd_gen_data(cfg, std::cout);
    } else if (app.got_subcommand(teach)) {
      tsgf::cmd_train_teacher(cfg, std::cout);
    } else if (app.got_subcommand(dist)) {
      tsgf::cmd_distill(cfg, std::cout);
    } else if (app.got_subcommand(eval)) {
      tsgf::cmd_evaluate(cfg, eval_cross, std::cout);
    } else if (app.got_subcommand(abl)) {
      tsgf::cmd_ablate(cfg, suite, std::cout);
    } else if (app.got_subcommand(insp)) {
      tsgf::EpsilonRule rule = cfg.distill.epsilon;
      if (epsilon_abs) rule.absolute = *epsilon_abs;
      tsgf::cmd_inspect_saliency(video_path, cfg.distill.window, rule, std::cout);
    } else if (app.got_subcommand(runall)) {
      tsgf::cmd_run_all(cfg, runall_cross, std::cout);
    }
    return 0;
  } catch (const tsgf::FormatError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const tsgf::ShapeError& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  } catch (const std::runtime_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
}
