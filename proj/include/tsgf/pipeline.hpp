#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "tsgf/dataset.hpp"
#include "tsgf/distill.hpp"
#include "tsgf/eval.hpp"

namespace tsgf {

/// One experiment: dataset recipe, stage configs, output directory, global
/// seed. Stage seeds are always derived from the global seed, never set
/// directly; finalize_seeds performs the derivation.
struct PipelineConfig {
  ToySpec dataset = ToySpec::defaults();
  TeacherTrainConfig teacher;
  DistillConfig distill;
  EvalConfig eval;
  std::int64_t eval_seed_count = 3;
  std::filesystem::path out_dir = "runs/default";
  std::uint64_t seed = 0;
};

/// Derives every stage seed from cfg.seed. Idempotent; call after any
/// override of the global seed.
void finalize_seeds(PipelineConfig& cfg);

/// Strict-enough JSON parsing: unknown stages are ignored, malformed values
/// throw FormatError mentioning `origin`.
PipelineConfig parse_pipeline_config(const std::string& json_text,
                                     const std::string& origin);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);
std::string pipeline_config_json(const PipelineConfig& cfg);

/// Artifact layout inside an output directory.
struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path data_dir() const { return root / "data"; }
  std::filesystem::path teacher_ckpt() const { return root / "teacher.ckpt"; }
  std::filesystem::path teacher_log() const { return root / "teacher_log.csv"; }
  std::filesystem::path teacher_report() const { return root / "teacher_report.json"; }
  std::filesystem::path distilled_dir() const { return root / "distilled"; }
  std::filesystem::path distill_log() const { return root / "distill_log.csv"; }
  std::filesystem::path eval_report_json() const { return root / "eval_report.json"; }
  std::filesystem::path eval_report_csv() const { return root / "eval_report.csv"; }
  std::filesystem::path cross_arch_csv() const { return root / "cross_arch.csv"; }
  std::filesystem::path ablation_csv_path(const std::string& suite) const {
    return root / ("ablation_" + suite + ".csv");
  }
  std::filesystem::path summary() const { return root / "run_summary.json"; }
};

/// Real-split persistence: per split a labels.csv ("id,class") plus one
/// tensor file per video, and a top-level manifest echoing the spec.
void save_toy_dataset(const ToyDataset& data, const ToySpec& spec,
                      const std::filesystem::path& dir);
ToyDataset load_toy_dataset(const std::filesystem::path& dir);

/// Stage commands. Each consumes upstream artifacts from cfg.out_dir and
/// writes its own; missing upstream artifacts throw with a "run <stage>
/// first" message. `out` receives human-readable progress.
void cmd_gen_data(const PipelineConfig& cfg, std::ostream& out);
void cmd_train_teacher(const PipelineConfig& cfg, std::ostream& out);
void cmd_distill(const PipelineConfig& cfg, std::ostream& out);
void cmd_evaluate(const PipelineConfig& cfg, bool cross_arch, std::ostream& out);
void cmd_ablate(const PipelineConfig& cfg, const std::string& suite, std::ostream& out);
void cmd_run_all(const PipelineConfig& cfg, bool cross_arch, std::ostream& out);

/// Prints "frame,d,s,mask" rows for the tensor at `video_path`, then the
/// resolved epsilon. The file must hold a rank-4 [T,C,H,W] tensor.
void cmd_inspect_saliency(const std::filesystem::path& video_path,
                          const WindowSpec& window, const EpsilonRule& rule,
                          std::ostream& out);

}  // namespace tsgf
