#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "tsgf/distill.hpp"

namespace tsgf {

/// Student training protocol. Seeds is the list of independent repetitions
/// behind every mean/std; augmentation re-applies the gated partner
/// augmentation to the synthetic batch each epoch during student training.
struct EvalConfig {
  std::string arch = "mini_c3d";
  std::int64_t epochs = 200;
  double lr = 0.01;
  std::int64_t batch_size = 64;  // full batch whenever |S| fits
  bool augmentation = false;
  std::array<std::int64_t, 3> widths{8, 16, 32};
  std::int64_t gru_hidden = 16;
  std::vector<std::uint64_t> seeds = {1, 2, 3};

  void validate() const;  // >=1 seed, epochs >= 1, lr > 0
  std::string to_json_string() const;
};

struct EvalReport {
  std::vector<double> per_seed_accuracy;
  double mean = 0.0;
  double stddev = 0.0;  // population std over the seed runs
  std::string config_hash;
  std::string distilled_hash;
};

/// mean/std recomputed from the per-seed list; the report invariant.
void finalize_report(EvalReport& report);

/// Digest over the distilled set's tensors, labels and provenance fields.
std::string distilled_hash(const DistilledDataset& ds);

/// Trains one student per seed on the distilled samples (soft-label CE,
/// cosine schedule) and measures top-1 accuracy on the held-out test split.
/// By construction this never sees the real train split.
EvalReport train_student(const DistilledDataset& ds,
                         const std::vector<VideoSample>& test, const EvalConfig& cfg,
                         std::ostream* log = nullptr);

/// IPC real samples per class, picked uniformly, hard labels, no optimization.
DistilledDataset baseline_random_select(const std::vector<VideoSample>& train,
                                        std::int64_t ipc, std::uint64_t seed);

struct AblationRow {
  std::string name;
  EvalReport report;
};

/// Everything a suite needs; data and teacher are the shared fixed-seed
/// artifacts, the configs are the baseline each row perturbs.
struct AblationSetup {
  ToySpec spec;
  const ToyDataset* data = nullptr;
  Model* teacher = nullptr;
  TeacherTrainConfig teacher_cfg;
  DistillConfig distill;
  EvalConfig eval;
};

/// suite is one of: components, init, ipc, augmentation, frames,
/// static_dynamic. Unknown suites throw.
std::vector<AblationRow> run_ablation(const std::string& suite,
                                      const AblationSetup& setup,
                                      std::ostream* log = nullptr);

/// One EvalReport per architecture kind on the same distilled set.
std::vector<AblationRow> cross_architecture_eval(const DistilledDataset& ds,
                                                 const std::vector<VideoSample>& test,
                                                 const std::vector<std::string>& kinds,
                                                 const EvalConfig& cfg,
                                                 std::ostream* log = nullptr);

/// Uniform-stride temporal resampling of every video to `frames`.
std::vector<VideoSample> resample_frames(const std::vector<VideoSample>& samples,
                                         std::int64_t frames);

/// CSV rendering of ablation rows: name, mean, std, then per-seed columns.
std::string ablation_csv(const std::vector<AblationRow>& rows);

}  // namespace tsgf
