#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "tsgf/dataset.hpp"
#include "tsgf/model.hpp"
#include "tsgf/saliency.hpp"

namespace tsgf {

/// Knobs of the uni-level distillation loop. The two TSGF switches exist for
/// ablations: mask_updates gates the optimization-side filter, augment gates
/// the post-loop partner augmentation.
struct DistillConfig {
  std::int64_t iterations = 1000;  // K
  double lr = 0.25;                // eta
  double r_bn = 0.005;
  double ce_weight = 1.0;  // 0 isolates the BN alignment term
  WindowSpec window;
  EpsilonRule epsilon;
  InitMethod init = InitMethod::Real;
  std::int64_t ipc = 1;
  enum class Grouping { PerClass, AllClasses };
  Grouping grouping = Grouping::PerClass;  // batch structure for BN capture
  bool mask_updates = true;                // off: M forced to all ones
  bool augment = true;
  // Augmentation box side as a fraction of min(H, W). The useful range
  // scales with resolution: tiny frames want tiny boxes.
  double augment_box_min = 0.3;
  double augment_box_max = 0.7;
  bool momentum = false;  // optional heavy-ball on the pixel updates
  std::uint64_t seed = 0;

  void validate() const;  // K >= 1, lr > 0, r_bn >= 0, ipc >= 1
  std::string to_json_string() const;
};

struct TeacherTrainConfig {
  std::int64_t epochs = 30;
  double lr = 0.05;
  std::int64_t batch_size = 16;
  double weight_decay = 0.0;
  double momentum = 0.9;
  std::uint64_t seed = 0;

  void validate() const;  // epochs >= 1, lr > 0, batch_size >= 1
  std::string to_json_string() const;
};

/// SGD with heavy-ball momentum and decoupled-from-nothing weight decay
/// (decay folds into the gradient, classic L2 style). Velocity buffers are
/// keyed by position, so feed the same parameter list every step.
class SgdOptimizer {
 public:
  SgdOptimizer(std::vector<Tensor> params, double lr, double momentum,
               double weight_decay = 0.0);
  void set_lr(double lr) { lr_ = lr; }
  double lr() const { return lr_; }
  void zero_grad();
  void step();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> vel_;
  double lr_, momentum_, weight_decay_;
};

/// Cosine decay from lr0 to 0 across `total` steps.
double cosine_lr(double lr0, std::int64_t step, std::int64_t total);

/// [B,T,C,H,W] batch from samples[indices]; all samples must share one shape.
Tensor stack_videos(const std::vector<VideoSample>& samples,
                    const std::vector<std::int64_t>& indices);
/// One-hot rows from hard labels.
Tensor hard_targets(const std::vector<VideoSample>& samples,
                    const std::vector<std::int64_t>& indices, std::int64_t classes);
/// Rows from soft labels; falls back to one-hot where a sample has none.
Tensor soft_targets(const std::vector<VideoSample>& samples,
                    const std::vector<std::int64_t>& indices, std::int64_t classes);

/// Top-1 accuracy of the model on the samples, eval mode, batched.
double top1_accuracy(Model& model, const std::vector<VideoSample>& samples);

/// Deterministic digest over every named tensor (parameters and BN buffers).
std::string model_hash(const Model& model);

/// "mini_c3d", "conv2d_temporal_pool" or "conv2d_gru".
Model build_model(std::string_view kind, const MiniC3DConfig& config,
                  std::uint64_t seed);

struct TeacherResult {
  Model model;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

/// Mini-batch SGD teacher training with cosine-decayed learning rate.
/// Aborts with a diagnostic if the loss turns non-finite.
TeacherResult train_teacher(Model model, const std::vector<VideoSample>& train,
                            const std::vector<VideoSample>& val,
                            const TeacherTrainConfig& cfg, std::ostream* log = nullptr);

/// Sum over BN layers of ||mu_l - RM_l||_2 + ||var_l - RV_l||_2 (norms, not
/// squared norms). Stays on the capture graph so it backpropagates to pixels.
Tensor regularization_loss(const BatchStats& stats, const Model& teacher);

struct DistillLossParts {
  Tensor total;  // ce + r_bn * reg
  Tensor ce;
  Tensor reg;
};

/// Capture-mode forward through the frozen teacher plus the BN alignment term.
DistillLossParts distill_loss(const Tensor& x, const Tensor& y_onehot, Model& teacher,
                              double r_bn);

/// One row of the run log, aggregated over all class batches of an iteration.
struct IterationStats {
  std::int64_t iteration = 0;
  double ce = 0.0;
  double reg = 0.0;
  double mean_mask = 0.0;
  double min_pixel = 0.0;
  double max_pixel = 0.0;
};

/// Per-batch observation for invariant checks: masks actually applied plus
/// pixel snapshots around the update.
struct DistillObservation {
  std::int64_t iteration = 0;
  std::int64_t batch_start = 0;  // index of the first sample in ds order
  std::vector<std::vector<double>> masks;
  Tensor before, after;  // [B,T,C,H,W] copies
};
using DistillObserver = std::function<void(const DistillObservation&)>;

/// Algorithm: init S, then K iterations of {capture-forward, backward,
/// per-video saliency from current pixels, masked clamped pixel update},
/// then gated augmentation and label recalibration.
DistilledDataset distill(const std::vector<VideoSample>& train, Model& teacher,
                         const DistillConfig& cfg, std::ostream* log = nullptr,
                         const DistillObserver& observer = nullptr);

/// Replaces every soft label with the teacher's softmax on the sample's
/// current pixels. Hard labels stay as metadata. Idempotent.
DistilledDataset recalibrate_labels(DistilledDataset ds, Model& teacher);

}  // namespace tsgf
