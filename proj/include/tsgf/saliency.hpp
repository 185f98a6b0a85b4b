#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "tsgf/tensor.hpp"

namespace tsgf {

/// Smoothing window over the current frame and up to k past frames.
struct WindowSpec {
  enum class Kind { Uniform, Triangular };
  int k = 2;
  Kind kind = Kind::Uniform;

  /// alpha_0..alpha_k, newest first, normalized to sum 1. Triangular decays
  /// linearly toward older frames.
  std::vector<double> weights() const;
};

/// How the saliency threshold is resolved for one video. The quantile rule
/// adapts to the video's own saliency scale; an absolute value, when set,
/// wins but is clamped to max(s) so the pre-clamp mask stays in [0,1].
struct EpsilonRule {
  double quantile = 0.8;
  std::optional<double> absolute;
};

struct SaliencyProfile {
  std::vector<double> d;     // raw per-frame differences, >= 0
  std::vector<double> s;     // smoothed saliency, >= 0
  double epsilon = 0.0;
  std::vector<double> mask;  // in [0,1]; 0 exactly where s_i >= epsilon
};

/// Augmentation box geometry and partner policy. The box is sampled once per
/// call and shared by every augmented frame of the video.
struct AugmentSpec {
  enum class PartnerRule { DifferentClass };
  PartnerRule rule = PartnerRule::DifferentClass;
  double box_ratio_min = 0.3;
  double box_ratio_max = 0.7;
  std::uint64_t seed = 0;
};

/// Per-frame mean absolute pixel difference against temporal neighbors;
/// interior frames average both sides, boundary frames use the single
/// available side, and a 1-frame video yields [0].
std::vector<double> frame_differences(const Tensor& video);  // [T,C,H,W]

/// s_i = sum_j alpha_j * d_{i-j}; near the left boundary the out-of-range
/// taps are dropped and the surviving weights renormalized.
std::vector<double> smooth_saliency(const std::vector<double>& d, const WindowSpec& window);

/// M_i = max(epsilon - s_i, 0) / (max(s) - min(s)), clamped to [0,1].
/// A flat profile (max == min) means no temporal signal; the mask opens fully.
std::pair<std::vector<double>, double> build_mask(const std::vector<double>& s,
                                                  const EpsilonRule& rule);

SaliencyProfile saliency_profile(const Tensor& video, const WindowSpec& window,
                                 const EpsilonRule& rule);

/// g_hat[t] = M_t * grad[t]. Value-level: operates on the already-computed
/// gradient, no graph recorded.
Tensor apply_mask(const Tensor& grad, const std::vector<double>& mask);

/// The box a gated_augment call actually pasted, for callers that mix labels
/// by pasted volume.
struct AugmentBox {
  std::int64_t y0 = 0, x0 = 0, bh = 0, bw = 0;
  std::int64_t gated_frames = 0;
};

/// Frames with s_i <= epsilon receive the partner's pixels inside one fixed
/// spatial box; every other frame is returned bit-identical.
Tensor gated_augment(const Tensor& video, const std::vector<double>& s, double epsilon,
                     const Tensor& partner, const AugmentSpec& spec,
                     AugmentBox* box_out = nullptr);

/// Quantile with linear interpolation on the sorted values; q clamped to [0,1].
double quantile(std::vector<double> values, double q);

}  // namespace tsgf
