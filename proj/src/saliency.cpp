#include "tsgf/saliency.hpp"

#include <algorithm>
#include <cmath>

#include "tsgf/util.hpp"

namespace tsgf {

namespace {

void check_video(const Tensor& v, const char* op) {
  if (!v.defined() || v.rank() != 4)
    throw ShapeError(std::string(op) + ": expects a [T,C,H,W] video, got " +
                     (v.defined() ? shape_str(v.shape()) : std::string("undefined")));
}

}  // namespace

std::vector<double> WindowSpec::weights() const {
  if (k < 0) throw ShapeError("WindowSpec: window length k must be >= 0");
  std::vector<double> w(static_cast<size_t>(k) + 1);
  double total = 0.0;
  for (int j = 0; j <= k; ++j) {
    w[j] = (kind == Kind::Uniform) ? 1.0 : static_cast<double>(k + 1 - j);
    total += w[j];
  }
  for (auto& v : w) v /= total;
  return w;
}

std::vector<double> frame_differences(const Tensor& video) {
  check_video(video, "frame_differences");
  const auto& sh = video.shape();
  const std::int64_t T = sh[0];
  const std::int64_t npix = sh[1] * sh[2] * sh[3];
  const auto px = video.data();

  // Mean absolute pixel difference between frames a and b.
  auto mad = [&](std::int64_t a, std::int64_t b) {
    double acc = 0.0;
    const double* fa = px.data() + a * npix;
    const double* fb = px.data() + b * npix;
    for (std::int64_t i = 0; i < npix; ++i) acc += std::abs(fa[i] - fb[i]);
    return acc / static_cast<double>(npix);
  };

  std::vector<double> d(static_cast<size_t>(T), 0.0);
  if (T == 1) return d;
  d[0] = mad(1, 0);
  d[T - 1] = mad(T - 1, T - 2);
  for (std::int64_t i = 1; i + 1 < T; ++i) d[i] = 0.5 * (mad(i + 1, i) + mad(i, i - 1));
  return d;
}

std::vector<double> smooth_saliency(const std::vector<double>& d, const WindowSpec& window) {
  const auto alpha = window.weights();
  const int T = static_cast<int>(d.size());
  std::vector<double> s(d.size(), 0.0);
  for (int i = 0; i < T; ++i) {
    double acc = 0.0, wsum = 0.0;
    for (int j = 0; j < static_cast<int>(alpha.size()); ++j) {
      if (i - j < 0) break;  // taps older than frame 0 are dropped
      acc += alpha[j] * d[i - j];
      wsum += alpha[j];
    }
    s[i] = acc / wsum;
  }
  return s;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ShapeError("quantile: empty input");
  q = std::clamp(q, 0.0, 1.0);
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<size_t>(pos);
  const double frac = pos - static_cast<double>(lo);
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] * (1.0 - frac) + values[lo + 1] * frac;
}

std::pair<std::vector<double>, double> build_mask(const std::vector<double>& s,
                                                  const EpsilonRule& rule) {
  if (s.empty()) throw ShapeError("build_mask: empty saliency vector");
  const double smax = *std::max_element(s.begin(), s.end());
  const double smin = *std::min_element(s.begin(), s.end());
  const double eps = rule.absolute ? std::min(*rule.absolute, smax)
                                   : quantile(s, rule.quantile);

  std::vector<double> m(s.size(), 1.0);
  const double denom = smax - smin;
  if (denom > 0.0) {
    for (size_t i = 0; i < s.size(); ++i)
      m[i] = std::clamp(std::max(eps - s[i], 0.0) / denom, 0.0, 1.0);
  }
  return {std::move(m), eps};
}

SaliencyProfile saliency_profile(const Tensor& video, const WindowSpec& window,
                                 const EpsilonRule& rule) {
  SaliencyProfile p;
  p.d = frame_differences(video);
  p.s = smooth_saliency(p.d, window);
  auto [mask, eps] = build_mask(p.s, rule);
  p.mask = std::move(mask);
  p.epsilon = eps;
  return p;
}

Tensor apply_mask(const Tensor& grad, const std::vector<double>& mask) {
  check_video(grad, "apply_mask");
  const auto& sh = grad.shape();
  if (static_cast<std::int64_t>(mask.size()) != sh[0])
    throw ShapeError("apply_mask: mask length " + std::to_string(mask.size()) +
                     " does not match " + std::to_string(sh[0]) + " frames");
  const std::int64_t npix = sh[1] * sh[2] * sh[3];
  std::vector<double> out(grad.data().begin(), grad.data().end());
  for (std::int64_t t = 0; t < sh[0]; ++t) {
    const double m = mask[static_cast<size_t>(t)];
    double* f = out.data() + t * npix;
    for (std::int64_t i = 0; i < npix; ++i) f[i] *= m;
  }
  return Tensor::from_data(sh, std::move(out));
}

Tensor gated_augment(const Tensor& video, const std::vector<double>& s, double epsilon,
                     const Tensor& partner, const AugmentSpec& spec,
                     AugmentBox* box_out) {
  check_video(video, "gated_augment");
  check_video(partner, "gated_augment");
  if (video.shape() != partner.shape())
    throw ShapeError("gated_augment: partner shape " + shape_str(partner.shape()) +
                     " does not match video " + shape_str(video.shape()));
  const auto& sh = video.shape();
  if (static_cast<std::int64_t>(s.size()) != sh[0])
    throw ShapeError("gated_augment: saliency length " + std::to_string(s.size()) +
                     " does not match " + std::to_string(sh[0]) + " frames");
  if (spec.box_ratio_min <= 0.0 || spec.box_ratio_max < spec.box_ratio_min ||
      spec.box_ratio_max > 1.0)
    throw ShapeError("gated_augment: box ratio range must satisfy 0 < min <= max <= 1");

  const std::int64_t T = sh[0], C = sh[1], H = sh[2], W = sh[3];
  Rng rng(spec.seed);
  const double rh = uniform(rng, spec.box_ratio_min, spec.box_ratio_max);
  const double rw = uniform(rng, spec.box_ratio_min, spec.box_ratio_max);
  const std::int64_t bh = std::clamp<std::int64_t>(std::llround(rh * static_cast<double>(H)), 1, H);
  const std::int64_t bw = std::clamp<std::int64_t>(std::llround(rw * static_cast<double>(W)), 1, W);
  const std::int64_t y0 = uniform_int(rng, 0, H - bh);
  const std::int64_t x0 = uniform_int(rng, 0, W - bw);

  std::vector<double> out(video.data().begin(), video.data().end());
  const auto src = partner.data();
  std::int64_t gated = 0;
  for (std::int64_t t = 0; t < T; ++t) {
    if (s[static_cast<size_t>(t)] > epsilon) continue;
    ++gated;
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t y = y0; y < y0 + bh; ++y) {
        const std::int64_t base = ((t * C + c) * H + y) * W;
        for (std::int64_t x = x0; x < x0 + bw; ++x) out[base + x] = src[base + x];
      }
  }
  if (box_out != nullptr) *box_out = {y0, x0, bh, bw, gated};
  return Tensor::from_data(sh, std::move(out));
}

}  // namespace tsgf
