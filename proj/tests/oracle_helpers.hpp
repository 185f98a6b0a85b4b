#pragma once

// Independent oracles for the test suite: central finite differences against
// the autodiff engine, plus naive convolution references. Everything here is
// deliberately dumb and loop-based so a disagreement points at the library.

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "tsgf/tensor.hpp"
#include "tsgf/util.hpp"

namespace tsgf::test {

// Values drawn without replacement from a linspace grid, shuffled. Pairwise
// separation is (hi-lo)/cells, far above the FD step, so no sample sits within
// a perturbation of a kink another sample creates. keepout > 0 excises
// (-keepout, keepout), protecting ops with a kink at zero (relu, abs).
inline std::vector<double> well_spaced_values(size_t n, double lo, double hi,
                                              Rng& rng, double keepout = 0.0) {
  const size_t cells = std::max<size_t>(n * 8, 64);
  std::vector<double> grid;
  grid.reserve(cells);
  for (size_t i = 0; i < cells; ++i) {
    const double v = lo + (hi - lo) * (static_cast<double>(i) + 0.5) /
                              static_cast<double>(cells);
    if (keepout > 0.0 && std::abs(v) < keepout) continue;
    grid.push_back(v);
  }
  std::shuffle(grid.begin(), grid.end(), rng);
  grid.resize(n);
  return grid;
}

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0,
                            double keepout = 0.0) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return Tensor::from_data(std::move(shape),
                           well_spaced_values(static_cast<size_t>(n), lo, hi, rng, keepout));
}

struct FdReport {
  double max_rel_err = 0.0;
  size_t elements_checked = 0;
};

// f rebuilds the graph from the current contents of `inputs` and returns the
// scalar loss. Gradient criterion: |analytic - numeric| / max(1, |numeric|).
template <class F>
FdReport fd_check(F f, std::vector<Tensor>& inputs, double h = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }
  Tensor loss = f();
  loss.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) {
    if (t.has_grad()) {
      analytic.emplace_back(t.grad().begin(), t.grad().end());
    } else {
      analytic.emplace_back(t.numel(), 0.0);
    }
    t.set_requires_grad(false);  // numeric passes need no graph
  }

  FdReport rep;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    auto d = inputs[ti].data();
    for (size_t j = 0; j < d.size(); ++j) {
      const double v = d[j];
      d[j] = v + h;
      const double lp = f().item();
      d[j] = v - h;
      const double lm = f().item();
      d[j] = v;
      const double numeric = (lp - lm) / (2.0 * h);
      const double rel = std::abs(analytic[ti][j] - numeric) /
                         std::max(1.0, std::abs(numeric));
      rep.max_rel_err = std::max(rep.max_rel_err, rel);
      ++rep.elements_checked;
    }
  }
  for (auto& t : inputs) t.set_requires_grad(true);
  return rep;
}

// Reference conv implementations: direct translation of the convolution sum.

inline std::vector<double> naive_conv3d(
    const std::vector<double>& x, std::int64_t B, std::int64_t C, std::int64_t T,
    std::int64_t H, std::int64_t W, const std::vector<double>& w, std::int64_t O,
    std::int64_t kT, std::int64_t kH, std::int64_t kW, const std::vector<double>& bias,
    std::array<int, 3> stride, std::array<int, 3> pad) {
  const std::int64_t To = (T + 2 * pad[0] - kT) / stride[0] + 1;
  const std::int64_t Ho = (H + 2 * pad[1] - kH) / stride[1] + 1;
  const std::int64_t Wo = (W + 2 * pad[2] - kW) / stride[2] + 1;
  std::vector<double> out(static_cast<size_t>(B * O * To * Ho * Wo), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t to = 0; to < To; ++to)
        for (std::int64_t ho = 0; ho < Ho; ++ho)
          for (std::int64_t wo = 0; wo < Wo; ++wo) {
            double acc = bias[o];
            for (std::int64_t c = 0; c < C; ++c)
              for (std::int64_t it = 0; it < kT; ++it)
                for (std::int64_t ih = 0; ih < kH; ++ih)
                  for (std::int64_t iw = 0; iw < kW; ++iw) {
                    const std::int64_t t = to * stride[0] - pad[0] + it;
                    const std::int64_t hh = ho * stride[1] - pad[1] + ih;
                    const std::int64_t ww = wo * stride[2] - pad[2] + iw;
                    if (t < 0 || t >= T || hh < 0 || hh >= H || ww < 0 || ww >= W)
                      continue;
                    acc += x[(((b * C + c) * T + t) * H + hh) * W + ww] *
                           w[(((o * C + c) * kT + it) * kH + ih) * kW + iw];
                  }
            out[(((b * O + o) * To + to) * Ho + ho) * Wo + wo] = acc;
          }
  return out;
}

inline std::vector<double> naive_conv2d(
    const std::vector<double>& x, std::int64_t B, std::int64_t C, std::int64_t H,
    std::int64_t W, const std::vector<double>& w, std::int64_t O, std::int64_t kH,
    std::int64_t kW, const std::vector<double>& bias, std::array<int, 2> stride,
    std::array<int, 2> pad) {
  const std::int64_t Ho = (H + 2 * pad[0] - kH) / stride[0] + 1;
  const std::int64_t Wo = (W + 2 * pad[1] - kW) / stride[1] + 1;
  std::vector<double> out(static_cast<size_t>(B * O * Ho * Wo), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t ho = 0; ho < Ho; ++ho)
        for (std::int64_t wo = 0; wo < Wo; ++wo) {
          double acc = bias[o];
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t ih = 0; ih < kH; ++ih)
              for (std::int64_t iw = 0; iw < kW; ++iw) {
                const std::int64_t hh = ho * stride[0] - pad[0] + ih;
                const std::int64_t ww = wo * stride[1] - pad[1] + iw;
                if (hh < 0 || hh >= H || ww < 0 || ww >= W) continue;
                acc += x[((b * C + c) * H + hh) * W + ww] *
                       w[((o * C + c) * kH + ih) * kW + iw];
              }
          out[((b * O + o) * Ho + ho) * Wo + wo] = acc;
        }
  return out;
}

}  // namespace tsgf::test
