#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "oracle_helpers.hpp"
#include "tsgf/saliency.hpp"
#include "tsgf/util.hpp"

using namespace tsgf;
using test::random_tensor;

namespace {

// Independent oracle: per-pixel neighbor differences averaged the straight
// way Eq-by-eq, no shared code with the library.
std::vector<double> naive_frame_differences(const Tensor& video) {
  const auto& sh = video.shape();
  const std::int64_t T = sh[0], npix = sh[1] * sh[2] * sh[3];
  const auto px = video.data();
  std::vector<double> d(static_cast<size_t>(T), 0.0);
  for (std::int64_t t = 0; t < T; ++t) {
    if (T == 1) break;
    double acc = 0.0;
    for (std::int64_t i = 0; i < npix; ++i) {
      const double cur = px[t * npix + i];
      if (t == 0) {
        acc += std::abs(px[npix + i] - cur);
      } else if (t == T - 1) {
        acc += std::abs(cur - px[(t - 1) * npix + i]);
      } else {
        acc += (std::abs(px[(t + 1) * npix + i] - cur) +
                std::abs(cur - px[(t - 1) * npix + i])) /
               2.0;
      }
    }
    d[static_cast<size_t>(t)] = acc / static_cast<double>(npix);
  }
  return d;
}

Tensor video_from_frames(const std::vector<double>& frames) {
  return Tensor::from_data({static_cast<std::int64_t>(frames.size()), 1, 1, 1}, frames);
}

}  // namespace

TEST_CASE("frame differences on 1x1 frames [0,1,3,3]") {
  auto d = frame_differences(video_from_frames({0, 1, 3, 3}));
  CHECK(d == std::vector<double>{1.0, 1.5, 1.0, 0.0});
}

TEST_CASE("static video has zero differences and a 1-frame video yields [0]") {
  Tensor v = Tensor::full({5, 2, 3, 3}, 0.7);
  auto d = frame_differences(v);
  CHECK(std::all_of(d.begin(), d.end(), [](double x) { return x == 0.0; }));
  CHECK(frame_differences(Tensor::full({1, 1, 4, 4}, 0.3)) == std::vector<double>{0.0});
}

TEST_CASE("frame differences scale linearly with pixel scale") {
  Rng rng(derive_seed(7, "sal-scale"));
  Tensor v = random_tensor({6, 1, 3, 3}, rng, 0.0, 1.0);
  auto d1 = frame_differences(v);
  std::vector<double> scaled(v.data().begin(), v.data().end());
  for (auto& x : scaled) x *= 3.5;
  auto d2 = frame_differences(Tensor::from_data(v.shape(), std::move(scaled)));
  for (size_t i = 0; i < d1.size(); ++i)
    CHECK(d2[i] == doctest::Approx(3.5 * d1[i]).epsilon(1e-12));
}

TEST_CASE("frame differences match the brute-force oracle up to T=8, 4x4") {
  Rng rng(derive_seed(8, "sal-oracle"));
  for (std::int64_t T = 1; T <= 8; ++T) {
    Tensor v = random_tensor({T, 1, 4, 4}, rng, 0.0, 1.0);
    auto got = frame_differences(v);
    auto want = naive_frame_differences(v);
    REQUIRE(got.size() == want.size());
    for (size_t i = 0; i < got.size(); ++i)
      CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("uniform k=1 smoothing of [1,1.5,1,0]") {
  WindowSpec w{.k = 1, .kind = WindowSpec::Kind::Uniform};
  auto s = smooth_saliency({1, 1.5, 1, 0}, w);
  CHECK(s == std::vector<double>{1.0, 1.25, 1.25, 0.5});
}

TEST_CASE("k=0 smoothing is the identity") {
  WindowSpec w{.k = 0};
  std::vector<double> d{0.3, 0.0, 2.0, 1.1};
  CHECK(smooth_saliency(d, w) == d);
}

TEST_CASE("constant saliency is a fixed point of any window") {
  for (auto kind : {WindowSpec::Kind::Uniform, WindowSpec::Kind::Triangular})
    for (int k : {0, 1, 2, 5}) {
      WindowSpec w{.k = k, .kind = kind};
      std::vector<double> d(9, 0.42);
      auto s = smooth_saliency(d, w);
      for (double v : s) CHECK(v == doctest::Approx(0.42).epsilon(1e-13));
    }
}

TEST_CASE("window weights are a normalized distribution") {
  for (auto kind : {WindowSpec::Kind::Uniform, WindowSpec::Kind::Triangular})
    for (int k : {0, 1, 3, 7}) {
      WindowSpec w{.k = k, .kind = kind};
      auto a = w.weights();
      REQUIRE(static_cast<int>(a.size()) == k + 1);
      double total = 0.0;
      for (double v : a) {
        CHECK(v >= 0.0);
        total += v;
      }
      CHECK(total == doctest::Approx(1.0).epsilon(1e-13));
      if (kind == WindowSpec::Kind::Triangular)
        for (size_t j = 1; j < a.size(); ++j) CHECK(a[j] <= a[j - 1]);
    }
  CHECK_THROWS_AS(WindowSpec{.k = -1}.weights(), ShapeError);
}

TEST_CASE("uniform smoothing equals the moving-average oracle") {
  Rng rng(derive_seed(9, "sal-ma"));
  auto d = test::well_spaced_values(16, 0.0, 2.0, rng);
  for (int k : {1, 2, 4}) {
    auto s = smooth_saliency(d, WindowSpec{.k = k});
    for (int i = 0; i < static_cast<int>(d.size()); ++i) {
      double acc = 0.0;
      int cnt = 0;
      for (int j = i; j >= 0 && j > i - (k + 1); --j) {
        acc += d[j];
        ++cnt;
      }
      CHECK(s[i] == doctest::Approx(acc / cnt).epsilon(1e-12));
    }
  }
}

TEST_CASE("mask worked example s=[0.2,0.6,1.0], eps=0.8") {
  auto [m, eps] = build_mask({0.2, 0.6, 1.0}, EpsilonRule{.absolute = 0.8});
  CHECK(eps == 0.8);
  REQUIRE(m.size() == 3);
  CHECK(m[0] == doctest::Approx(0.75).epsilon(1e-14));
  CHECK(m[1] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(m[2] == 0.0);
}

TEST_CASE("flat saliency opens the mask fully") {
  auto [m, eps] = build_mask({0.0, 0.0, 0.0, 0.0}, EpsilonRule{});
  CHECK(m == std::vector<double>(4, 1.0));
  CHECK(eps == 0.0);
}

TEST_CASE("epsilon at the minimum closes the mask") {
  std::vector<double> s{0.1, 0.5, 0.9};
  auto [m, eps] = build_mask(s, EpsilonRule{.absolute = 0.1});
  CHECK(eps == 0.1);
  CHECK(m == std::vector<double>(3, 0.0));
}

TEST_CASE("absolute epsilon is clamped to max(s)") {
  auto [m, eps] = build_mask({0.1, 0.5, 0.9}, EpsilonRule{.absolute = 50.0});
  CHECK(eps == 0.9);
  CHECK(m[0] == doctest::Approx(1.0).epsilon(1e-14));  // (0.9-0.1)/0.8
  CHECK(m[2] == 0.0);
}

TEST_CASE("quantile resolves epsilon with linear interpolation") {
  CHECK(quantile({0.0, 1.0}, 0.5) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(quantile({3.0, 1.0, 2.0}, 0.0) == 1.0);
  CHECK(quantile({3.0, 1.0, 2.0}, 1.0) == 3.0);
  CHECK(quantile({0.0, 1.0, 2.0, 3.0, 4.0}, 0.8) == doctest::Approx(3.2).epsilon(1e-13));
}

TEST_CASE("mask invariants on random saliency profiles") {
  Rng rng(derive_seed(10, "mask-prop"));
  for (int rep = 0; rep < 50; ++rep) {
    const size_t n = 2 + static_cast<size_t>(uniform_int(rng, 0, 14));
    std::vector<double> s(n);
    for (auto& v : s) v = uniform(rng, 0.0, 3.0);
    EpsilonRule rule;
    if (rep % 3 == 0) rule.absolute = uniform(rng, 0.0, 3.5);
    else rule.quantile = uniform(rng, 0.0, 1.0);
    auto [m, eps] = build_mask(s, rule);

    const double smax = *std::max_element(s.begin(), s.end());
    const double smin = *std::min_element(s.begin(), s.end());
    for (size_t i = 0; i < n; ++i) {
      CHECK(m[i] >= 0.0);
      CHECK(m[i] <= 1.0);
      if (smax > smin) CHECK((m[i] == 0.0) == (s[i] >= eps));
      for (size_t j = 0; j < n; ++j)
        if (s[i] < s[j]) CHECK(m[i] >= m[j]);
    }
  }
}

TEST_CASE("apply_mask scales whole frames") {
  Tensor g = Tensor::full({3, 1, 2, 2}, 2.0);
  Tensor all = apply_mask(g, {1.0, 1.0, 1.0});
  CHECK(std::vector<double>(all.data().begin(), all.data().end()) ==
        std::vector<double>(g.data().begin(), g.data().end()));
  Tensor mixed = apply_mask(g, {0.0, 0.5, 1.0});
  auto v = mixed.data();
  for (int i = 0; i < 4; ++i) CHECK(v[i] == 0.0);
  for (int i = 4; i < 8; ++i) CHECK(v[i] == 1.0);
  for (int i = 8; i < 12; ++i) CHECK(v[i] == 2.0);
  CHECK_THROWS_AS(apply_mask(g, {1.0, 1.0}), ShapeError);
}

TEST_CASE("gated augmentation respects the gate and the box") {
  Rng rng(derive_seed(11, "aug"));
  for (int rep = 0; rep < 25; ++rep) {
    const std::int64_t T = uniform_int(rng, 1, 6), C = uniform_int(rng, 1, 2);
    const std::int64_t H = uniform_int(rng, 2, 8), W = uniform_int(rng, 2, 8);
    Tensor v = random_tensor({T, C, H, W}, rng, 0.0, 1.0);
    Tensor p = random_tensor({T, C, H, W}, rng, 2.0, 3.0);  // disjoint range
    std::vector<double> s(static_cast<size_t>(T));
    for (auto& x : s) x = uniform(rng, 0.0, 1.0);
    const double eps = uniform(rng, 0.0, 1.0);
    AugmentSpec spec{.box_ratio_min = 0.2, .box_ratio_max = 0.9,
                     .seed = derive_seed(100 + rep, "box")};

    Tensor out = gated_augment(v, s, eps, p, spec);
    Tensor out2 = gated_augment(v, s, eps, p, spec);
    CHECK(std::vector<double>(out.data().begin(), out.data().end()) ==
          std::vector<double>(out2.data().begin(), out2.data().end()));

    const std::int64_t npix = C * H * W;
    // Union of changed (y,x) cells per frame; gated frames must share one box.
    std::vector<std::pair<std::int64_t, std::int64_t>> corner(static_cast<size_t>(T), {-1, -1});
    for (std::int64_t t = 0; t < T; ++t) {
      bool changed = false;
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t x = 0; x < W; ++x) {
            const auto i = ((t * C + c) * H + y) * W + x;
            const bool diff = out.data()[i] != v.data()[i];
            if (diff) {
              changed = true;
              CHECK(out.data()[i] == p.data()[i]);
              auto& [cy, cx] = corner[static_cast<size_t>(t)];
              cy = (cy < 0) ? y : std::min(cy, y);
              cx = (cx < 0) ? x : std::min(cx, x);
            }
          }
      if (s[static_cast<size_t>(t)] > eps) {
        CHECK_FALSE(changed);
        // bit-identical, not merely close
        for (std::int64_t i = t * npix; i < (t + 1) * npix; ++i)
          CHECK(out.data()[i] == v.data()[i]);
      }
    }
    // All gated frames that changed share the same box corner.
    std::pair<std::int64_t, std::int64_t> ref{-1, -1};
    for (std::int64_t t = 0; t < T; ++t) {
      if (corner[static_cast<size_t>(t)].first < 0) continue;
      if (ref.first < 0) ref = corner[static_cast<size_t>(t)];
      CHECK(corner[static_cast<size_t>(t)] == ref);
    }
  }
}

TEST_CASE("augmentation with epsilon below min(s) is the identity") {
  Rng rng(derive_seed(12, "aug-id"));
  Tensor v = random_tensor({4, 1, 5, 5}, rng, 0.0, 1.0);
  Tensor p = random_tensor({4, 1, 5, 5}, rng, 0.0, 1.0);
  Tensor out = gated_augment(v, {0.5, 0.6, 0.7, 0.8}, 0.4, p, AugmentSpec{.seed = 3});
  CHECK(std::vector<double>(out.data().begin(), out.data().end()) ==
        std::vector<double>(v.data().begin(), v.data().end()));
}

TEST_CASE("full-ratio box with all frames gated yields the partner") {
  Rng rng(derive_seed(13, "aug-full"));
  Tensor v = random_tensor({3, 2, 4, 4}, rng, 0.0, 1.0);
  Tensor p = random_tensor({3, 2, 4, 4}, rng, 0.0, 1.0);
  AugmentSpec spec{.box_ratio_min = 1.0, .box_ratio_max = 1.0, .seed = 9};
  AugmentBox box;
  Tensor out = gated_augment(v, {0.0, 0.0, 0.0}, 1.0, p, spec, &box);
  CHECK(std::vector<double>(out.data().begin(), out.data().end()) ==
        std::vector<double>(p.data().begin(), p.data().end()));
  CHECK(box.y0 == 0);
  CHECK(box.x0 == 0);
  CHECK(box.bh == 4);
  CHECK(box.bw == 4);
  CHECK(box.gated_frames == 3);
}

TEST_CASE("reported box matches the pixels the paste touched") {
  Rng rng(derive_seed(14, "aug-box"));
  Tensor v = random_tensor({4, 1, 6, 6}, rng, 0.0, 1.0);
  Tensor p = random_tensor({4, 1, 6, 6}, rng, 0.0, 1.0);
  AugmentBox box;
  Tensor out = gated_augment(v, {0.1, 0.9, 0.1, 0.9}, 0.5, p, AugmentSpec{.seed = 21},
                             &box);
  CHECK(box.gated_frames == 2);
  const auto vi = v.data(), vo = out.data(), pp = p.data();
  for (std::int64_t t = 0; t < 4; ++t) {
    const bool gated = t % 2 == 0;
    for (std::int64_t y = 0; y < 6; ++y)
      for (std::int64_t x = 0; x < 6; ++x) {
        const std::int64_t i = (t * 6 + y) * 6 + x;
        const bool inside = gated && y >= box.y0 && y < box.y0 + box.bh &&
                            x >= box.x0 && x < box.x0 + box.bw;
        CHECK(vo[i] == (inside ? pp[i] : vi[i]));
      }
  }
}

TEST_CASE("augmentation rejects invalid inputs") {
  Tensor v = Tensor::zeros({2, 1, 4, 4});
  Tensor p = Tensor::zeros({2, 1, 4, 5});
  CHECK_THROWS_AS(gated_augment(v, {0, 0}, 0.5, p, AugmentSpec{}), ShapeError);
  Tensor p2 = Tensor::zeros({2, 1, 4, 4});
  CHECK_THROWS_AS(gated_augment(v, {0.0}, 0.5, p2, AugmentSpec{}), ShapeError);
  CHECK_THROWS_AS(gated_augment(v, {0, 0}, 0.5, p2,
                                AugmentSpec{.box_ratio_min = 0.0, .box_ratio_max = 0.5}),
                  ShapeError);
}

TEST_CASE("saliency profile invariants on random videos") {
  Rng rng(derive_seed(14, "profile"));
  for (int rep = 0; rep < 20; ++rep) {
    const std::int64_t T = uniform_int(rng, 1, 10);
    Tensor v = random_tensor({T, 1, 4, 4}, rng, 0.0, 1.0);
    auto prof = saliency_profile(v, WindowSpec{}, EpsilonRule{});
    REQUIRE(prof.d.size() == static_cast<size_t>(T));
    REQUIRE(prof.s.size() == static_cast<size_t>(T));
    REQUIRE(prof.mask.size() == static_cast<size_t>(T));
    for (std::int64_t i = 0; i < T; ++i) {
      CHECK(prof.d[i] >= 0.0);
      CHECK(prof.s[i] >= 0.0);
      CHECK(prof.mask[i] >= 0.0);
      CHECK(prof.mask[i] <= 1.0);
    }
  }
}
