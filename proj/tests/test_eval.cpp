#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "oracle_helpers.hpp"
#include "tsgf/eval.hpp"
#include "tsgf/util.hpp"

using namespace tsgf;

namespace {

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  const auto da = a.data(), db = b.data();
  return std::equal(da.begin(), da.end(), db.begin());
}

ToySpec pair_spec() {
  ToySpec spec;
  spec.frames = 8;
  spec.height = 12;
  spec.width = 12;
  spec.train_per_class = 12;
  spec.val_per_class = 0;
  spec.test_per_class = 8;
  spec.seed = 7;
  using S = ClassSpec::Shape;
  using M = ClassSpec::Motion;
  spec.class_specs = {
      {.shape = S::Square, .motion = M::Constant, .speed = 2},
      {.shape = S::Square, .motion = M::Constant, .speed = -2},
  };
  return spec;
}

MiniC3DConfig pair_model_config() {
  MiniC3DConfig cfg;
  cfg.frames = 8;
  cfg.height = 12;
  cfg.width = 12;
  cfg.classes = 2;
  cfg.widths = {4, 8, 8};
  return cfg;
}

struct Fixture {
  ToyDataset data;
  Model teacher;
  DistilledDataset distilled;
};

Fixture& fixture() {
  static Fixture f = [] {
    Fixture fx;
    fx.data = generate_toy_dataset(pair_spec());
    TeacherTrainConfig tcfg;
    tcfg.epochs = 18;
    tcfg.lr = 0.05;
    tcfg.batch_size = 8;
    tcfg.seed = 5;
    fx.teacher =
        train_teacher(build_mini_c3d(pair_model_config(), 5), fx.data.train, {}, tcfg)
            .model;
    DistillConfig dc;
    dc.iterations = 3;
    dc.ipc = 2;
    dc.seed = 9;
    fx.distilled = distill(fx.data.train, fx.teacher, dc);
    return fx;
  }();
  return f;
}

EvalConfig quick_eval() {
  EvalConfig ec;
  ec.epochs = 6;
  ec.batch_size = 64;
  ec.widths = {4, 8, 8};
  ec.seeds = {1, 2};
  return ec;
}

}  // namespace

TEST_CASE("report statistics recompute exactly from per-seed values") {
  EvalReport r;
  r.per_seed_accuracy = {0.5, 0.7, 0.6};
  finalize_report(r);
  double mean = (0.5 + 0.7 + 0.6) / 3.0;
  CHECK(r.mean == mean);
  double sq = 0.0;
  for (double v : r.per_seed_accuracy) sq += (v - mean) * (v - mean);
  CHECK(r.stddev == std::sqrt(sq / 3.0));

  Rng rng(3);
  for (int rep = 0; rep < 20; ++rep) {
    EvalReport p;
    const int n = static_cast<int>(uniform_int(rng, 1, 6));
    for (int i = 0; i < n; ++i) p.per_seed_accuracy.push_back(uniform(rng, 0.0, 1.0));
    finalize_report(p);
    double m = 0.0;
    for (double v : p.per_seed_accuracy) m += v;
    m /= n;
    double s = 0.0;
    for (double v : p.per_seed_accuracy) s += (v - m) * (v - m);
    CHECK(p.mean == m);
    CHECK(p.stddev == std::sqrt(s / n));
  }

  EvalReport empty;
  finalize_report(empty);
  CHECK(empty.mean == 0.0);
  CHECK(empty.stddev == 0.0);
}

TEST_CASE("eval config validation") {
  EvalConfig ec;
  ec.seeds.clear();
  CHECK_THROWS_AS(ec.validate(), std::invalid_argument);
  ec = EvalConfig{};
  ec.epochs = 0;
  CHECK_THROWS_AS(ec.validate(), std::invalid_argument);
  ec = EvalConfig{};
  ec.lr = 0.0;
  CHECK_THROWS_AS(ec.validate(), std::invalid_argument);
  CHECK_NOTHROW(EvalConfig{}.validate());
}

TEST_CASE("student training is deterministic, augmentation path included") {
  auto& fx = fixture();
  EvalConfig ec = quick_eval();
  ec.augmentation = true;
  const auto a = train_student(fx.distilled, fx.data.test, ec);
  const auto b = train_student(fx.distilled, fx.data.test, ec);
  CHECK(a.per_seed_accuracy == b.per_seed_accuracy);
  CHECK(a.mean == b.mean);
  CHECK(a.stddev == b.stddev);
  CHECK(a.config_hash == b.config_hash);
  CHECK(a.distilled_hash == b.distilled_hash);
  REQUIRE(a.per_seed_accuracy.size() == 2);
  CHECK_FALSE(a.config_hash.empty());
  CHECK_FALSE(a.distilled_hash.empty());

  // Different protocol, different hash; different data, different hash.
  EvalConfig other = ec;
  other.epochs = 7;
  const auto c = train_student(fx.distilled, fx.data.test, other);
  CHECK(c.config_hash != a.config_hash);
}

TEST_CASE("student training rejects empty inputs") {
  auto& fx = fixture();
  CHECK_THROWS_AS(train_student(DistilledDataset{}, fx.data.test, quick_eval()),
                  std::invalid_argument);
  CHECK_THROWS_AS(train_student(fx.distilled, {}, quick_eval()),
                  std::invalid_argument);
}

TEST_CASE("students learn from real-sample selections") {
  auto& fx = fixture();
  auto ds = baseline_random_select(fx.data.train, 8, 3);
  EvalConfig ec = quick_eval();
  ec.epochs = 40;
  ec.seeds = {1};
  const auto report = train_student(ds, fx.data.test, ec);
  CHECK(report.mean >= 0.65);
}

TEST_CASE("random-select baseline copies real samples without optimizing") {
  auto& fx = fixture();
  const auto ds = baseline_random_select(fx.data.train, 3, 1);
  CHECK(ds.samples.size() == 6);
  CHECK(ds.ipc == 3);
  CHECK(ds.classes == 2);
  CHECK(ds.init_method == "random_select");
  CHECK_FALSE(ds.recalibrated);
  for (const auto& s : ds.samples) {
    bool verbatim = false;
    for (const auto& t : fx.data.train)
      verbatim = verbatim || (t.label == s.label && same_bits(t.video, s.video));
    CHECK(verbatim);
  }

  // Ten seeds, selections should be almost all distinct.
  std::set<std::string> digests;
  for (std::uint64_t seed = 0; seed < 10; ++seed)
    digests.insert(distilled_hash(baseline_random_select(fx.data.train, 3, seed)));
  CHECK(digests.size() >= 8);

  CHECK_THROWS_AS(baseline_random_select(fx.data.train, 100, 1), std::invalid_argument);
  CHECK_THROWS_AS(baseline_random_select({}, 1, 1), std::invalid_argument);
}

TEST_CASE("temporal resampling of sample lists") {
  auto& fx = fixture();
  const auto down = resample_frames(fx.data.train, 4);
  REQUIRE(down[0].video.shape() == Shape{4, 1, 12, 12});
  const auto orig = fx.data.train[0].video.data();
  const auto got = down[0].video.data();
  const std::int64_t fp = 12 * 12;
  for (std::int64_t t = 0; t < 4; ++t)
    for (std::int64_t i = 0; i < fp; ++i)
      CHECK(got[t * fp + i] == orig[(2 * t) * fp + i]);

  const auto up = resample_frames(fx.data.train, 16);
  REQUIRE(up[0].video.shape() == Shape{16, 1, 12, 12});
  for (std::int64_t t = 0; t < 16; ++t)
    for (std::int64_t i = 0; i < fp; ++i)
      CHECK(up[0].video.data()[t * fp + i] == orig[(t / 2) * fp + i]);
}

TEST_CASE("cross-architecture eval runs every kind on the same tensors") {
  auto& fx = fixture();
  EvalConfig ec = quick_eval();
  ec.epochs = 3;
  ec.seeds = {1};
  const std::vector<std::string> kinds = {"mini_c3d", "conv2d_temporal_pool",
                                          "conv2d_gru"};
  const auto rows = cross_architecture_eval(fx.distilled, fx.data.test, kinds, ec);
  REQUIRE(rows.size() == 3);
  for (size_t i = 0; i < kinds.size(); ++i) {
    CHECK(rows[i].name == kinds[i]);
    CHECK(rows[i].report.per_seed_accuracy.size() == 1);
    CHECK(rows[i].report.mean >= 0.0);
    CHECK(rows[i].report.mean <= 1.0);
    CHECK(rows[i].report.distilled_hash == rows[0].report.distilled_hash);
  }
}

TEST_CASE("components suite emits exactly its four cells") {
  auto& fx = fixture();
  AblationSetup setup;
  setup.spec = pair_spec();
  setup.data = &fx.data;
  setup.teacher = &fx.teacher;
  setup.distill.iterations = 2;
  setup.distill.ipc = 1;
  setup.distill.seed = 4;
  setup.eval = quick_eval();
  setup.eval.epochs = 2;
  setup.eval.seeds = {1};

  const auto rows = run_ablation("components", setup);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].name == "baseline");
  CHECK(rows[1].name == "+tsgf_a");
  CHECK(rows[2].name == "+tsgf_o");
  CHECK(rows[3].name == "both");
  for (const auto& row : rows) {
    CHECK_FALSE(row.report.distilled_hash.empty());
    CHECK(row.report.per_seed_accuracy.size() == 1);
  }
  // Different component settings produce different synthetic data.
  CHECK(rows[0].report.distilled_hash != rows[3].report.distilled_hash);
}

TEST_CASE("augmentation and frames suites emit their rows") {
  auto& fx = fixture();
  AblationSetup setup;
  setup.spec = pair_spec();
  setup.data = &fx.data;
  setup.teacher = &fx.teacher;
  setup.distill.iterations = 2;
  setup.distill.ipc = 1;
  setup.distill.seed = 4;
  setup.eval = quick_eval();
  setup.eval.epochs = 2;
  setup.eval.seeds = {1};

  const auto aug = run_ablation("augmentation", setup);
  REQUIRE(aug.size() == 3);
  CHECK(aug[0].name == "none");
  CHECK(aug[1].name == "gated");
  CHECK(aug[2].name == "gated+eval");

  const auto frames = run_ablation("frames", setup);
  REQUIRE(frames.size() == 4);
  CHECK(frames[0].name == "f1");
  CHECK(frames[3].name == "f16");
  // Each frame count distills distinct synthetic data.
  std::set<std::string> hashes;
  for (const auto& row : frames) hashes.insert(row.report.distilled_hash);
  CHECK(hashes.size() == 4);
}

TEST_CASE("static_dynamic suite splits by motion energy") {
  ToySpec spec = pair_spec();
  using S = ClassSpec::Shape;
  using M = ClassSpec::Motion;
  spec.class_specs = {
      {.shape = S::Square, .motion = M::Constant, .speed = 2},
      {.shape = S::Square, .motion = M::Static},
      {.shape = S::Disc, .motion = M::Constant, .speed = 2},
      {.shape = S::Disc, .motion = M::Static},
  };
  spec.train_per_class = 6;
  spec.test_per_class = 4;
  const ToyDataset data = generate_toy_dataset(spec);

  MiniC3DConfig mcfg = pair_model_config();
  mcfg.classes = 4;
  TeacherTrainConfig tcfg;
  tcfg.epochs = 6;
  tcfg.batch_size = 8;
  tcfg.seed = 2;
  Model teacher = train_teacher(build_mini_c3d(mcfg, 2), data.train, {}, tcfg).model;

  AblationSetup setup;
  setup.spec = spec;
  setup.data = &data;
  setup.teacher = &teacher;
  setup.teacher_cfg = tcfg;
  setup.distill.iterations = 2;
  setup.distill.ipc = 1;
  setup.eval = quick_eval();
  setup.eval.epochs = 2;
  setup.eval.seeds = {1};

  const auto rows = run_ablation("static_dynamic", setup);
  REQUIRE(rows.size() == 2);
  CHECK(rows[0].name == "static");
  CHECK(rows[1].name == "dynamic");
  for (const auto& row : rows) {
    CHECK(row.report.mean >= 0.0);
    CHECK(row.report.mean <= 1.0);
  }
}

TEST_CASE("unknown suites and missing fixtures are rejected") {
  auto& fx = fixture();
  AblationSetup setup;
  setup.data = &fx.data;
  setup.teacher = &fx.teacher;
  CHECK_THROWS_AS(run_ablation("flops", setup), std::invalid_argument);
  AblationSetup empty;
  CHECK_THROWS_AS(run_ablation("components", empty), std::invalid_argument);
}

TEST_CASE("ablation csv renders one line per row") {
  std::vector<AblationRow> rows(2);
  rows[0].name = "baseline";
  rows[0].report.per_seed_accuracy = {0.5, 0.6};
  finalize_report(rows[0].report);
  rows[1].name = "both";
  rows[1].report.per_seed_accuracy = {0.625};
  finalize_report(rows[1].report);
  const std::string csv = ablation_csv(rows);
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  CHECK(line == "name,mean,std,per_seed");
  std::getline(in, line);
  CHECK(line.substr(0, 9) == "baseline,");
  std::getline(in, line);
  CHECK(line == "both,0.625,0,0.625");
  CHECK_FALSE(std::getline(in, line));
}

TEST_CASE("distilled hash tracks content") {
  auto& fx = fixture();
  const auto h1 = distilled_hash(fx.distilled);
  CHECK(h1 == distilled_hash(fx.distilled));
  DistilledDataset copy = fx.distilled;
  copy.samples[0].video = copy.samples[0].video.detach();
  copy.samples[0].video.data()[0] += 0.25;
  CHECK(distilled_hash(copy) != h1);
  copy = fx.distilled;
  copy.samples[0].soft_label[0] += 1e-9;
  CHECK(distilled_hash(copy) != h1);
}
