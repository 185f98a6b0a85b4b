#include "tsgf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "tsgf/saliency.hpp"
#include "tsgf/util.hpp"

namespace tsgf {

namespace {

using nlohmann::json;

std::uint64_t chain(std::uint64_t h, const std::string& s) { return fnv1a(s, h); }

std::uint64_t chain_doubles(std::uint64_t h, const std::vector<double>& v) {
  return fnv1a(v.data(), v.size() * sizeof(double), h);
}

}  // namespace

void EvalConfig::validate() const {
  if (seeds.empty()) throw std::invalid_argument("EvalConfig: at least one seed");
  if (epochs < 1) throw std::invalid_argument("EvalConfig: epochs must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("EvalConfig: learning rate must be > 0");
  if (batch_size < 1) throw std::invalid_argument("EvalConfig: batch size must be >= 1");
}

std::string EvalConfig::to_json_string() const {
  return json{{"arch", arch},
              {"epochs", epochs},
              {"lr", lr},
              {"batch_size", batch_size},
              {"augmentation", augmentation},
              {"widths", widths},
              {"gru_hidden", gru_hidden},
              {"seeds", seeds}}
      .dump();
}

void finalize_report(EvalReport& report) {
  const auto& a = report.per_seed_accuracy;
  if (a.empty()) {
    report.mean = report.stddev = 0.0;
    return;
  }
  double total = 0.0;
  for (double v : a) total += v;
  report.mean = total / static_cast<double>(a.size());
  double sq = 0.0;
  for (double v : a) sq += (v - report.mean) * (v - report.mean);
  report.stddev = std::sqrt(sq / static_cast<double>(a.size()));
}

std::string distilled_hash(const DistilledDataset& ds) {
  std::uint64_t h = fnv1a("distilled");
  h = chain(h, std::to_string(ds.ipc));
  h = chain(h, std::to_string(ds.classes));
  h = chain(h, ds.init_method);
  h = chain(h, ds.recalibrated ? "1" : "0");
  h = chain(h, ds.teacher_hash);
  for (const auto& s : ds.samples) {
    h = chain(h, s.id);
    h = chain(h, std::to_string(s.label));
    h = chain_doubles(h, s.soft_label);
    const auto d = s.video.data();
    h = fnv1a(d.data(), d.size() * sizeof(double), h);
  }
  for (const auto& p : ds.profiles) {
    h = chain_doubles(h, p.d);
    h = chain_doubles(h, p.s);
    h = chain_doubles(h, {p.epsilon});
    h = chain_doubles(h, p.mask);
  }
  return hash_hex(h);
}

namespace {

// Box ratios recorded by the distillation run, so eval-time pastes match the
// boxes the data was built with. Defaults when the config is absent or alien.
std::pair<double, double> stored_box_ratios(const DistilledDataset& ds) {
  AugmentSpec spec;
  try {
    const auto j = json::parse(ds.config_json);
    return {j.value("augment_box_min", spec.box_ratio_min),
            j.value("augment_box_max", spec.box_ratio_max)};
  } catch (const json::exception&) {
    return {spec.box_ratio_min, spec.box_ratio_max};
  }
}

// One-hot fallback keeps handcrafted datasets without recalibrated labels
// usable under augmentation.
std::vector<double> label_row(const VideoSample& s, std::int64_t classes) {
  if (!s.soft_label.empty()) return s.soft_label;
  std::vector<double> row(static_cast<size_t>(classes), 0.0);
  row[static_cast<size_t>(s.label)] = 1.0;
  return row;
}

// Per-epoch gated augmentation of the synthetic set during student training.
// Profiles come from the distillation run when present so the gate matches
// the one used to build the data. Labels mix by the pasted volume fraction,
// VideoMix style, so foreign pixels never train under a wrong label.
std::vector<VideoSample> augment_epoch(const DistilledDataset& ds,
                                       const std::vector<SaliencyProfile>& profiles,
                                       double box_min, double box_max,
                                       std::uint64_t seed, std::int64_t epoch) {
  std::vector<VideoSample> out = ds.samples;
  if (ds.classes < 2) return out;
  Rng pick(derive_seed(seed, "eval-aug-pick-" + std::to_string(epoch)));
  for (size_t i = 0; i < out.size(); ++i) {
    const auto& prof = profiles[i];
    std::int64_t pc = uniform_int(pick, 0, ds.classes - 2);
    if (pc >= out[i].label) ++pc;
    const std::int64_t pk = uniform_int(pick, 0, ds.ipc - 1);
    const auto& partner = ds.samples[static_cast<size_t>(pc * ds.ipc + pk)];
    AugmentSpec spec;
    spec.box_ratio_min = box_min;
    spec.box_ratio_max = box_max;
    spec.seed = derive_seed(seed, "eval-aug-" + std::to_string(epoch) + "-" +
                                      std::to_string(i));
    AugmentBox box;
    out[i].video = gated_augment(ds.samples[i].video, prof.s, prof.epsilon,
                                 partner.video, spec, &box);
    const auto& vs = out[i].video.shape();
    const double lam = (static_cast<double>(box.gated_frames) /
                        static_cast<double>(vs[0])) *
                       (static_cast<double>(box.bh * box.bw) /
                        static_cast<double>(vs[2] * vs[3]));
    if (lam > 0.0) {
      std::vector<double> mixed = label_row(ds.samples[i], ds.classes);
      const std::vector<double> other = label_row(partner, ds.classes);
      for (size_t k = 0; k < mixed.size(); ++k)
        mixed[k] = (1.0 - lam) * mixed[k] + lam * other[k];
      out[i].soft_label = std::move(mixed);
    }
  }
  return out;
}

}  // namespace

EvalReport train_student(const DistilledDataset& ds,
                         const std::vector<VideoSample>& test, const EvalConfig& cfg,
                         std::ostream* log) {
  cfg.validate();
  if (ds.samples.empty()) throw std::invalid_argument("train_student: empty distilled set");
  if (test.empty()) throw std::invalid_argument("train_student: empty test split");

  const auto& vs = ds.samples.front().video.shape();
  MiniC3DConfig mcfg;
  mcfg.frames = vs[0];
  mcfg.channels = vs[1];
  mcfg.height = vs[2];
  mcfg.width = vs[3];
  mcfg.classes = ds.classes;
  mcfg.widths = cfg.widths;
  mcfg.gru_hidden = cfg.gru_hidden;

  std::vector<SaliencyProfile> profiles;
  auto [box_min, box_max] = stored_box_ratios(ds);
  if (cfg.augmentation) {
    if (ds.profiles.size() == ds.samples.size()) {
      profiles = ds.profiles;
    } else {
      for (const auto& s : ds.samples)
        profiles.push_back(saliency_profile(s.video, WindowSpec{}, EpsilonRule{}));
    }
  }

  const std::int64_t N = static_cast<std::int64_t>(ds.samples.size());
  std::vector<std::int64_t> all(static_cast<size_t>(N));
  for (std::int64_t i = 0; i < N; ++i) all[static_cast<size_t>(i)] = i;
  const Tensor targets = soft_targets(ds.samples, all, ds.classes);

  EvalReport report;
  report.config_hash = hash_hex(fnv1a(cfg.to_json_string()));
  report.distilled_hash = distilled_hash(ds);

  for (const std::uint64_t seed : cfg.seeds) {
    Model model = build_model(cfg.arch, mcfg, derive_seed(seed, "student-init"));
    model.set_parameters_require_grad(true);
    SgdOptimizer opt(model.parameters(), cfg.lr, 0.9);
    const std::int64_t steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
    const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

    std::int64_t step = 0;
    for (std::int64_t e = 0; e < cfg.epochs; ++e) {
      const std::vector<VideoSample>& epoch_samples =
          cfg.augmentation ? augment_epoch(ds, profiles, box_min, box_max, seed, e)
                           : ds.samples;
      std::vector<std::int64_t> order = all;
      if (N > cfg.batch_size) {
        Rng rng(derive_seed(seed, "student-epoch-" + std::to_string(e)));
        std::shuffle(order.begin(), order.end(), rng);
      }
      for (std::int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
        const auto first = order.begin() + s * cfg.batch_size;
        const auto last =
            order.begin() + std::min<std::int64_t>(N, (s + 1) * cfg.batch_size);
        const std::vector<std::int64_t> idx(first, last);
        opt.set_lr(cosine_lr(cfg.lr, step, total_steps));
        opt.zero_grad();
        Tensor batch_targets =
            cfg.augmentation
                ? soft_targets(epoch_samples, idx, ds.classes)
                : (idx.size() == static_cast<size_t>(N)
                       ? targets
                       : soft_targets(ds.samples, idx, ds.classes));
        Tensor loss = cross_entropy(
            model.forward(stack_videos(epoch_samples, idx), ForwardMode::Train),
            batch_targets);
        const double lv = loss.item();
        if (!std::isfinite(lv))
          throw std::runtime_error("train_student: diverged (non-finite loss) at epoch " +
                                   std::to_string(e));
        loss.backward();
        opt.step();
      }
    }
    model.set_parameters_require_grad(false);
    const double acc = top1_accuracy(model, test);
    report.per_seed_accuracy.push_back(acc);
    if (log) *log << "seed " << seed << " accuracy " << format_double(acc) << '\n';
  }
  finalize_report(report);
  return report;
}

DistilledDataset baseline_random_select(const std::vector<VideoSample>& train,
                                        std::int64_t ipc, std::uint64_t seed) {
  if (train.empty())
    throw std::invalid_argument("baseline_random_select: empty train set");
  std::int64_t classes = 0;
  for (const auto& s : train) classes = std::max<std::int64_t>(classes, s.label + 1);
  DistilledDataset ds = init_synthetic(InitMethod::Real, train, classes, ipc, seed);
  ds.init_method = "random_select";
  return ds;
}

std::vector<VideoSample> resample_frames(const std::vector<VideoSample>& samples,
                                         std::int64_t frames) {
  std::vector<VideoSample> out = samples;
  for (auto& s : out) {
    const auto& sh = s.video.shape();
    const std::int64_t frame_px = sh[1] * sh[2] * sh[3];
    const auto idx = resample_indices(sh[0], frames);
    std::vector<double> px;
    px.reserve(static_cast<size_t>(frames * frame_px));
    const auto d = s.video.data();
    for (const auto t : idx)
      px.insert(px.end(), d.begin() + t * frame_px, d.begin() + (t + 1) * frame_px);
    s.video = Tensor::from_data({frames, sh[1], sh[2], sh[3]}, std::move(px));
  }
  return out;
}

namespace {

struct GroupSplit {
  std::vector<VideoSample> train, val, test;
  std::vector<std::int64_t> members;  // original class ids, sorted
};

GroupSplit filter_classes(const ToyDataset& data, const std::vector<std::int64_t>& members) {
  GroupSplit g;
  g.members = members;
  std::map<std::int64_t, int> remap;
  for (size_t i = 0; i < members.size(); ++i) remap[members[i]] = static_cast<int>(i);
  auto filter = [&](const std::vector<VideoSample>& in, std::vector<VideoSample>& out) {
    for (const auto& s : in) {
      const auto it = remap.find(s.label);
      if (it == remap.end()) continue;
      out.push_back(s);
      out.back().label = it->second;
    }
  };
  filter(data.train, g.train);
  filter(data.val, g.val);
  filter(data.test, g.test);
  return g;
}

}  // namespace

std::vector<AblationRow> run_ablation(const std::string& suite,
                                      const AblationSetup& setup, std::ostream* log) {
  if (setup.data == nullptr || setup.teacher == nullptr)
    throw std::invalid_argument("run_ablation: setup needs data and a teacher");
  const ToyDataset& data = *setup.data;

  std::vector<AblationRow> rows;
  auto add_row = [&](const std::string& name, const DistilledDataset& ds,
                     const EvalConfig& ec) {
    if (log) *log << "[" << suite << "] " << name << '\n';
    rows.push_back({name, train_student(ds, data.test, ec, log)});
  };

  if (suite == "components") {
    // The augmentation component acts in two places: the one-shot paste before
    // label recalibration and the per-epoch paste during student training.
    // Its cells toggle both.
    const struct {
      const char* name;
      bool mask, augment;
    } cells[] = {{"baseline", false, false},
                 {"+tsgf_a", false, true},
                 {"+tsgf_o", true, false},
                 {"both", true, true}};
    for (const auto& cell : cells) {
      DistillConfig dc = setup.distill;
      dc.mask_updates = cell.mask;
      dc.augment = cell.augment;
      EvalConfig ec = setup.eval;
      ec.augmentation = cell.augment;
      add_row(cell.name, distill(data.train, *setup.teacher, dc), ec);
    }
  } else if (suite == "init") {
    for (const auto method : {InitMethod::Real, InitMethod::Noise}) {
      DistillConfig dc = setup.distill;
      dc.init = method;
      add_row(init_method_name(method), distill(data.train, *setup.teacher, dc),
              setup.eval);
    }
  } else if (suite == "ipc") {
    for (const std::int64_t ipc : {1, 5, 10}) {
      DistillConfig dc = setup.distill;
      dc.ipc = ipc;
      add_row("ipc" + std::to_string(ipc), distill(data.train, *setup.teacher, dc),
              setup.eval);
    }
  } else if (suite == "augmentation") {
    {
      DistillConfig dc = setup.distill;
      dc.augment = false;
      add_row("none", distill(data.train, *setup.teacher, dc), setup.eval);
    }
    {
      DistillConfig dc = setup.distill;
      dc.augment = true;
      const auto ds = distill(data.train, *setup.teacher, dc);
      add_row("gated", ds, setup.eval);
      EvalConfig ec = setup.eval;
      ec.augmentation = true;
      add_row("gated+eval", ds, ec);
    }
  } else if (suite == "frames") {
    for (const std::int64_t frames : {1, 4, 8, 16}) {
      const auto train_f = resample_frames(data.train, frames);
      add_row("f" + std::to_string(frames),
              distill(train_f, *setup.teacher, setup.distill), setup.eval);
    }
  } else if (suite == "static_dynamic") {
    // Motion energy per class over the real train split; the median splits
    // the classes into a low-motion and a high-motion group.
    std::map<std::int64_t, std::pair<double, std::int64_t>> acc;
    for (const auto& s : data.train) {
      const auto d = frame_differences(s.video);
      double mean_d = 0.0;
      for (double v : d) mean_d += v;
      mean_d /= static_cast<double>(d.size());
      acc[s.label].first += mean_d;
      acc[s.label].second += 1;
    }
    std::vector<double> energies;
    for (auto& [cls, e] : acc) energies.push_back(e.first / static_cast<double>(e.second));
    const double median = quantile(energies, 0.5);
    std::vector<std::int64_t> low, high;
    for (const auto& [cls, e] : acc)
      (e.first / static_cast<double>(e.second) <= median ? low : high).push_back(cls);
    if (low.empty() || high.empty())
      throw std::runtime_error("run_ablation: motion energies do not split the classes");

    for (const auto& [name, members] :
         {std::pair<std::string, std::vector<std::int64_t>>{"static", low},
          {"dynamic", high}}) {
      const GroupSplit group = filter_classes(data, members);
      MiniC3DConfig mcfg = setup.teacher->config;
      mcfg.classes = static_cast<std::int64_t>(members.size());
      TeacherTrainConfig tcfg = setup.teacher_cfg;
      tcfg.seed = derive_seed(setup.teacher_cfg.seed, "group-" + name);
      Model teacher =
          train_teacher(build_mini_c3d(mcfg, tcfg.seed), group.train, group.val, tcfg)
              .model;
      const auto ds = distill(group.train, teacher, setup.distill);
      if (log) *log << "[" << suite << "] " << name << '\n';
      rows.push_back({name, train_student(ds, group.test, setup.eval, log)});
    }
  } else {
    throw std::invalid_argument("run_ablation: unknown suite '" + suite + "'");
  }
  return rows;
}

std::vector<AblationRow> cross_architecture_eval(const DistilledDataset& ds,
                                                 const std::vector<VideoSample>& test,
                                                 const std::vector<std::string>& kinds,
                                                 const EvalConfig& cfg,
                                                 std::ostream* log) {
  std::vector<AblationRow> rows;
  for (const auto& kind : kinds) {
    EvalConfig ec = cfg;
    ec.arch = kind;
    if (log) *log << "[cross-arch] " << kind << '\n';
    rows.push_back({kind, train_student(ds, test, ec, log)});
  }
  return rows;
}

std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::string out = "name,mean,std,per_seed\n";
  for (const auto& row : rows) {
    out += row.name + ',' + format_double(row.report.mean) + ',' +
           format_double(row.report.stddev);
    for (double v : row.report.per_seed_accuracy) out += ',' + format_double(v);
    out += '\n';
  }
  return out;
}

}  // namespace tsgf
