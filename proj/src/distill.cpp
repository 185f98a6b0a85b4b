#include "tsgf/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include <json.hpp>

#include "tsgf/util.hpp"

namespace tsgf {

namespace {

using nlohmann::json;

json window_json(const WindowSpec& w) {
  return json{{"k", w.k},
              {"kind", w.kind == WindowSpec::Kind::Uniform ? "uniform" : "triangular"}};
}

json epsilon_json(const EpsilonRule& e) {
  json j{{"quantile", e.quantile}};
  if (e.absolute) j["absolute"] = *e.absolute;
  else j["absolute"] = nullptr;
  return j;
}

void throw_if_nonfinite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw std::runtime_error(what);
}

}  // namespace

void DistillConfig::validate() const {
  if (iterations < 1) throw std::invalid_argument("DistillConfig: K must be >= 1");
  if (!(lr > 0.0)) throw std::invalid_argument("DistillConfig: learning rate must be > 0");
  if (r_bn < 0.0) throw std::invalid_argument("DistillConfig: r_bn must be >= 0");
  if (ce_weight < 0.0) throw std::invalid_argument("DistillConfig: ce_weight must be >= 0");
  if (ipc < 1) throw std::invalid_argument("DistillConfig: IPC must be >= 1");
  if (!(augment_box_min > 0.0) || augment_box_min > augment_box_max ||
      augment_box_max > 1.0)
    throw std::invalid_argument(
        "DistillConfig: augment box ratios must satisfy 0 < min <= max <= 1");
  window.weights();  // throws on a bad window
}

std::string DistillConfig::to_json_string() const {
  json j{{"iterations", iterations},
         {"lr", lr},
         {"r_bn", r_bn},
         {"ce_weight", ce_weight},
         {"window", window_json(window)},
         {"epsilon", epsilon_json(epsilon)},
         {"init", init_method_name(init)},
         {"ipc", ipc},
         {"grouping", grouping == Grouping::PerClass ? "per_class" : "all"},
         {"mask_updates", mask_updates},
         {"augment", augment},
         {"augment_box_min", augment_box_min},
         {"augment_box_max", augment_box_max},
         {"momentum", momentum},
         {"seed", seed}};
  return j.dump();
}

void TeacherTrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("TeacherTrainConfig: epochs must be >= 1");
  if (!(lr > 0.0))
    throw std::invalid_argument("TeacherTrainConfig: learning rate must be > 0");
  if (batch_size < 1)
    throw std::invalid_argument("TeacherTrainConfig: batch size must be >= 1");
  if (weight_decay < 0.0)
    throw std::invalid_argument("TeacherTrainConfig: weight decay must be >= 0");
}

std::string TeacherTrainConfig::to_json_string() const {
  return json{{"epochs", epochs},
              {"lr", lr},
              {"batch_size", batch_size},
              {"weight_decay", weight_decay},
              {"momentum", momentum},
              {"seed", seed}}
      .dump();
}

SgdOptimizer::SgdOptimizer(std::vector<Tensor> params, double lr, double momentum,
                           double weight_decay)
    : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
  vel_.resize(params_.size());
  for (size_t i = 0; i < params_.size(); ++i)
    vel_[i].assign(static_cast<size_t>(params_[i].numel()), 0.0);
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void SgdOptimizer::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    auto p = params_[i].data();
    if (!params_[i].has_grad()) continue;
    const auto g = params_[i].grad();
    auto& v = vel_[i];
    for (size_t j = 0; j < p.size(); ++j) {
      const double grad = g[j] + weight_decay_ * p[j];
      v[j] = momentum_ * v[j] + grad;
      p[j] -= lr_ * v[j];
    }
  }
}

double cosine_lr(double lr0, std::int64_t step, std::int64_t total) {
  if (total <= 1) return lr0;
  const double t = static_cast<double>(step) / static_cast<double>(total - 1);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * std::min(1.0, t)));
}

Tensor stack_videos(const std::vector<VideoSample>& samples,
                    const std::vector<std::int64_t>& indices) {
  if (indices.empty()) throw std::invalid_argument("stack_videos: empty index list");
  const auto& vs = samples.at(static_cast<size_t>(indices[0])).video.shape();
  const std::int64_t B = static_cast<std::int64_t>(indices.size());
  Tensor batch = Tensor::zeros({B, vs[0], vs[1], vs[2], vs[3]});
  auto out = batch.data();
  const std::int64_t n = samples[static_cast<size_t>(indices[0])].video.numel();
  for (std::int64_t b = 0; b < B; ++b) {
    const auto& v = samples.at(static_cast<size_t>(indices[static_cast<size_t>(b)])).video;
    if (v.shape() != vs)
      throw ShapeError("stack_videos: mixed shapes " + shape_str(v.shape()) + " vs " +
                       shape_str(vs));
    const auto src = v.data();
    std::copy(src.begin(), src.end(), out.begin() + b * n);
  }
  return batch;
}

Tensor hard_targets(const std::vector<VideoSample>& samples,
                    const std::vector<std::int64_t>& indices, std::int64_t classes) {
  Tensor t = Tensor::zeros({static_cast<std::int64_t>(indices.size()), classes});
  auto d = t.data();
  for (size_t b = 0; b < indices.size(); ++b) {
    const int label = samples.at(static_cast<size_t>(indices[b])).label;
    if (label < 0 || label >= classes)
      throw std::invalid_argument("hard_targets: label " + std::to_string(label) +
                                  " outside 0.." + std::to_string(classes - 1));
    d[static_cast<std::int64_t>(b) * classes + label] = 1.0;
  }
  return t;
}

Tensor soft_targets(const std::vector<VideoSample>& samples,
                    const std::vector<std::int64_t>& indices, std::int64_t classes) {
  Tensor t = Tensor::zeros({static_cast<std::int64_t>(indices.size()), classes});
  auto d = t.data();
  for (size_t b = 0; b < indices.size(); ++b) {
    const auto& s = samples.at(static_cast<size_t>(indices[b]));
    auto row = d.subspan(b * static_cast<size_t>(classes), static_cast<size_t>(classes));
    if (s.soft_label.empty()) {
      row[static_cast<size_t>(s.label)] = 1.0;
    } else {
      if (s.soft_label.size() != static_cast<size_t>(classes))
        throw std::invalid_argument("soft_targets: label width mismatch for " + s.id);
      std::copy(s.soft_label.begin(), s.soft_label.end(), row.begin());
    }
  }
  return t;
}

double top1_accuracy(Model& model, const std::vector<VideoSample>& samples) {
  if (samples.empty()) throw std::invalid_argument("top1_accuracy: no samples");
  const std::int64_t C = model.config.classes;
  constexpr std::int64_t kChunk = 32;
  std::int64_t hits = 0;
  for (size_t start = 0; start < samples.size(); start += kChunk) {
    std::vector<std::int64_t> idx;
    for (size_t i = start; i < std::min(samples.size(), start + kChunk); ++i)
      idx.push_back(static_cast<std::int64_t>(i));
    const Tensor logits = model.forward(stack_videos(samples, idx), ForwardMode::Eval);
    const auto d = logits.data();
    for (size_t b = 0; b < idx.size(); ++b) {
      const auto row = d.subspan(b * static_cast<size_t>(C), static_cast<size_t>(C));
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      hits += (best == samples[static_cast<size_t>(idx[b])].label);
    }
  }
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

std::string model_hash(const Model& model) {
  std::uint64_t h = fnv1a(kind_name(model.kind));
  for (const auto& [name, tensor] : model.named_tensors()) {
    h = fnv1a(name, h);
    const auto d = tensor.data();
    h = fnv1a(d.data(), d.size() * sizeof(double), h);
  }
  return hash_hex(h);
}

Model build_model(std::string_view kind, const MiniC3DConfig& config, std::uint64_t seed) {
  if (kind == "mini_c3d") return build_mini_c3d(config, seed);
  return build_alt_architecture(kind, config, seed);
}

TeacherResult train_teacher(Model model, const std::vector<VideoSample>& train,
                            const std::vector<VideoSample>& val,
                            const TeacherTrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (train.empty()) throw std::invalid_argument("train_teacher: empty train set");

  model.set_parameters_require_grad(true);
  SgdOptimizer opt(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay);
  const std::int64_t N = static_cast<std::int64_t>(train.size());
  const std::int64_t steps_per_epoch = (N + cfg.batch_size - 1) / cfg.batch_size;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  TeacherResult result;
  if (log) *log << "epoch,mean_loss,lr\n";
  std::int64_t step = 0;
  for (std::int64_t e = 0; e < cfg.epochs; ++e) {
    std::vector<std::int64_t> order(static_cast<size_t>(N));
    for (std::int64_t i = 0; i < N; ++i) order[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(cfg.seed, "teacher-epoch-" + std::to_string(e)));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    double last_lr = cfg.lr;
    for (std::int64_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const auto first = order.begin() + s * cfg.batch_size;
      const auto last = order.begin() + std::min<std::int64_t>(N, (s + 1) * cfg.batch_size);
      const std::vector<std::int64_t> idx(first, last);
      last_lr = cosine_lr(cfg.lr, step, total_steps);
      opt.set_lr(last_lr);
      opt.zero_grad();
      Tensor loss = cross_entropy(model.forward(stack_videos(train, idx), ForwardMode::Train),
                                  hard_targets(train, idx, model.config.classes));
      const double lv = loss.item();
      throw_if_nonfinite(lv, "train_teacher: diverged (non-finite loss) at epoch " +
                                 std::to_string(e));
      loss.backward();
      opt.step();
      epoch_loss += lv;
    }
    epoch_loss /= static_cast<double>(steps_per_epoch);
    result.epoch_loss.push_back(epoch_loss);
    if (log)
      *log << e << ',' << format_double(epoch_loss) << ',' << format_double(last_lr)
           << '\n';
  }

  model.set_parameters_require_grad(false);
  result.train_accuracy = top1_accuracy(model, train);
  result.val_accuracy = val.empty() ? result.train_accuracy : top1_accuracy(model, val);
  if (log)
    *log << "# final train_acc=" << format_double(result.train_accuracy)
         << " val_acc=" << format_double(result.val_accuracy) << '\n';
  result.model = std::move(model);
  return result;
}

Tensor regularization_loss(const BatchStats& stats, const Model& teacher) {
  if (stats.mean.size() != teacher.bn.size() || stats.var.size() != teacher.bn.size())
    throw std::invalid_argument("regularization_loss: captured " +
                                std::to_string(stats.mean.size()) + " layers, teacher has " +
                                std::to_string(teacher.bn.size()));
  Tensor total = Tensor::scalar(0.0);
  for (size_t l = 0; l < teacher.bn.size(); ++l) {
    const auto& layer = teacher.bn[l];
    if (stats.mean[l].shape() != layer.running_mean.shape())
      throw std::invalid_argument("regularization_loss: channel mismatch at BN layer " +
                                  std::to_string(l));
    total = add(total, l2norm(sub(stats.mean[l], layer.running_mean)));
    total = add(total, l2norm(sub(stats.var[l], layer.running_var)));
  }
  return total;
}

DistillLossParts distill_loss(const Tensor& x, const Tensor& y_onehot, Model& teacher,
                              double r_bn) {
  BatchStats stats;
  Tensor logits = teacher.forward(x, ForwardMode::Capture, &stats);
  DistillLossParts parts;
  parts.ce = cross_entropy(logits, y_onehot);
  parts.reg = regularization_loss(stats, teacher);
  parts.total = r_bn == 0.0 ? parts.ce : add(parts.ce, mul_scalar(parts.reg, r_bn));
  return parts;
}

namespace {

// [T,C,H,W] view copy of video b inside a [B,T,C,H,W] buffer.
Tensor video_of(const Tensor& batch, std::int64_t b) {
  const auto& sh = batch.shape();
  const std::int64_t n = sh[1] * sh[2] * sh[3] * sh[4];
  const auto d = batch.data();
  std::vector<double> px(d.begin() + b * n, d.begin() + (b + 1) * n);
  return Tensor::from_data({sh[1], sh[2], sh[3], sh[4]}, std::move(px));
}

}  // namespace

DistilledDataset distill(const std::vector<VideoSample>& train, Model& teacher,
                         const DistillConfig& cfg, std::ostream* log,
                         const DistillObserver& observer) {
  cfg.validate();
  const std::int64_t classes = teacher.config.classes;
  teacher.set_parameters_require_grad(false);

  DistilledDataset ds =
      init_synthetic(cfg.init, train, classes, cfg.ipc, derive_seed(cfg.seed, "init"));

  // Working buffers, one per batch group.
  struct Batch {
    std::int64_t start = 0;  // first sample index in ds order
    Tensor x;                // [B,T,C,H,W], the optimized pixels
    Tensor y;                // one-hot targets
    std::vector<double> vel;
  };
  std::vector<Batch> batches;
  const std::int64_t total = classes * cfg.ipc;
  auto make_batch = [&](std::int64_t start, std::int64_t count) {
    std::vector<std::int64_t> idx(static_cast<size_t>(count));
    for (std::int64_t i = 0; i < count; ++i) idx[static_cast<size_t>(i)] = start + i;
    Batch b;
    b.start = start;
    b.x = stack_videos(ds.samples, idx);
    b.y = hard_targets(ds.samples, idx, classes);
    if (cfg.momentum) b.vel.assign(static_cast<size_t>(b.x.numel()), 0.0);
    batches.push_back(std::move(b));
  };
  if (cfg.grouping == DistillConfig::Grouping::PerClass) {
    for (std::int64_t c = 0; c < classes; ++c) make_batch(c * cfg.ipc, cfg.ipc);
  } else {
    make_batch(0, total);
  }

  if (log) *log << "iteration,ce,reg,mean_mask,min_pixel,max_pixel\n";

  for (std::int64_t k = 0; k < cfg.iterations; ++k) {
    IterationStats st;
    st.iteration = k;
    st.min_pixel = 1.0;
    st.max_pixel = 0.0;
    double mask_sum = 0.0;
    std::int64_t mask_count = 0;

    for (auto& batch : batches) {
      const auto& sh = batch.x.shape();
      const std::int64_t B = sh[0], T = sh[1];
      const std::int64_t frame_px = sh[2] * sh[3] * sh[4];
      const std::int64_t video_px = T * frame_px;

      batch.x.set_requires_grad(true);
      batch.x.zero_grad();
      DistillLossParts parts = distill_loss(batch.x, batch.y, teacher, cfg.r_bn);
      Tensor objective =
          cfg.ce_weight == 1.0
              ? parts.total
              : (cfg.r_bn == 0.0
                     ? mul_scalar(parts.ce, cfg.ce_weight)
                     : add(mul_scalar(parts.ce, cfg.ce_weight),
                           mul_scalar(parts.reg, cfg.r_bn)));
      const double ce_v = parts.ce.item();
      const double reg_v = parts.reg.item();
      throw_if_nonfinite(ce_v + reg_v, "distill: non-finite loss at iteration " +
                                           std::to_string(k));
      objective.backward();
      batch.x.set_requires_grad(false);
      st.ce += ce_v;
      st.reg += reg_v;

      // Saliency always reflects the CURRENT pixels, never the init.
      std::vector<std::vector<double>> masks(static_cast<size_t>(B));
      for (std::int64_t b = 0; b < B; ++b) {
        if (cfg.mask_updates) {
          masks[static_cast<size_t>(b)] =
              saliency_profile(video_of(batch.x, b), cfg.window, cfg.epsilon).mask;
        } else {
          masks[static_cast<size_t>(b)].assign(static_cast<size_t>(T), 1.0);
        }
        for (double m : masks[static_cast<size_t>(b)]) mask_sum += m;
        mask_count += T;
      }

      DistillObservation obs;
      if (observer) {
        obs.iteration = k;
        obs.batch_start = batch.start;
        obs.masks = masks;
        obs.before = batch.x.detach();
      }

      const auto g = batch.x.grad();
      auto px = batch.x.data();
      for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t t = 0; t < T; ++t) {
          const double m = masks[static_cast<size_t>(b)][static_cast<size_t>(t)];
          const std::int64_t off = b * video_px + t * frame_px;
          for (std::int64_t i = off; i < off + frame_px; ++i) {
            double step_g = g[i];
            if (cfg.momentum) {
              auto& v = batch.vel[static_cast<size_t>(i)];
              v = 0.9 * v + step_g;
              step_g = v;
            }
            throw_if_nonfinite(step_g, "distill: non-finite gradient at iteration " +
                                           std::to_string(k));
            px[i] = std::clamp(px[i] - cfg.lr * m * step_g, 0.0, 1.0);
          }
        }
      for (double v : px) {
        st.min_pixel = std::min(st.min_pixel, v);
        st.max_pixel = std::max(st.max_pixel, v);
      }

      if (observer) {
        obs.after = batch.x.detach();
        observer(obs);
      }
    }

    st.mean_mask = mask_count > 0 ? mask_sum / static_cast<double>(mask_count) : 0.0;
    if (log)
      *log << st.iteration << ',' << format_double(st.ce) << ',' << format_double(st.reg)
           << ',' << format_double(st.mean_mask) << ',' << format_double(st.min_pixel)
           << ',' << format_double(st.max_pixel) << '\n';
  }

  for (const auto& batch : batches) {
    const auto& sh = batch.x.shape();
    for (std::int64_t b = 0; b < sh[0]; ++b)
      ds.samples[static_cast<size_t>(batch.start + b)].video = video_of(batch.x, b);
  }

  if (cfg.augment && classes > 1) {
    // Partners come from the pre-augmentation snapshot so augmentation order
    // cannot leak augmented pixels into later partners.
    std::vector<Tensor> snapshot;
    snapshot.reserve(ds.samples.size());
    for (const auto& s : ds.samples) snapshot.push_back(s.video);
    Rng pick(derive_seed(cfg.seed, "augment"));
    for (auto& s : ds.samples) {
      const auto profile = saliency_profile(s.video, cfg.window, cfg.epsilon);
      std::int64_t pc = uniform_int(pick, 0, classes - 2);
      if (pc >= s.label) ++pc;
      const std::int64_t pk = uniform_int(pick, 0, cfg.ipc - 1);
      AugmentSpec aspec;
      aspec.box_ratio_min = cfg.augment_box_min;
      aspec.box_ratio_max = cfg.augment_box_max;
      aspec.seed = derive_seed(cfg.seed, "augment-" + s.id);
      s.video = gated_augment(s.video, profile.s, profile.epsilon,
                              snapshot[static_cast<size_t>(pc * cfg.ipc + pk)], aspec);
    }
  }

  ds.profiles.clear();
  for (const auto& s : ds.samples)
    ds.profiles.push_back(saliency_profile(s.video, cfg.window, cfg.epsilon));

  ds.teacher_hash = model_hash(teacher);
  ds.config_json = cfg.to_json_string();
  return recalibrate_labels(std::move(ds), teacher);
}

DistilledDataset recalibrate_labels(DistilledDataset ds, Model& teacher) {
  if (ds.samples.empty()) return ds;
  std::vector<std::int64_t> idx(ds.samples.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<std::int64_t>(i);
  const Tensor logits = teacher.forward(stack_videos(ds.samples, idx), ForwardMode::Eval);
  const Tensor probs = softmax(logits);
  const auto d = probs.data();
  const std::int64_t C = teacher.config.classes;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    const auto row = d.subspan(i * static_cast<size_t>(C), static_cast<size_t>(C));
    ds.samples[i].soft_label.assign(row.begin(), row.end());
  }
  ds.recalibrated = true;
  return ds;
}

}  // namespace tsgf
