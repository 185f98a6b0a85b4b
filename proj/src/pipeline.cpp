#include "tsgf/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "tsgf/tensor_io.hpp"
#include "tsgf/util.hpp"

namespace tsgf {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

[[noreturn]] void config_error(const std::string& origin, const std::string& what) {
  throw FormatError("config " + origin + ": " + what);
}

ClassSpec::Shape parse_shape(const std::string& s, const std::string& origin) {
  if (s == "square") return ClassSpec::Shape::Square;
  if (s == "disc") return ClassSpec::Shape::Disc;
  config_error(origin, "unknown shape '" + s + "' (square|disc)");
}

ClassSpec::Motion parse_motion(const std::string& s, const std::string& origin) {
  if (s == "static") return ClassSpec::Motion::Static;
  if (s == "constant") return ClassSpec::Motion::Constant;
  if (s == "oscillate") return ClassSpec::Motion::Oscillate;
  config_error(origin, "unknown motion '" + s + "' (static|constant|oscillate)");
}

void parse_dataset(const json& j, ToySpec& spec, const std::string& origin) {
  spec.frames = j.value("frames", spec.frames);
  spec.channels = j.value("channels", spec.channels);
  spec.height = j.value("height", spec.height);
  spec.width = j.value("width", spec.width);
  spec.noise = j.value("noise", spec.noise);
  spec.train_per_class = j.value("train_per_class", spec.train_per_class);
  spec.val_per_class = j.value("val_per_class", spec.val_per_class);
  spec.test_per_class = j.value("test_per_class", spec.test_per_class);
  if (j.contains("classes")) {
    spec.class_specs.clear();
    for (const auto& c : j.at("classes")) {
      ClassSpec cs;
      cs.shape = parse_shape(c.value("shape", "square"), origin);
      cs.motion = parse_motion(c.value("motion", "static"), origin);
      cs.speed = c.value("speed", 0);
      cs.amplitude = c.value("amplitude", 0);
      cs.period = c.value("period", 8);
      spec.class_specs.push_back(cs);
    }
  }
}

void parse_teacher(const json& j, TeacherTrainConfig& cfg) {
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
  cfg.momentum = j.value("momentum", cfg.momentum);
}

void parse_distill(const json& j, DistillConfig& cfg, const std::string& origin) {
  cfg.iterations = j.value("iterations", cfg.iterations);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.r_bn = j.value("r_bn", cfg.r_bn);
  cfg.ce_weight = j.value("ce_weight", cfg.ce_weight);
  cfg.ipc = j.value("ipc", cfg.ipc);
  cfg.mask_updates = j.value("mask_updates", cfg.mask_updates);
  cfg.augment = j.value("augment", cfg.augment);
  cfg.augment_box_min = j.value("augment_box_min", cfg.augment_box_min);
  cfg.augment_box_max = j.value("augment_box_max", cfg.augment_box_max);
  cfg.momentum = j.value("momentum", cfg.momentum);
  if (j.contains("init")) {
    const auto init = j.at("init").get<std::string>();
    if (init == "real") cfg.init = InitMethod::Real;
    else if (init == "noise") cfg.init = InitMethod::Noise;
    else config_error(origin, "unknown init '" + init + "' (real|noise)");
  }
  if (j.contains("grouping")) {
    const auto g = j.at("grouping").get<std::string>();
    if (g == "per_class") cfg.grouping = DistillConfig::Grouping::PerClass;
    else if (g == "all") cfg.grouping = DistillConfig::Grouping::AllClasses;
    else config_error(origin, "unknown grouping '" + g + "' (per_class|all)");
  }
  if (j.contains("window")) {
    const auto& w = j.at("window");
    cfg.window.k = w.value("k", cfg.window.k);
    if (w.contains("kind")) {
      const auto kind = w.at("kind").get<std::string>();
      if (kind == "uniform") cfg.window.kind = WindowSpec::Kind::Uniform;
      else if (kind == "triangular") cfg.window.kind = WindowSpec::Kind::Triangular;
      else config_error(origin, "unknown window kind '" + kind + "'");
    }
  }
  if (j.contains("epsilon")) {
    const auto& e = j.at("epsilon");
    cfg.epsilon.quantile = e.value("quantile", cfg.epsilon.quantile);
    if (e.contains("absolute") && !e.at("absolute").is_null())
      cfg.epsilon.absolute = e.at("absolute").get<double>();
  }
}

void parse_eval(const json& j, EvalConfig& cfg, std::int64_t& seed_count) {
  cfg.arch = j.value("arch", cfg.arch);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.augmentation = j.value("augmentation", cfg.augmentation);
  if (j.contains("widths")) {
    const auto w = j.at("widths").get<std::vector<std::int64_t>>();
    if (w.size() != 3) throw FormatError("config: widths needs exactly 3 entries");
    std::copy(w.begin(), w.end(), cfg.widths.begin());
  }
  cfg.gru_hidden = j.value("gru_hidden", cfg.gru_hidden);
  seed_count = j.value("seed_count", seed_count);
}

}  // namespace

void finalize_seeds(PipelineConfig& cfg) {
  cfg.dataset.seed = derive_seed(cfg.seed, "dataset");
  cfg.teacher.seed = derive_seed(cfg.seed, "teacher");
  cfg.distill.seed = derive_seed(cfg.seed, "distill");
  if (cfg.eval_seed_count < 1)
    throw FormatError("config: eval seed_count must be >= 1");
  cfg.eval.seeds.clear();
  for (std::int64_t i = 0; i < cfg.eval_seed_count; ++i)
    cfg.eval.seeds.push_back(derive_seed(cfg.seed, "eval-" + std::to_string(i)));
}

PipelineConfig parse_pipeline_config(const std::string& json_text,
                                     const std::string& origin) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    config_error(origin, std::string("not valid JSON: ") + e.what());
  }
  PipelineConfig cfg;
  try {
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("out_dir")) cfg.out_dir = j.at("out_dir").get<std::string>();
    if (j.contains("dataset")) parse_dataset(j.at("dataset"), cfg.dataset, origin);
    if (j.contains("teacher")) parse_teacher(j.at("teacher"), cfg.teacher);
    if (j.contains("distill")) parse_distill(j.at("distill"), cfg.distill, origin);
    if (j.contains("eval")) parse_eval(j.at("eval"), cfg.eval, cfg.eval_seed_count);
  } catch (const json::exception& e) {
    config_error(origin, std::string("bad field: ") + e.what());
  }
  finalize_seeds(cfg);
  return cfg;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  if (!fs::exists(path))
    throw FormatError("config file not found: " + path.string());
  return parse_pipeline_config(read_text_file(path), path.string());
}

std::string pipeline_config_json(const PipelineConfig& cfg) {
  json classes = json::array();
  for (const auto& c : cfg.dataset.class_specs) {
    classes.push_back(
        json{{"shape", c.shape == ClassSpec::Shape::Square ? "square" : "disc"},
             {"motion", c.motion == ClassSpec::Motion::Static
                            ? "static"
                            : (c.motion == ClassSpec::Motion::Constant ? "constant"
                                                                       : "oscillate")},
             {"speed", c.speed},
             {"amplitude", c.amplitude},
             {"period", c.period}});
  }
  json j{{"seed", cfg.seed},
         {"out_dir", cfg.out_dir.string()},
         {"dataset",
          {{"frames", cfg.dataset.frames},
           {"channels", cfg.dataset.channels},
           {"height", cfg.dataset.height},
           {"width", cfg.dataset.width},
           {"noise", cfg.dataset.noise},
           {"train_per_class", cfg.dataset.train_per_class},
           {"val_per_class", cfg.dataset.val_per_class},
           {"test_per_class", cfg.dataset.test_per_class},
           {"classes", classes}}},
         {"teacher", json::parse(cfg.teacher.to_json_string())},
         {"distill", json::parse(cfg.distill.to_json_string())},
         {"eval", json::parse(cfg.eval.to_json_string())}};
  j["eval"].erase("seeds");
  j["eval"]["seed_count"] = cfg.eval_seed_count;
  j["teacher"].erase("seed");
  j["distill"].erase("seed");
  return j.dump(2) + "\n";
}

void save_toy_dataset(const ToyDataset& data, const ToySpec& spec, const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  auto save_split = [&](const std::vector<VideoSample>& split, const std::string& name) {
    const fs::path split_dir = dir / name;
    fs::create_directories(split_dir);
    std::string labels;
    for (const auto& s : split) {
      save_tensor(split_dir / (s.id + ".tsr"), s.video);
      labels += s.id + "," + std::to_string(s.label) + "\n";
    }
    write_text_file(split_dir / "labels.csv", labels);
  };
  save_split(data.train, "train");
  save_split(data.val, "val");
  save_split(data.test, "test");

  json manifest{{"format_version", 1},
                {"counts",
                 {{"train", data.train.size()},
                  {"val", data.val.size()},
                  {"test", data.test.size()}}},
                {"frames", spec.frames},
                {"channels", spec.channels},
                {"height", spec.height},
                {"width", spec.width},
                {"classes", spec.classes()},
                {"noise", spec.noise}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

ToyDataset load_toy_dataset(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json"))
    throw FormatError("no dataset at " + dir.string() + "; run gen-data first");
  ToyDataset data;
  auto load_split = [&](std::vector<VideoSample>& split, const std::string& name) {
    const fs::path split_dir = dir / name;
    std::istringstream lines(read_text_file(split_dir / "labels.csv"));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const auto comma = line.find(',');
      if (comma == std::string::npos)
        throw FormatError("dataset labels line '" + line + "' is malformed");
      VideoSample s;
      s.id = line.substr(0, comma);
      s.label = std::stoi(line.substr(comma + 1));
      s.video = load_tensor(split_dir / (s.id + ".tsr"));
      split.push_back(std::move(s));
    }
  };
  load_split(data.train, "train");
  load_split(data.val, "val");
  load_split(data.test, "test");
  return data;
}

void cmd_gen_data(const PipelineConfig& cfg, std::ostream& out) {
  const ToyDataset data = generate_toy_dataset(cfg.dataset);
  RunPaths paths{cfg.out_dir};
  fs::create_directories(paths.root);
  save_toy_dataset(data, cfg.dataset, paths.data_dir());
  out << "gen-data: " << data.train.size() << " train / " << data.val.size()
      << " val / " << data.test.size() << " test videos -> " << paths.data_dir().string()
      << "\n";
}

namespace {

MiniC3DConfig model_config_for(const PipelineConfig& cfg) {
  MiniC3DConfig mc;
  mc.frames = cfg.dataset.frames;
  mc.channels = cfg.dataset.channels;
  mc.height = cfg.dataset.height;
  mc.width = cfg.dataset.width;
  mc.classes = cfg.dataset.classes();
  mc.widths = cfg.eval.widths;
  mc.gru_hidden = cfg.eval.gru_hidden;
  return mc;
}

Model load_teacher_or_explain(const RunPaths& paths) {
  if (!fs::exists(paths.teacher_ckpt()))
    throw FormatError("no teacher checkpoint at " + paths.teacher_ckpt().string() +
                      "; run train-teacher first");
  return load_checkpoint(paths.teacher_ckpt());
}

ToyDataset load_data_or_explain(const RunPaths& paths) {
  return load_toy_dataset(paths.data_dir());
}

DistilledDataset load_distilled_or_explain(const RunPaths& paths) {
  if (!fs::exists(paths.distilled_dir() / "manifest.json"))
    throw FormatError("no distilled dataset at " + paths.distilled_dir().string() +
                      "; run distill first");
  return load_distilled(paths.distilled_dir());
}

}  // namespace

void cmd_train_teacher(const PipelineConfig& cfg, std::ostream& out) {
  RunPaths paths{cfg.out_dir};
  const ToyDataset data = load_data_or_explain(paths);
  std::ostringstream log;
  TeacherResult result = train_teacher(build_mini_c3d(model_config_for(cfg), cfg.teacher.seed),
                                       data.train, data.val, cfg.teacher, &log);
  save_checkpoint(result.model, paths.teacher_ckpt());
  write_text_file(paths.teacher_log(), log.str());
  json report{{"train_accuracy", result.train_accuracy},
              {"val_accuracy", result.val_accuracy},
              {"hash", model_hash(result.model)},
              {"epochs", cfg.teacher.epochs}};
  write_text_file(paths.teacher_report(), report.dump(2) + "\n");
  out << "train-teacher: train_acc " << format_double(result.train_accuracy)
      << " val_acc " << format_double(result.val_accuracy) << " -> "
      << paths.teacher_ckpt().string() << "\n";
}

void cmd_distill(const PipelineConfig& cfg, std::ostream& out) {
  RunPaths paths{cfg.out_dir};
  const ToyDataset data = load_data_or_explain(paths);
  Model teacher = load_teacher_or_explain(paths);
  std::ostringstream log;
  DistilledDataset ds = distill(data.train, teacher, cfg.distill, &log);
  fs::remove_all(paths.distilled_dir());
  save_distilled(ds, paths.distilled_dir());
  write_text_file(paths.distill_log(), log.str());
  out << "distill: " << ds.samples.size() << " synthetic videos (ipc " << ds.ipc
      << ", " << ds.classes << " classes) -> " << paths.distilled_dir().string() << "\n"
      << "distill: set hash " << distilled_hash(ds) << "\n";
}

void cmd_evaluate(const PipelineConfig& cfg, bool cross_arch, std::ostream& out) {
  RunPaths paths{cfg.out_dir};
  const ToyDataset data = load_data_or_explain(paths);
  const DistilledDataset ds = load_distilled_or_explain(paths);

  if (fs::exists(paths.teacher_ckpt())) {
    const Model teacher = load_checkpoint(paths.teacher_ckpt());
    if (!ds.teacher_hash.empty() && model_hash(teacher) != ds.teacher_hash)
      out << "warning: distilled set was built by teacher " << ds.teacher_hash
          << " but the current checkpoint hashes to " << model_hash(teacher) << "\n";
  }

  const EvalReport report = train_student(ds, data.test, cfg.eval);
  json rj{{"arch", cfg.eval.arch},
          {"mean", report.mean},
          {"std", report.stddev},
          {"per_seed", report.per_seed_accuracy},
          {"config_hash", report.config_hash},
          {"distilled_hash", report.distilled_hash}};
  write_text_file(paths.eval_report_json(), rj.dump(2) + "\n");
  std::vector<AblationRow> rows{{cfg.eval.arch, report}};
  write_text_file(paths.eval_report_csv(), ablation_csv(rows));
  out << "evaluate: " << cfg.eval.arch << " mean " << format_double(report.mean)
      << " std " << format_double(report.stddev) << "\n";

  if (cross_arch) {
    const auto table = cross_architecture_eval(
        ds, data.test, {"mini_c3d", "conv2d_temporal_pool", "conv2d_gru"}, cfg.eval);
    write_text_file(paths.cross_arch_csv(), ablation_csv(table));
    for (const auto& row : table)
      out << "evaluate: " << row.name << " mean " << format_double(row.report.mean)
          << " std " << format_double(row.report.stddev) << "\n";
  }
}

void cmd_ablate(const PipelineConfig& cfg, const std::string& suite, std::ostream& out) {
  RunPaths paths{cfg.out_dir};
  const ToyDataset data = load_data_or_explain(paths);
  Model teacher = load_teacher_or_explain(paths);
  AblationSetup setup;
  setup.spec = cfg.dataset;
  setup.data = &data;
  setup.teacher = &teacher;
  setup.teacher_cfg = cfg.teacher;
  setup.distill = cfg.distill;
  setup.eval = cfg.eval;
  const auto rows = run_ablation(suite, setup);
  const std::string csv = ablation_csv(rows);
  write_text_file(paths.ablation_csv_path(suite), csv);
  out << "ablate " << suite << ":\n" << csv;
}

void cmd_run_all(const PipelineConfig& cfg, bool cross_arch, std::ostream& out) {
  cmd_gen_data(cfg, out);
  cmd_train_teacher(cfg, out);
  cmd_distill(cfg, out);
  cmd_evaluate(cfg, cross_arch, out);

  RunPaths paths{cfg.out_dir};
  const DistilledDataset ds = load_distilled_or_explain(paths);
  json summary{{"seed", cfg.seed},
               {"teacher_hash", ds.teacher_hash},
               {"distilled_hash", distilled_hash(ds)},
               {"config", json::parse(pipeline_config_json(cfg))}};
  write_text_file(paths.summary(), summary.dump(2) + "\n");
  out << "run-all: summary -> " << paths.summary().string() << "\n";
}

void cmd_inspect_saliency(const fs::path& video_path, const WindowSpec& window,
                          const EpsilonRule& rule, std::ostream& out) {
  if (!fs::exists(video_path))
    throw FormatError("no tensor file at " + video_path.string());
  const Tensor video = load_tensor(video_path);
  if (video.rank() != 4)
    throw FormatError("inspect-saliency: expected a [T,C,H,W] tensor, got " +
                      shape_str(video.shape()));
  const SaliencyProfile p = saliency_profile(video, window, rule);
  out << "frame,d,s,mask\n";
  for (size_t t = 0; t < p.d.size(); ++t)
    out << t << ',' << format_double(p.d[t]) << ',' << format_double(p.s[t]) << ','
        << format_double(p.mask[t]) << "\n";
  out << "epsilon," << format_double(p.epsilon) << "\n";
}

}  // namespace tsgf
