#include "tsgf/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "tsgf/tensor_io.hpp"
#include "tsgf/util.hpp"

namespace tsgf {

namespace {

using nlohmann::json;

constexpr double kBackground = 0.1;
constexpr double kForeground = 0.9;

std::int64_t square_side(const ToySpec& spec) {
  return std::max<std::int64_t>(
      3, std::llround(0.3 * static_cast<double>(std::min(spec.height, spec.width))));
}

std::int64_t disc_radius(const ToySpec& spec) {
  return std::max<std::int64_t>(
      2, std::llround(0.14 * static_cast<double>(std::min(spec.height, spec.width))));
}

std::int64_t motion_offset(const ClassSpec& cs, std::int64_t t) {
  switch (cs.motion) {
    case ClassSpec::Motion::Static: return 0;
    case ClassSpec::Motion::Constant: return cs.speed * t;
    case ClassSpec::Motion::Oscillate:
      return std::llround(static_cast<double>(cs.amplitude) *
                          std::sin(2.0 * std::numbers::pi * static_cast<double>(t) /
                                   static_cast<double>(cs.period)));
  }
  return 0;
}

std::int64_t wrap(std::int64_t v, std::int64_t m) { return ((v % m) + m) % m; }

void validate_spec(const ToySpec& spec) {
  if (spec.class_specs.empty()) throw std::invalid_argument("ToySpec: no classes");
  if (spec.frames < 1 || spec.channels < 1)
    throw std::invalid_argument("ToySpec: frames and channels must be >= 1");
  if (spec.train_per_class < 1)
    throw std::invalid_argument("ToySpec: zero train samples per class");
  if (spec.val_per_class < 0 || spec.test_per_class < 0)
    throw std::invalid_argument("ToySpec: negative split size");
  if (spec.noise < 0.0) throw std::invalid_argument("ToySpec: negative noise level");

  const auto side = square_side(spec);
  const auto radius = disc_radius(spec);
  for (const auto& cs : spec.class_specs) {
    if (cs.shape == ClassSpec::Shape::Square &&
        (spec.height < side || spec.width < side))
      throw std::invalid_argument("ToySpec: resolution too small for the square shape");
    if (cs.shape == ClassSpec::Shape::Disc &&
        (spec.width < 2 * radius + 1 || spec.height < 2 * radius + 1))
      throw std::invalid_argument("ToySpec: resolution too small for the disc shape");
    if (cs.motion == ClassSpec::Motion::Oscillate && cs.period < 1)
      throw std::invalid_argument("ToySpec: oscillation period must be >= 1");
  }

  // The dataset exists to force temporal reasoning: demand at least one pair
  // of classes with the same shape but different motion.
  auto signature = [](const ClassSpec& c) {
    return std::tuple(c.motion, c.motion == ClassSpec::Motion::Constant ? c.speed : 0,
                      c.motion == ClassSpec::Motion::Oscillate ? c.amplitude : 0,
                      c.motion == ClassSpec::Motion::Oscillate ? c.period : 0);
  };
  for (size_t i = 0; i < spec.class_specs.size(); ++i)
    for (size_t j = i + 1; j < spec.class_specs.size(); ++j)
      if (spec.class_specs[i].shape == spec.class_specs[j].shape &&
          signature(spec.class_specs[i]) != signature(spec.class_specs[j]))
        return;
  throw std::invalid_argument(
      "ToySpec: no motion-only class pair (two classes sharing a shape family "
      "must differ only in motion)");
}

VideoSample render_sample(const ToySpec& spec, int label, const std::string& id) {
  const auto& cs = spec.class_specs[static_cast<size_t>(label)];
  const std::int64_t T = spec.frames, C = spec.channels, H = spec.height, W = spec.width;
  Rng rng(derive_seed(spec.seed, id));

  // Fixed per-sample geometry; only the wrap-axis offset moves with t.
  const auto side = square_side(spec);
  const auto radius = disc_radius(spec);
  std::int64_t row0 = 0, col0 = 0;
  if (cs.shape == ClassSpec::Shape::Square) {
    row0 = uniform_int(rng, 0, H - side);  // fully inside vertically
    col0 = uniform_int(rng, 0, W - 1);     // wraps horizontally
  } else {
    row0 = uniform_int(rng, 0, H - 1);               // wraps vertically
    col0 = uniform_int(rng, radius, W - 1 - radius);  // fully inside horizontally
  }

  std::vector<double> px(static_cast<size_t>(T * C * H * W), kBackground);
  for (std::int64_t t = 0; t < T; ++t) {
    const auto off = motion_offset(cs, t);
    double* frame = px.data() + t * C * H * W;
    auto paint = [&](std::int64_t y, std::int64_t x) {
      for (std::int64_t c = 0; c < C; ++c) frame[(c * H + y) * W + x] = kForeground;
    };
    if (cs.shape == ClassSpec::Shape::Square) {
      for (std::int64_t dy = 0; dy < side; ++dy)
        for (std::int64_t dx = 0; dx < side; ++dx)
          paint(row0 + dy, wrap(col0 + off + dx, W));
    } else {
      for (std::int64_t dy = -radius; dy <= radius; ++dy)
        for (std::int64_t dx = -radius; dx <= radius; ++dx)
          if (dy * dy + dx * dx <= radius * radius)
            paint(wrap(row0 + off + dy, H), col0 + dx);
    }
  }
  if (spec.noise > 0.0)
    for (auto& v : px)
      v = std::clamp(v + uniform(rng, -spec.noise, spec.noise), 0.0, 1.0);

  VideoSample s;
  s.video = Tensor::from_data({T, C, H, W}, std::move(px));
  s.label = label;
  s.id = id;
  return s;
}

void check_pixel_range(const Tensor& video, const std::string& who) {
  for (double v : video.data())
    if (v < 0.0 || v > 1.0)
      throw std::logic_error(who + ": pixel outside [0,1]");
}

}  // namespace

ToySpec ToySpec::defaults() {
  ToySpec spec;
  using S = ClassSpec::Shape;
  using M = ClassSpec::Motion;
  spec.class_specs = {
      {.shape = S::Square, .motion = M::Constant, .speed = 2},
      {.shape = S::Square, .motion = M::Constant, .speed = -2},
      {.shape = S::Disc, .motion = M::Constant, .speed = 2},
      {.shape = S::Disc, .motion = M::Constant, .speed = -2},
      {.shape = S::Square, .motion = M::Static},
      {.shape = S::Square, .motion = M::Oscillate, .amplitude = 3, .period = 8},
      {.shape = S::Disc, .motion = M::Static},
      {.shape = S::Disc, .motion = M::Oscillate, .amplitude = 3, .period = 8},
  };
  return spec;
}

ToyDataset generate_toy_dataset(const ToySpec& spec) {
  validate_spec(spec);
  ToyDataset ds;
  struct Split {
    const char* name;
    std::int64_t count;
    std::vector<VideoSample>* out;
  };
  for (auto& [name, count, out] : std::initializer_list<Split>{
           {"train", spec.train_per_class, &ds.train},
           {"val", spec.val_per_class, &ds.val},
           {"test", spec.test_per_class, &ds.test}}) {
    for (std::int64_t c = 0; c < spec.classes(); ++c)
      for (std::int64_t i = 0; i < count; ++i) {
        const std::string id = "toy-" + std::string(name) + "-c" + std::to_string(c) +
                               "-" + std::to_string(i);
        out->push_back(render_sample(spec, static_cast<int>(c), id));
        check_pixel_range(out->back().video, id);
      }
  }
  return ds;
}

const char* init_method_name(InitMethod m) {
  return m == InitMethod::Real ? "real" : "noise";
}

DistilledDataset init_synthetic(InitMethod method, const std::vector<VideoSample>& train,
                                std::int64_t classes, std::int64_t ipc,
                                std::uint64_t seed) {
  if (ipc < 1) throw std::invalid_argument("init_synthetic: IPC must be >= 1");
  if (classes < 1) throw std::invalid_argument("init_synthetic: classes must be >= 1");
  if (train.empty()) throw std::invalid_argument("init_synthetic: empty train set");

  DistilledDataset ds;
  ds.ipc = ipc;
  ds.classes = classes;
  ds.init_method = init_method_name(method);
  const auto shape = train.front().video.shape();

  for (std::int64_t c = 0; c < classes; ++c) {
    std::vector<size_t> pool;
    for (size_t i = 0; i < train.size(); ++i)
      if (train[i].label == c) pool.push_back(i);
    if (method == InitMethod::Real && static_cast<std::int64_t>(pool.size()) < ipc)
      throw std::invalid_argument("init_synthetic: class " + std::to_string(c) +
                                  " has " + std::to_string(pool.size()) +
                                  " samples, need IPC=" + std::to_string(ipc));
    Rng rng(derive_seed(seed, "init-c" + std::to_string(c)));
    std::shuffle(pool.begin(), pool.end(), rng);

    for (std::int64_t k = 0; k < ipc; ++k) {
      VideoSample s;
      s.label = static_cast<int>(c);
      s.id = "synth-c" + std::to_string(c) + "-" + std::to_string(k);
      s.soft_label.assign(static_cast<size_t>(classes), 0.0);
      s.soft_label[static_cast<size_t>(c)] = 1.0;
      if (method == InitMethod::Real) {
        s.video = train[pool[static_cast<size_t>(k)]].video.detach();
      } else {
        std::int64_t n = 1;
        for (auto e : shape) n *= e;
        std::vector<double> px(static_cast<size_t>(n));
        for (auto& v : px) v = uniform(rng, 0.0, 1.0);
        s.video = Tensor::from_data(shape, std::move(px));
      }
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

namespace {

json profile_to_json(const SaliencyProfile& p) {
  return json{{"d", p.d}, {"s", p.s}, {"epsilon", p.epsilon}, {"mask", p.mask}};
}

SaliencyProfile profile_from_json(const json& j) {
  SaliencyProfile p;
  p.d = j.at("d").get<std::vector<double>>();
  p.s = j.at("s").get<std::vector<double>>();
  p.epsilon = j.at("epsilon").get<double>();
  p.mask = j.at("mask").get<std::vector<double>>();
  return p;
}

void check_soft_label(const std::vector<double>& soft, const std::string& who) {
  if (soft.empty()) return;
  double total = 0.0;
  for (double v : soft) total += v;
  if (std::abs(total - 1.0) > 1e-6)
    throw FormatError(who + ": soft label sums to " + std::to_string(total));
}

}  // namespace

void save_distilled(const DistilledDataset& ds, const std::filesystem::path& dir) {
  if (ds.samples.size() != static_cast<size_t>(ds.ipc * ds.classes))
    throw std::invalid_argument("save_distilled: |S| != IPC * classes");
  std::filesystem::create_directories(dir);

  json manifest;
  manifest["format_version"] = 1;
  manifest["ipc"] = ds.ipc;
  manifest["classes"] = ds.classes;
  manifest["shape"] = ds.samples.front().video.shape();
  manifest["teacher_hash"] = ds.teacher_hash;
  manifest["init_method"] = ds.init_method;
  manifest["recalibrated"] = ds.recalibrated;
  manifest["config"] = ds.config_json;

  json samples = json::array();
  for (const auto& s : ds.samples) {
    check_soft_label(s.soft_label, "save_distilled " + s.id);
    const std::string file = s.id + ".tsr";
    save_tensor(dir / file, s.video);
    samples.push_back(json{{"id", s.id},
                           {"label", s.label},
                           {"file", file},
                           {"soft_label", s.soft_label},
                           {"hash", hash_hex(hash_file(dir / file))}});
  }
  manifest["samples"] = std::move(samples);

  json profiles = json::array();
  for (const auto& p : ds.profiles) profiles.push_back(profile_to_json(p));
  manifest["profiles"] = std::move(profiles);

  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

DistilledDataset load_distilled(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw FormatError("load_distilled: no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(read_text_file(manifest_path));
  } catch (const json::exception& e) {
    throw FormatError("load_distilled: corrupt manifest: " + std::string(e.what()));
  }

  DistilledDataset ds;
  try {
    ds.ipc = manifest.at("ipc").get<std::int64_t>();
    ds.classes = manifest.at("classes").get<std::int64_t>();
    ds.teacher_hash = manifest.at("teacher_hash").get<std::string>();
    ds.init_method = manifest.at("init_method").get<std::string>();
    ds.recalibrated = manifest.at("recalibrated").get<bool>();
    ds.config_json = manifest.at("config").get<std::string>();
    const auto shape = manifest.at("shape").get<Shape>();

    for (const auto& e : manifest.at("samples")) {
      VideoSample s;
      s.id = e.at("id").get<std::string>();
      s.label = e.at("label").get<int>();
      s.soft_label = e.at("soft_label").get<std::vector<double>>();
      check_soft_label(s.soft_label, "load_distilled " + s.id);
      const auto file = dir / e.at("file").get<std::string>();
      const auto recorded = e.at("hash").get<std::string>();
      if (hash_hex(hash_file(file)) != recorded)
        throw FormatError("load_distilled: " + file.string() +
                          " does not match its manifest hash (file tampered or "
                          "rewritten)");
      s.video = load_tensor(file);
      if (s.video.shape() != shape)
        throw FormatError("load_distilled: " + file.string() + " has shape " +
                          shape_str(s.video.shape()) + ", manifest says " +
                          shape_str(shape));
      ds.samples.push_back(std::move(s));
    }
    for (const auto& e : manifest.at("profiles")) ds.profiles.push_back(profile_from_json(e));
  } catch (const json::exception& e) {
    throw FormatError("load_distilled: manifest field error: " + std::string(e.what()));
  }

  if (ds.samples.size() != static_cast<size_t>(ds.ipc * ds.classes))
    throw FormatError("load_distilled: manifest IPC*classes does not match sample count");
  return ds;
}

namespace {

struct Image {
  std::int64_t channels = 0, height = 0, width = 0;
  std::vector<double> px;  // [C,H,W]
};

int next_sample(std::istream& is, const std::filesystem::path& p, bool binary,
                int maxval) {
  if (binary) {
    const int v = is.get();
    if (v < 0) throw FormatError(p.string() + ": truncated image data");
    return v;
  }
  int v = 0;
  if (!(is >> v)) throw FormatError(p.string() + ": truncated image data");
  if (v < 0 || v > maxval) throw FormatError(p.string() + ": sample out of range");
  return v;
}

Image load_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("ingest: cannot read frame " + path.string());
  std::string magic;
  is >> magic;
  const bool binary = (magic == "P5" || magic == "P6");
  const bool color = (magic == "P3" || magic == "P6");
  if (magic != "P2" && magic != "P3" && magic != "P5" && magic != "P6")
    throw FormatError(path.string() + ": unsupported image format '" + magic +
                      "' (PGM/PPM expected)");

  auto skip = [&] {
    while (is) {
      const int c = is.peek();
      if (c == '#') {
        std::string line;
        std::getline(is, line);
      } else if (std::isspace(c)) {
        is.get();
      } else {
        break;
      }
    }
  };
  std::int64_t w = 0, h = 0;
  int maxval = 0;
  skip();
  is >> w;
  skip();
  is >> h;
  skip();
  is >> maxval;
  if (!is || w < 1 || h < 1 || maxval < 1)
    throw FormatError(path.string() + ": malformed image header");
  if (maxval > 255)
    throw FormatError(path.string() + ": 16-bit samples are not supported");
  if (binary) is.get();  // single whitespace after maxval

  Image img;
  img.channels = color ? 3 : 1;
  img.height = h;
  img.width = w;
  img.px.resize(static_cast<size_t>(img.channels * h * w));
  // File order is row-major with interleaved channels; ours is planar.
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t x = 0; x < w; ++x)
      for (std::int64_t c = 0; c < img.channels; ++c)
        img.px[(c * h + y) * w + x] =
            static_cast<double>(next_sample(is, path, binary, maxval)) / maxval;
  return img;
}

// Numeric-aware ordering so frame_10 follows frame_2.
std::pair<long long, std::string> natural_key(const std::filesystem::path& p) {
  const std::string stem = p.stem().string();
  long long num = -1;
  for (size_t i = 0; i < stem.size(); ++i)
    if (std::isdigit(static_cast<unsigned char>(stem[i]))) {
      num = std::stoll(stem.substr(i));
      break;
    }
  return {num, p.filename().string()};
}

}  // namespace

std::vector<std::int64_t> resample_indices(std::int64_t available, std::int64_t target) {
  if (available < 1 || target < 1)
    throw std::invalid_argument("resample_indices: counts must be >= 1");
  std::vector<std::int64_t> idx(static_cast<size_t>(target));
  for (std::int64_t i = 0; i < target; ++i) idx[static_cast<size_t>(i)] = i * available / target;
  return idx;
}

std::vector<VideoSample> ingest_frame_directory(const std::filesystem::path& dir,
                                                const IngestLayout& layout) {
  const auto labels_path = dir / layout.labels_file;
  if (!std::filesystem::exists(labels_path))
    throw FormatError("ingest: missing labels file " + labels_path.string());

  std::map<std::string, int> labels;
  std::istringstream lines(read_text_file(labels_path));
  std::string line;
  while (std::getline(lines, line)) {
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos)
      throw FormatError("ingest: malformed labels line '" + line + "' (want id,class)");
    labels[line.substr(0, comma)] = std::stoi(line.substr(comma + 1));
  }

  std::vector<VideoSample> out;
  for (const auto& [id, label] : labels) {
    const auto video_dir = dir / id;
    if (!std::filesystem::is_directory(video_dir))
      throw FormatError("ingest: labels list video '" + id + "' but " +
                        video_dir.string() + " is not a directory");
    std::vector<std::filesystem::path> frames;
    for (const auto& e : std::filesystem::directory_iterator(video_dir))
      if (e.is_regular_file()) frames.push_back(e.path());
    if (frames.empty()) throw FormatError("ingest: no frames in " + video_dir.string());
    std::sort(frames.begin(), frames.end(),
              [](const auto& a, const auto& b) { return natural_key(a) < natural_key(b); });

    const auto pick = resample_indices(static_cast<std::int64_t>(frames.size()),
                                       layout.frames);
    std::vector<Image> selected;
    for (auto i : pick) selected.push_back(load_pnm(frames[static_cast<size_t>(i)]));
    for (const auto& img : selected)
      if (img.channels != selected.front().channels ||
          img.height != selected.front().height || img.width != selected.front().width)
        throw FormatError("ingest: inconsistent frame resolutions in " +
                          video_dir.string());

    const auto& f0 = selected.front();
    std::vector<double> px;
    px.reserve(selected.size() * f0.px.size());
    for (const auto& img : selected) px.insert(px.end(), img.px.begin(), img.px.end());
    VideoSample s;
    s.video = Tensor::from_data({layout.frames, f0.channels, f0.height, f0.width},
                                std::move(px));
    s.label = label;
    s.id = id;
    out.push_back(std::move(s));
  }

  for (const auto& s : out)
    if (s.video.shape() != out.front().video.shape())
      throw FormatError("ingest: inconsistent resolutions across videos (" + s.id +
                        " vs " + out.front().id + ")");
  return out;
}

}  // namespace tsgf
