#include "tsgf/model.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include <json.hpp>

#include "tsgf/tensor_io.hpp"
#include "tsgf/util.hpp"

namespace tsgf {

namespace {

using nlohmann::json;

Tensor init_uniform(Shape shape, std::int64_t fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  std::vector<double> d(static_cast<size_t>(n));
  for (auto& v : d) v = uniform(rng, -bound, bound);
  return Tensor::from_data(std::move(shape), std::move(d), true);
}

BNLayer make_bn(std::int64_t channels) {
  BNLayer l;
  l.gamma = Tensor::full({channels}, 1.0, true);
  l.beta = Tensor::zeros({channels}, true);
  l.running_mean = Tensor::zeros({channels});
  l.running_var = Tensor::full({channels}, 1.0);
  return l;
}

/// Normalize with batch statistics (Train/Capture) or the running buffers
/// (Eval). Train folds the detached batch statistics into the buffers.
Tensor bn_forward(BNLayer& l, const Tensor& x, ForwardMode mode, BatchStats* capture) {
  Tensor mu, var;
  if (mode == ForwardMode::Eval) {
    mu = l.running_mean;
    var = l.running_var;
  } else {
    mu = channel_mean(x);
    Tensor centered = channel_sub(x, mu);
    var = channel_mean(mul(centered, centered));
    if (mode == ForwardMode::Train) {
      const double m = l.momentum;
      auto rm = l.running_mean.data();
      auto rv = l.running_var.data();
      auto bm = mu.data();
      auto bv = var.data();
      for (size_t c = 0; c < rm.size(); ++c) {
        rm[c] = (1.0 - m) * rm[c] + m * bm[c];
        rv[c] = (1.0 - m) * rv[c] + m * bv[c];
      }
    } else if (capture) {
      capture->mean.push_back(mu);
      capture->var.push_back(var);
    }
  }
  Tensor norm = channel_mul(channel_sub(x, mu), rsqrt_shift(var, l.eps));
  return channel_add(channel_mul(norm, l.gamma), l.beta);
}

// The temporal extent is free: pooling clamps and the final average adapts,
// which is what lets one teacher score synthetic sets of any frame count.
void check_batch(const Model& m, const Tensor& batch) {
  const auto& c = m.config;
  if (!batch.defined() || batch.rank() != 5 || batch.shape()[1] < 1 ||
      batch.shape()[2] != c.channels || batch.shape()[3] != c.height ||
      batch.shape()[4] != c.width)
    throw ShapeError(
        "forward: batch " + (batch.defined() ? shape_str(batch.shape()) : "undefined") +
        " does not match model input [B, T, " + std::to_string(c.channels) + ", " +
        std::to_string(c.height) + ", " + std::to_string(c.width) + "]");
}

Tensor gru_pass(const GruLayer& g, const Tensor& feats, std::int64_t T) {
  const auto B = feats.shape()[0];
  const auto H = g.uz.shape()[0];
  Tensor h = Tensor::zeros({B, H});
  for (std::int64_t t = 0; t < T; ++t) {
    Tensor xt = select_dim1(feats, t);
    Tensor z = sigmoid(add(linear(xt, g.wz, g.bz), matmul(h, g.uz)));
    Tensor r = sigmoid(add(linear(xt, g.wr, g.br), matmul(h, g.ur)));
    Tensor n = tanh_(add(linear(xt, g.wn, g.bn), matmul(mul(r, h), g.un)));
    h = add(mul(rsub_scalar(1.0, z), n), mul(z, h));
  }
  return h;
}

}  // namespace

Tensor Model::forward(const Tensor& batch, ForwardMode mode, BatchStats* capture) {
  check_batch(*this, batch);
  if (mode != ForwardMode::Capture) capture = nullptr;

  if (kind == Kind::MiniC3D) {
    // [B,T,C,H,W] -> [B,C,T,H,W] for the 3D conv stack.
    Tensor h = permute(batch, {0, 2, 1, 3, 4});
    for (size_t i = 0; i < conv3.size(); ++i) {
      h = conv3d(h, conv3[i].w, conv3[i].b, {1, 1, 1}, {1, 1, 1});
      h = relu(bn_forward(bn[i], h, mode, capture));
      // Spatial halving each stage; the temporal axis halves once, mid-stack.
      const std::array<int, 3> pool = (i == 1) ? std::array<int, 3>{2, 2, 2}
                                               : std::array<int, 3>{1, 2, 2};
      h = pool3d(h, PoolKind::Max, pool, pool);
    }
    return linear(global_avg_pool(h), head.w, head.b);
  }

  // 2D architectures share conv weights across frames: fold T into the batch.
  const auto B = batch.shape()[0], T = config.frames;
  Tensor h = reshape(batch, {B * T, config.channels, config.height, config.width});
  for (size_t i = 0; i < conv2.size(); ++i) {
    h = conv2d(h, conv2[i].w, conv2[i].b, {1, 1}, {1, 1});
    h = relu(bn_forward(bn[i], h, mode, capture));
    h = pool2d(h, PoolKind::Max, {2, 2}, {2, 2});
  }
  Tensor feats = reshape(global_avg_pool(h), {B, T, config.widths[2]});
  Tensor agg = (kind == Kind::Conv2dTemporalPool) ? mean_dim1(feats)
                                                  : gru_pass(gru, feats, T);
  return linear(agg, head.w, head.b);
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (auto& l : conv3) {
    out.push_back(l.w);
    out.push_back(l.b);
  }
  for (auto& l : conv2) {
    out.push_back(l.w);
    out.push_back(l.b);
  }
  for (auto& l : bn) {
    out.push_back(l.gamma);
    out.push_back(l.beta);
  }
  if (kind == Kind::Conv2dGru)
    for (const Tensor* t : {&gru.wz, &gru.uz, &gru.bz, &gru.wr, &gru.ur, &gru.br,
                            &gru.wn, &gru.un, &gru.bn})
      out.push_back(*t);
  out.push_back(head.w);
  out.push_back(head.b);
  return out;
}

void Model::set_parameters_require_grad(bool rg) {
  for (auto& t : parameters()) t.set_requires_grad(rg);
}

std::vector<std::pair<std::string, Tensor>> Model::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  auto stage = [&](size_t i) { return "stage" + std::to_string(i); };
  for (size_t i = 0; i < conv3.size(); ++i) {
    out.emplace_back(stage(i) + ".conv.w", conv3[i].w);
    out.emplace_back(stage(i) + ".conv.b", conv3[i].b);
  }
  for (size_t i = 0; i < conv2.size(); ++i) {
    out.emplace_back(stage(i) + ".conv.w", conv2[i].w);
    out.emplace_back(stage(i) + ".conv.b", conv2[i].b);
  }
  for (size_t i = 0; i < bn.size(); ++i) {
    out.emplace_back(stage(i) + ".bn.gamma", bn[i].gamma);
    out.emplace_back(stage(i) + ".bn.beta", bn[i].beta);
    out.emplace_back(stage(i) + ".bn.running_mean", bn[i].running_mean);
    out.emplace_back(stage(i) + ".bn.running_var", bn[i].running_var);
  }
  if (kind == Kind::Conv2dGru) {
    out.emplace_back("gru.wz", gru.wz);
    out.emplace_back("gru.uz", gru.uz);
    out.emplace_back("gru.bz", gru.bz);
    out.emplace_back("gru.wr", gru.wr);
    out.emplace_back("gru.ur", gru.ur);
    out.emplace_back("gru.br", gru.br);
    out.emplace_back("gru.wn", gru.wn);
    out.emplace_back("gru.un", gru.un);
    out.emplace_back("gru.bn", gru.bn);
  }
  out.emplace_back("head.w", head.w);
  out.emplace_back("head.b", head.b);
  return out;
}

Model build_mini_c3d(const MiniC3DConfig& config, std::uint64_t seed) {
  Model m;
  m.kind = Model::Kind::MiniC3D;
  m.config = config;
  Rng rng(derive_seed(seed, "mini_c3d"));
  std::int64_t cin = config.channels;
  for (std::int64_t width : config.widths) {
    Conv3dLayer l;
    l.w = init_uniform({width, cin, 3, 3, 3}, cin * 27, rng);
    l.b = Tensor::zeros({width}, true);
    m.conv3.push_back(std::move(l));
    m.bn.push_back(make_bn(width));
    cin = width;
  }
  m.head.w = init_uniform({config.classes, cin}, cin, rng);
  m.head.b = Tensor::zeros({config.classes}, true);
  return m;
}

Model build_alt_architecture(std::string_view kind, const MiniC3DConfig& config,
                             std::uint64_t seed) {
  Model m;
  if (kind == "conv2d_temporal_pool") {
    m.kind = Model::Kind::Conv2dTemporalPool;
  } else if (kind == "conv2d_gru") {
    m.kind = Model::Kind::Conv2dGru;
  } else {
    throw std::invalid_argument("build_alt_architecture: unknown kind '" +
                                std::string(kind) +
                                "' (expected conv2d_temporal_pool or conv2d_gru)");
  }
  m.config = config;
  Rng rng(derive_seed(seed, kind));
  std::int64_t cin = config.channels;
  for (std::int64_t width : config.widths) {
    Conv2dLayer l;
    l.w = init_uniform({width, cin, 3, 3}, cin * 9, rng);
    l.b = Tensor::zeros({width}, true);
    m.conv2.push_back(std::move(l));
    m.bn.push_back(make_bn(width));
    cin = width;
  }
  std::int64_t feat = cin;
  if (m.kind == Model::Kind::Conv2dGru) {
    const std::int64_t H = config.gru_hidden;
    m.gru.wz = init_uniform({H, feat}, feat, rng);
    m.gru.uz = init_uniform({H, H}, H, rng);
    m.gru.bz = Tensor::zeros({H}, true);
    m.gru.wr = init_uniform({H, feat}, feat, rng);
    m.gru.ur = init_uniform({H, H}, H, rng);
    m.gru.br = Tensor::zeros({H}, true);
    m.gru.wn = init_uniform({H, feat}, feat, rng);
    m.gru.un = init_uniform({H, H}, H, rng);
    m.gru.bn = Tensor::zeros({H}, true);
    feat = H;
  }
  m.head.w = init_uniform({config.classes, feat}, feat, rng);
  m.head.b = Tensor::zeros({config.classes}, true);
  return m;
}

std::string kind_name(Model::Kind k) {
  switch (k) {
    case Model::Kind::MiniC3D: return "mini_c3d";
    case Model::Kind::Conv2dTemporalPool: return "conv2d_temporal_pool";
    case Model::Kind::Conv2dGru: return "conv2d_gru";
  }
  throw std::logic_error("kind_name: unreachable");
}

namespace {

constexpr char kCkptMagic[8] = {'T', 'S', 'G', 'F', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCkptVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof v);
}

std::uint32_t read_u32(std::istream& is, const std::string& ctx) {
  std::uint32_t v = 0;
  if (!is.read(reinterpret_cast<char*>(&v), sizeof v))
    throw FormatError(ctx + ": truncated checkpoint");
  return v;
}

void write_str(std::ostream& os, std::string_view s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_str(std::istream& is, const std::string& ctx) {
  const auto n = read_u32(is, ctx);
  if (n > (1u << 20)) throw FormatError(ctx + ": implausible string length");
  std::string s(n, '\0');
  if (!is.read(s.data(), n)) throw FormatError(ctx + ": truncated checkpoint");
  return s;
}

json config_to_json(const MiniC3DConfig& c) {
  return json{{"frames", c.frames},   {"channels", c.channels},
              {"height", c.height},   {"width", c.width},
              {"classes", c.classes}, {"widths", c.widths},
              {"gru_hidden", c.gru_hidden}};
}

MiniC3DConfig config_from_json(const json& j) {
  MiniC3DConfig c;
  c.frames = j.at("frames").get<std::int64_t>();
  c.channels = j.at("channels").get<std::int64_t>();
  c.height = j.at("height").get<std::int64_t>();
  c.width = j.at("width").get<std::int64_t>();
  c.classes = j.at("classes").get<std::int64_t>();
  const auto w = j.at("widths").get<std::vector<std::int64_t>>();
  if (w.size() != 3) throw FormatError("checkpoint: expected 3 stage widths");
  std::copy(w.begin(), w.end(), c.widths.begin());
  c.gru_hidden = j.value("gru_hidden", std::int64_t{16});
  return c;
}

}  // namespace

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("save_checkpoint: cannot open " + path.string());
  os.write(kCkptMagic, sizeof kCkptMagic);
  write_u32(os, kCkptVersion);
  const json manifest{{"kind", kind_name(model.kind)},
                      {"config", config_to_json(model.config)}};
  write_str(os, manifest.dump());
  auto named = model.named_tensors();
  write_u32(os, static_cast<std::uint32_t>(named.size()));
  for (auto& [name, tensor] : named) {
    write_str(os, name);
    write_tensor(os, tensor);
  }
  if (!os) throw FormatError("save_checkpoint: write failed for " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("load_checkpoint: cannot open " + path.string());
  const std::string ctx = path.string();
  char magic[8] = {};
  if (!is.read(magic, sizeof magic) || std::memcmp(magic, kCkptMagic, sizeof magic) != 0)
    throw FormatError(ctx + ": bad magic string, not a checkpoint file");
  const auto version = read_u32(is, ctx);
  if (version != kCkptVersion)
    throw FormatError(ctx + ": unsupported checkpoint version " + std::to_string(version));
  json manifest;
  try {
    manifest = json::parse(read_str(is, ctx));
  } catch (const json::exception& e) {
    throw FormatError(ctx + ": corrupt checkpoint manifest: " + e.what());
  }
  const auto kind = manifest.at("kind").get<std::string>();
  const auto config = config_from_json(manifest.at("config"));
  Model m = (kind == "mini_c3d") ? build_mini_c3d(config, 0)
                                 : build_alt_architecture(kind, config, 0);

  std::map<std::string, Tensor> slots;
  for (auto& [name, tensor] : m.named_tensors()) slots.emplace(name, tensor);
  const auto count = read_u32(is, ctx);
  if (count != slots.size())
    throw FormatError(ctx + ": checkpoint holds " + std::to_string(count) +
                      " tensors, architecture expects " + std::to_string(slots.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name = read_str(is, ctx);
    auto it = slots.find(name);
    if (it == slots.end()) throw FormatError(ctx + ": unexpected tensor '" + name + "'");
    Tensor loaded = read_tensor(is, ctx + ":" + name);
    if (loaded.shape() != it->second.shape())
      throw FormatError(ctx + ": tensor '" + name + "' has shape " +
                        shape_str(loaded.shape()) + ", expected " +
                        shape_str(it->second.shape()));
    auto dst = it->second.data();
    auto src = loaded.data();
    std::copy(src.begin(), src.end(), dst.begin());
    slots.erase(it);
  }
  if (!slots.empty())
    throw FormatError(ctx + ": checkpoint is missing tensor '" + slots.begin()->first + "'");
  return m;
}

}  // namespace tsgf
