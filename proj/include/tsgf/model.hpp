#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "tsgf/tensor.hpp"

namespace tsgf {

/// Input/output contract shared by every architecture. The conv widths are the
/// three stage channel counts; pooling halves each spatial axis per stage and
/// the temporal axis once, after stage 2 (3D architecture only).
struct MiniC3DConfig {
  std::int64_t frames = 16;
  std::int64_t channels = 1;
  std::int64_t height = 16;
  std::int64_t width = 16;
  std::int64_t classes = 8;
  std::array<std::int64_t, 3> widths{8, 16, 32};
  std::int64_t gru_hidden = 16;

  bool operator==(const MiniC3DConfig&) const = default;
};

enum class ForwardMode { Train, Eval, Capture };

/// Per-channel activation statistics recorded by a capture-mode forward, one
/// entry per BN layer in network order. The tensors stay connected to the
/// input's graph, which is what lets the regularization loss reach the pixels.
struct BatchStats {
  std::vector<Tensor> mean;
  std::vector<Tensor> var;  // biased (population) variance, >= 0 by construction
};

struct Conv3dLayer {
  Tensor w, b;
};
struct Conv2dLayer {
  Tensor w, b;
};
struct BNLayer {
  Tensor gamma, beta;
  Tensor running_mean, running_var;  // buffers, never part of the graph
  double momentum = 0.1;
  double eps = 1e-5;
};
struct LinearLayer {
  Tensor w, b;
};
struct GruLayer {
  Tensor wz, uz, bz, wr, ur, br, wn, un, bn;
};

class Model {
 public:
  enum class Kind { MiniC3D, Conv2dTemporalPool, Conv2dGru };

  Kind kind = Kind::MiniC3D;
  MiniC3DConfig config;
  std::vector<Conv3dLayer> conv3;  // MiniC3D stages
  std::vector<Conv2dLayer> conv2;  // 2D-architecture stages
  std::vector<BNLayer> bn;         // one per conv stage, any architecture
  GruLayer gru;                    // Conv2dGru only
  LinearLayer head;

  /// batch is [B,T,C,H,W]. Train normalizes with batch statistics and updates
  /// the running buffers; Eval uses the running buffers; Capture normalizes
  /// with batch statistics, records them into *capture, and leaves the
  /// running buffers untouched.
  Tensor forward(const Tensor& batch, ForwardMode mode, BatchStats* capture = nullptr);

  /// Learnable tensors only (conv/gru/head weights, BN gamma/beta).
  std::vector<Tensor> parameters() const;
  void set_parameters_require_grad(bool rg);

  /// Stable name -> tensor map covering parameters and BN running buffers.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
};

Model build_mini_c3d(const MiniC3DConfig& config, std::uint64_t seed);

/// kind is "conv2d_temporal_pool" or "conv2d_gru"; anything else throws.
Model build_alt_architecture(std::string_view kind, const MiniC3DConfig& config,
                             std::uint64_t seed);

std::string kind_name(Model::Kind k);

void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace tsgf
