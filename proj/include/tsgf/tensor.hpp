#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tsgf {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);

/// Thrown by every op on nonconforming inputs; the message names the op and
/// the offending shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
struct Node;
}

/// Dense double-precision N-d array with reverse-mode autodiff.
///
/// Value semantics over a shared node: copies alias the same storage. Data is
/// mutable through data(); the recorded graph is append-only and freed by
/// backward(). Gradients accumulate additively until zero_grad().
class Tensor {
 public:
  Tensor();  // empty 0-d placeholder, numel 0

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  const Shape& shape() const;
  std::int64_t numel() const;
  int rank() const;
  bool defined() const { return node_ != nullptr; }

  bool requires_grad() const;
  void set_requires_grad(bool rg);

  std::span<double> data();
  std::span<const double> data() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  /// Scalar extraction; throws unless numel == 1.
  double item() const;

  /// Deep copy of the value with no graph attached.
  Tensor detach() const;

  /// Reverse-mode pass from a scalar root. Accumulates into every reachable
  /// tensor with requires_grad, then frees the recorded graph.
  void backward();

  /// Identity check (same underlying node).
  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

  std::shared_ptr<detail::Node> node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor rsub_scalar(double c, const Tensor& x);  // c - x
Tensor neg(const Tensor& x);
Tensor abs_(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor log_(const Tensor& x);
Tensor exp_(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_(const Tensor& x);
Tensor rsqrt_shift(const Tensor& x, double c);  // 1/sqrt(x + c)

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);            // [M,K]x[K,N]
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);  // x[B,F], w[O,F], b[O]

// ---- convolution / pooling ----
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::array<int, 3> stride = {1, 1, 1},
              std::array<int, 3> pad = {0, 0, 0});          // x[B,C,T,H,W], w[O,C,kT,kH,kW]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::array<int, 2> stride = {1, 1},
              std::array<int, 2> pad = {0, 0});             // x[B,C,H,W], w[O,C,kH,kW]

enum class PoolKind { Avg, Max };
// Kernels larger than the input extent are clamped to it, so a size-1 axis
// pools to size 1 instead of vanishing.
Tensor pool3d(const Tensor& x, PoolKind kind, std::array<int, 3> kernel,
              std::array<int, 3> stride);
Tensor pool2d(const Tensor& x, PoolKind kind, std::array<int, 2> kernel,
              std::array<int, 2> stride);
Tensor global_avg_pool(const Tensor& x);  // [B,C,...] -> [B,C]

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor flatten(const Tensor& x);  // [B, rest...] -> [B, prod(rest)]
Tensor permute(const Tensor& x, const std::vector<int>& dims);
Tensor select_dim1(const Tensor& x, std::int64_t index);  // [B,T,F] -> [B,F]
Tensor mean_dim1(const Tensor& x);                        // [B,T,F] -> [B,F]

// ---- channel-broadcast (dim 1 of a rank >= 2 tensor) ----
Tensor channel_mean(const Tensor& x);                 // -> [C], mean over all other axes
Tensor channel_add(const Tensor& x, const Tensor& v);
Tensor channel_sub(const Tensor& x, const Tensor& v);
Tensor channel_mul(const Tensor& x, const Tensor& v);

// ---- rows ----
Tensor softmax(const Tensor& x);      // [B,C] rowwise
Tensor log_softmax(const Tensor& x);  // [B,C] rowwise

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor l2norm(const Tensor& x);  // sqrt(sum x^2); gradient 0 at the origin

/// Mean cross-entropy of logits against fixed target distributions.
/// targets is treated as a constant even if it requires grad.
Tensor cross_entropy(const Tensor& logits, const Tensor& targets);

}  // namespace tsgf
