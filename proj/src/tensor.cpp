#include "tsgf/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

extern "C" void openblas_set_num_threads(int);

namespace tsgf {

namespace {
// GEMM results must not depend on a thread-count heuristic; the whole project
// is single-threaded by contract.
struct BlasInit {
  BlasInit() { openblas_set_num_threads(1); }
} blas_init;
}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ", ";
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

using detail::Node;

namespace {

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

std::vector<std::int64_t> row_major_strides(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i)
    st[i] = st[i + 1] * s[i + 1];
  return st;
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require(bool ok, const char* op, const std::string& detail) {
  if (!ok) shape_fail(op, detail);
}

Node& nd(const Tensor& t) { return *t.node(); }

Tensor make_plain(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return Tensor(std::move(n));
}

/// Builds an op result. The backprop lambda is recorded only when some input
/// requires grad; it must guard each accumulation with the parent's flag.
Tensor make_op(Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs,
               std::function<void(Node&)> backprop) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  bool rg = false;
  for (const auto& t : inputs) rg = rg || nd(t).requires_grad;
  if (rg) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.node());
    n->backprop = std::move(backprop);
  }
  return Tensor(std::move(n));
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) shape_fail(op, "undefined tensor argument");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (nd(a).shape != nd(b).shape)
    shape_fail(op, "shape mismatch " + shape_str(nd(a).shape) + " vs " +
                       shape_str(nd(b).shape));
}

}  // namespace

// ---- Tensor ----

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (auto e : shape)
    require(e > 0, "Tensor", "nonpositive extent in " + shape_str(shape));
  auto n = shape_numel(shape);
  Tensor t = make_plain(std::move(shape), std::vector<double>(n, value));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape)
    require(e > 0, "Tensor", "nonpositive extent in " + shape_str(shape));
  require(shape_numel(shape) == static_cast<std::int64_t>(data.size()), "Tensor",
          "data length " + std::to_string(data.size()) + " does not match " +
              shape_str(shape));
  Tensor t = make_plain(std::move(shape), std::move(data));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  if (!node_) throw std::runtime_error("Tensor::shape on undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::numel() const { return node_ ? node_->numel() : 0; }

int Tensor::rank() const { return static_cast<int>(shape().size()); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!node_) throw std::runtime_error("Tensor::set_requires_grad on undefined tensor");
  node_->requires_grad = rg;
}

std::span<double> Tensor::data() {
  if (!node_) throw std::runtime_error("Tensor::data on undefined tensor");
  return node_->data;
}

std::span<const double> Tensor::data() const {
  if (!node_) throw std::runtime_error("Tensor::data on undefined tensor");
  return node_->data;
}

bool Tensor::has_grad() const { return node_ && !node_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("Tensor::grad: no gradient populated");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_ && !node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  require(numel() == 1, "item", "tensor of shape " + shape_str(shape()) + " is not scalar");
  return node_->data[0];
}

Tensor Tensor::detach() const {
  if (!node_) return Tensor();
  return make_plain(node_->shape, node_->data);
}

void Tensor::backward() {
  require(numel() == 1, "backward",
          "root of shape " + shape_str(shape()) + " is not scalar");
  require(node_->requires_grad, "backward", "root does not require grad");

  // Iterative post-order over parents; reverse gives root-to-leaf order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
  // Free the recorded graph; leaf grads survive in their own nodes.
  for (Node* n : order) {
    n->backprop = nullptr;
    n->parents.clear();
  }
}

// ---- elementwise ----

namespace {

Tensor binary_ew(const Tensor& a, const Tensor& b, const char* op,
                 double (*fwd)(double, double),
                 void (*bwd)(Node&, Node&, Node&)) {
  check_defined(a, op);
  check_defined(b, op);
  check_same_shape(a, b, op);
  const auto& ad = nd(a).data;
  const auto& bd = nd(b).data;
  std::vector<double> out(ad.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(ad[i], bd[i]);
  return make_op(nd(a).shape, std::move(out), {a, b},
                 [a, b, bwd](Node& self) { bwd(self, nd(a), nd(b)); });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_ew(
      a, b, "add", [](double x, double y) { return x + y; },
      [](Node& self, Node& pa, Node& pb) {
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] += self.grad[i];
        }
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_ew(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](Node& self, Node& pa, Node& pb) {
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) pa.grad[i] += self.grad[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) pb.grad[i] -= self.grad[i];
        }
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_ew(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](Node& self, Node& pa, Node& pb) {
        if (pa.requires_grad) {
          pa.ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i)
            pa.grad[i] += self.grad[i] * pb.data[i];
        }
        if (pb.requires_grad) {
          pb.ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i)
            pb.grad[i] += self.grad[i] * pa.data[i];
        }
      });
}

namespace {

template <class Fwd, class Deriv>
Tensor unary_ew(const Tensor& x, const char* op, Fwd fwd,
                // dy/dx as a function of (input value, output value)
                Deriv deriv) {
  check_defined(x, op);
  const auto& xd = nd(x).data;
  std::vector<double> out(xd.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = fwd(xd[i]);
  return make_op(nd(x).shape, std::move(out), {x},
                 [x, deriv](Node& self) {
                   Node& px = nd(x);
                   if (!px.requires_grad) return;
                   px.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     px.grad[i] += self.grad[i] * deriv(px.data[i], self.data[i]);
                 });
}

}  // namespace

Tensor add_scalar(const Tensor& x, double c) {
  return unary_ew(x, "add_scalar", [c](double v) { return v + c; },
                  [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_ew(x, "mul_scalar", [c](double v) { return v * c; },
                  [c](double, double) { return c; });
}

Tensor rsub_scalar(double c, const Tensor& x) {
  return unary_ew(x, "rsub_scalar", [c](double v) { return c - v; },
                  [](double, double) { return -1.0; });
}

Tensor neg(const Tensor& x) {
  return unary_ew(x, "neg", [](double v) { return -v; },
                  [](double, double) { return -1.0; });
}

Tensor abs_(const Tensor& x) {
  return unary_ew(x, "abs", [](double v) { return std::abs(v); },
                  [](double in, double) { return in > 0 ? 1.0 : (in < 0 ? -1.0 : 0.0); });
}

Tensor relu(const Tensor& x) {
  return unary_ew(x, "relu", [](double v) { return v > 0 ? v : 0.0; },
                  [](double in, double) { return in > 0 ? 1.0 : 0.0; });
}

Tensor log_(const Tensor& x) {
  return unary_ew(x, "log", [](double v) { return std::log(v); },
                  [](double in, double) { return 1.0 / in; });
}

Tensor exp_(const Tensor& x) {
  return unary_ew(x, "exp", [](double v) { return std::exp(v); },
                  [](double, double out) { return out; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_ew(x, "sigmoid", [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                  [](double, double out) { return out * (1.0 - out); });
}

Tensor tanh_(const Tensor& x) {
  return unary_ew(x, "tanh", [](double v) { return std::tanh(v); },
                  [](double, double out) { return 1.0 - out * out; });
}

Tensor rsqrt_shift(const Tensor& x, double c) {
  return unary_ew(x, "rsqrt_shift",
                  [c](double v) { return 1.0 / std::sqrt(v + c); },
                  [](double, double out) { return -0.5 * out * out * out; });
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  require(a.rank() == 2 && b.rank() == 2, "matmul",
          "expects rank-2 operands, got " + shape_str(nd(a).shape) + " and " +
              shape_str(nd(b).shape));
  const auto M = nd(a).shape[0], K = nd(a).shape[1];
  const auto K2 = nd(b).shape[0], N = nd(b).shape[1];
  require(K == K2, "matmul",
          "inner dims differ: " + shape_str(nd(a).shape) + " x " + shape_str(nd(b).shape));
  std::vector<double> out(static_cast<size_t>(M * N), 0.0);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(M),
              static_cast<int>(N), static_cast<int>(K), 1.0, nd(a).data.data(),
              static_cast<int>(K), nd(b).data.data(), static_cast<int>(N), 0.0,
              out.data(), static_cast<int>(N));
  return make_op({M, N}, std::move(out), {a, b}, [a, b, M, N, K](Node& self) {
    Node& pa = nd(a);
    Node& pb = nd(b);
    if (pa.requires_grad) {
      pa.ensure_grad();
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(M),
                  static_cast<int>(K), static_cast<int>(N), 1.0, self.grad.data(),
                  static_cast<int>(N), pb.data.data(), static_cast<int>(N), 1.0,
                  pa.grad.data(), static_cast<int>(K));
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(K),
                  static_cast<int>(N), static_cast<int>(M), 1.0, pa.data.data(),
                  static_cast<int>(K), self.grad.data(), static_cast<int>(N), 1.0,
                  pb.grad.data(), static_cast<int>(N));
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_defined(x, "linear");
  check_defined(w, "linear");
  check_defined(b, "linear");
  require(x.rank() == 2 && w.rank() == 2 && b.rank() == 1, "linear",
          "expects x[B,F], w[O,F], b[O]; got " + shape_str(nd(x).shape) + ", " +
              shape_str(nd(w).shape) + ", " + shape_str(nd(b).shape));
  const auto B = nd(x).shape[0], F = nd(x).shape[1];
  const auto O = nd(w).shape[0];
  require(nd(w).shape[1] == F && nd(b).shape[0] == O, "linear",
          "inconsistent feature/output dims: x" + shape_str(nd(x).shape) + " w" +
              shape_str(nd(w).shape) + " b" + shape_str(nd(b).shape));
  std::vector<double> out(static_cast<size_t>(B * O), 0.0);
  cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(B),
              static_cast<int>(O), static_cast<int>(F), 1.0, nd(x).data.data(),
              static_cast<int>(F), nd(w).data.data(), static_cast<int>(F), 0.0,
              out.data(), static_cast<int>(O));
  for (std::int64_t i = 0; i < B; ++i)
    for (std::int64_t o = 0; o < O; ++o) out[i * O + o] += nd(b).data[o];
  return make_op({B, O}, std::move(out), {x, w, b}, [x, w, b, B, F, O](Node& self) {
    Node& px = nd(x);
    Node& pw = nd(w);
    Node& pb = nd(b);
    if (px.requires_grad) {
      px.ensure_grad();
      cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(B),
                  static_cast<int>(F), static_cast<int>(O), 1.0, self.grad.data(),
                  static_cast<int>(O), pw.data.data(), static_cast<int>(F), 1.0,
                  px.grad.data(), static_cast<int>(F));
    }
    if (pw.requires_grad) {
      pw.ensure_grad();
      cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(O),
                  static_cast<int>(F), static_cast<int>(B), 1.0, self.grad.data(),
                  static_cast<int>(O), px.data.data(), static_cast<int>(F), 1.0,
                  pw.grad.data(), static_cast<int>(F));
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (std::int64_t i = 0; i < B; ++i)
        for (std::int64_t o = 0; o < O; ++o) pb.grad[o] += self.grad[i * O + o];
    }
  });
}

// ---- convolution ----

namespace {

// Shared by conv3d/conv2d: N spatial-ish dims (3 = T,H,W or 2 = H,W).
template <int NDim>
struct ConvPlan {
  std::int64_t batch, cin, cout;
  std::array<std::int64_t, NDim> in, k, out;
  std::array<int, NDim> stride, pad;
  std::int64_t cols;     // cin * prod(k)
  std::int64_t patches;  // prod(out)
};

template <int NDim>
ConvPlan<NDim> plan_conv(const char* op, const Tensor& x, const Tensor& w,
                         const Tensor& bias, std::array<int, NDim> stride,
                         std::array<int, NDim> pad) {
  check_defined(x, op);
  check_defined(w, op);
  check_defined(bias, op);
  require(x.rank() == NDim + 2 && w.rank() == NDim + 2, op,
          "expects x rank " + std::to_string(NDim + 2) + " and matching kernel; got x" +
              shape_str(nd(x).shape) + " w" + shape_str(nd(w).shape));
  ConvPlan<NDim> p;
  p.batch = nd(x).shape[0];
  p.cin = nd(x).shape[1];
  p.cout = nd(w).shape[0];
  require(nd(w).shape[1] == p.cin, op,
          "input channels " + std::to_string(p.cin) + " vs kernel " +
              std::to_string(nd(w).shape[1]));
  require(bias.rank() == 1 && nd(bias).shape[0] == p.cout, op,
          "bias shape " + shape_str(nd(bias).shape) + " does not match " +
              std::to_string(p.cout) + " output channels");
  p.cols = p.cin;
  p.patches = 1;
  for (int d = 0; d < NDim; ++d) {
    p.in[d] = nd(x).shape[2 + d];
    p.k[d] = nd(w).shape[2 + d];
    p.stride[d] = stride[d];
    p.pad[d] = pad[d];
    require(stride[d] >= 1, op, "stride must be >= 1");
    require(pad[d] >= 0, op, "padding must be >= 0");
    const auto span = p.in[d] + 2 * pad[d] - p.k[d];
    require(span >= 0, op,
            "kernel " + shape_str(nd(w).shape) + " larger than padded input " +
                shape_str(nd(x).shape));
    p.out[d] = span / stride[d] + 1;
    p.cols *= p.k[d];
    p.patches *= p.out[d];
  }
  return p;
}

// col is [cols x patches] for one batch item; zero padding contributes zeros.
template <int NDim>
void im2col(const ConvPlan<NDim>& p, const double* xb, double* col) {
  std::array<std::int64_t, NDim> opos{}, kpos{};
  for (std::int64_t ci = 0; ci < p.cin; ++ci) {
    kpos.fill(0);
    for (std::int64_t kk = 0; kk < p.cols / p.cin; ++kk) {
      const std::int64_t row = ci * (p.cols / p.cin) + kk;
      opos.fill(0);
      for (std::int64_t pp = 0; pp < p.patches; ++pp) {
        bool inside = true;
        std::int64_t src = ci;
        for (int d = 0; d < NDim; ++d) {
          const std::int64_t v = opos[d] * p.stride[d] - p.pad[d] + kpos[d];
          if (v < 0 || v >= p.in[d]) {
            inside = false;
            break;
          }
          src = src * p.in[d] + v;
        }
        col[row * p.patches + pp] = inside ? xb[src] : 0.0;
        for (int d = NDim - 1; d >= 0; --d) {
          if (++opos[d] < p.out[d]) break;
          opos[d] = 0;
        }
      }
      for (int d = NDim - 1; d >= 0; --d) {
        if (++kpos[d] < p.k[d]) break;
        kpos[d] = 0;
      }
    }
  }
}

// Scatter-add of dcol back into dxb; the exact adjoint of im2col.
template <int NDim>
void col2im_add(const ConvPlan<NDim>& p, const double* dcol, double* dxb) {
  std::array<std::int64_t, NDim> opos{}, kpos{};
  for (std::int64_t ci = 0; ci < p.cin; ++ci) {
    kpos.fill(0);
    for (std::int64_t kk = 0; kk < p.cols / p.cin; ++kk) {
      const std::int64_t row = ci * (p.cols / p.cin) + kk;
      opos.fill(0);
      for (std::int64_t pp = 0; pp < p.patches; ++pp) {
        bool inside = true;
        std::int64_t dst = ci;
        for (int d = 0; d < NDim; ++d) {
          const std::int64_t v = opos[d] * p.stride[d] - p.pad[d] + kpos[d];
          if (v < 0 || v >= p.in[d]) {
            inside = false;
            break;
          }
          dst = dst * p.in[d] + v;
        }
        if (inside) dxb[dst] += dcol[row * p.patches + pp];
        for (int d = NDim - 1; d >= 0; --d) {
          if (++opos[d] < p.out[d]) break;
          opos[d] = 0;
        }
      }
      for (int d = NDim - 1; d >= 0; --d) {
        if (++kpos[d] < p.k[d]) break;
        kpos[d] = 0;
      }
    }
  }
}

template <int NDim>
Tensor conv_nd(const char* op, const Tensor& x, const Tensor& w, const Tensor& bias,
               std::array<int, NDim> stride, std::array<int, NDim> pad) {
  const ConvPlan<NDim> p = plan_conv<NDim>(op, x, w, bias, stride, pad);
  const std::int64_t in_item = p.cin;
  std::int64_t in_sp = 1;
  for (int d = 0; d < NDim; ++d) in_sp *= p.in[d];
  const std::int64_t item = in_item * in_sp;

  const bool needs_graph =
      x.requires_grad() || w.requires_grad() || bias.requires_grad();
  // Saved only when the graph is recorded; eval-mode forwards stay lean.
  std::vector<double> col(needs_graph ? static_cast<size_t>(p.batch * p.cols * p.patches)
                                      : static_cast<size_t>(p.cols * p.patches));

  Shape out_shape{p.batch, p.cout};
  for (int d = 0; d < NDim; ++d) out_shape.push_back(p.out[d]);
  std::vector<double> out(static_cast<size_t>(p.batch * p.cout * p.patches), 0.0);

  const double* wmat = nd(w).data.data();
  for (std::int64_t b = 0; b < p.batch; ++b) {
    double* colb = col.data() + (needs_graph ? b * p.cols * p.patches : 0);
    im2col<NDim>(p, nd(x).data.data() + b * item, colb);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(p.cout),
                static_cast<int>(p.patches), static_cast<int>(p.cols), 1.0, wmat,
                static_cast<int>(p.cols), colb, static_cast<int>(p.patches), 0.0,
                out.data() + b * p.cout * p.patches, static_cast<int>(p.patches));
    for (std::int64_t o = 0; o < p.cout; ++o) {
      double* row = out.data() + (b * p.cout + o) * p.patches;
      const double bo = nd(bias).data[o];
      for (std::int64_t q = 0; q < p.patches; ++q) row[q] += bo;
    }
  }

  return make_op(std::move(out_shape), std::move(out), {x, w, bias},
                 [x, w, bias, p, item, col = std::move(col)](Node& self) {
                   Node& px = nd(x);
                   Node& pw = nd(w);
                   Node& pb = nd(bias);
                   if (px.requires_grad) px.ensure_grad();
                   if (pw.requires_grad) pw.ensure_grad();
                   if (pb.requires_grad) pb.ensure_grad();
                   std::vector<double> dcol(
                       px.requires_grad ? static_cast<size_t>(p.cols * p.patches) : 0);
                   for (std::int64_t b = 0; b < p.batch; ++b) {
                     const double* gb = self.grad.data() + b * p.cout * p.patches;
                     const double* colb = col.data() + b * p.cols * p.patches;
                     if (pw.requires_grad) {
                       cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans,
                                   static_cast<int>(p.cout), static_cast<int>(p.cols),
                                   static_cast<int>(p.patches), 1.0, gb,
                                   static_cast<int>(p.patches), colb,
                                   static_cast<int>(p.patches), 1.0, pw.grad.data(),
                                   static_cast<int>(p.cols));
                     }
                     if (px.requires_grad) {
                       cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans,
                                   static_cast<int>(p.cols), static_cast<int>(p.patches),
                                   static_cast<int>(p.cout), 1.0, pw.data.data(),
                                   static_cast<int>(p.cols), gb,
                                   static_cast<int>(p.patches), 0.0, dcol.data(),
                                   static_cast<int>(p.patches));
                       col2im_add<NDim>(p, dcol.data(), px.grad.data() + b * item);
                     }
                     if (pb.requires_grad) {
                       for (std::int64_t o = 0; o < p.cout; ++o) {
                         double s = 0.0;
                         const double* row = gb + o * p.patches;
                         for (std::int64_t q = 0; q < p.patches; ++q) s += row[q];
                         pb.grad[o] += s;
                       }
                     }
                   }
                 });
}

}  // namespace

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::array<int, 3> stride, std::array<int, 3> pad) {
  return conv_nd<3>("conv3d", x, w, bias, stride, pad);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias,
              std::array<int, 2> stride, std::array<int, 2> pad) {
  return conv_nd<2>("conv2d", x, w, bias, stride, pad);
}

// ---- pooling ----

namespace {

template <int NDim>
Tensor pool_nd(const char* op, const Tensor& x, PoolKind kind,
               std::array<int, NDim> kernel, std::array<int, NDim> stride) {
  check_defined(x, op);
  require(x.rank() == NDim + 2, op,
          "expects rank " + std::to_string(NDim + 2) + ", got " + shape_str(nd(x).shape));
  const auto B = nd(x).shape[0], C = nd(x).shape[1];
  std::array<std::int64_t, NDim> in, k, out;
  for (int d = 0; d < NDim; ++d) {
    require(kernel[d] >= 1 && stride[d] >= 1, op, "kernel and stride must be >= 1");
    in[d] = nd(x).shape[2 + d];
    // Kernels wider than the axis shrink to it, so degenerate extents pool to 1.
    k[d] = std::min<std::int64_t>(kernel[d], in[d]);
    out[d] = (in[d] - k[d]) / stride[d] + 1;
  }
  std::int64_t in_sp = 1, out_sp = 1, win = 1;
  for (int d = 0; d < NDim; ++d) {
    in_sp *= in[d];
    out_sp *= out[d];
    win *= k[d];
  }
  Shape out_shape{B, C};
  for (int d = 0; d < NDim; ++d) out_shape.push_back(out[d]);

  const auto& xd = nd(x).data;
  std::vector<double> od(static_cast<size_t>(B * C * out_sp));
  // For max pooling, the flat input index of the (first) max per output cell.
  std::vector<std::int64_t> argmax(kind == PoolKind::Max ? od.size() : 0);

  std::array<std::int64_t, NDim> opos{}, kpos{};
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* src = xd.data() + bc * in_sp;
    opos.fill(0);
    for (std::int64_t q = 0; q < out_sp; ++q) {
      double best = 0.0;
      std::int64_t besti = -1;
      double acc = 0.0;
      kpos.fill(0);
      for (std::int64_t ki = 0; ki < win; ++ki) {
        std::int64_t idx = 0;
        for (int d = 0; d < NDim; ++d)
          idx = idx * in[d] + (opos[d] * stride[d] + kpos[d]);
        const double v = src[idx];
        if (kind == PoolKind::Avg) {
          acc += v;
        } else if (besti < 0 || v > best) {
          best = v;
          besti = idx;
        }
        for (int d = NDim - 1; d >= 0; --d) {
          if (++kpos[d] < k[d]) break;
          kpos[d] = 0;
        }
      }
      if (kind == PoolKind::Avg) {
        od[bc * out_sp + q] = acc / static_cast<double>(win);
      } else {
        od[bc * out_sp + q] = best;
        argmax[bc * out_sp + q] = bc * in_sp + besti;
      }
      for (int d = NDim - 1; d >= 0; --d) {
        if (++opos[d] < out[d]) break;
        opos[d] = 0;
      }
    }
  }

  return make_op(std::move(out_shape), std::move(od), {x},
                 [x, kind, in, k, out, stride, B, C, in_sp, out_sp, win,
                  argmax = std::move(argmax)](Node& self) {
                   Node& px = nd(x);
                   if (!px.requires_grad) return;
                   px.ensure_grad();
                   if (kind == PoolKind::Max) {
                     for (size_t i = 0; i < self.grad.size(); ++i)
                       px.grad[argmax[i]] += self.grad[i];
                     return;
                   }
                   const double inv = 1.0 / static_cast<double>(win);
                   std::array<std::int64_t, NDim> opos{}, kpos{};
                   for (std::int64_t bc = 0; bc < B * C; ++bc) {
                     double* dst = px.grad.data() + bc * in_sp;
                     opos.fill(0);
                     for (std::int64_t q = 0; q < out_sp; ++q) {
                       const double g = self.grad[bc * out_sp + q] * inv;
                       kpos.fill(0);
                       for (std::int64_t ki = 0; ki < win; ++ki) {
                         std::int64_t idx = 0;
                         for (int d = 0; d < NDim; ++d)
                           idx = idx * in[d] + (opos[d] * stride[d] + kpos[d]);
                         dst[idx] += g;
                         for (int d = NDim - 1; d >= 0; --d) {
                           if (++kpos[d] < k[d]) break;
                           kpos[d] = 0;
                         }
                       }
                       for (int d = NDim - 1; d >= 0; --d) {
                         if (++opos[d] < out[d]) break;
                         opos[d] = 0;
                       }
                     }
                   }
                 });
}

}  // namespace

Tensor pool3d(const Tensor& x, PoolKind kind, std::array<int, 3> kernel,
              std::array<int, 3> stride) {
  return pool_nd<3>("pool3d", x, kind, kernel, stride);
}

Tensor pool2d(const Tensor& x, PoolKind kind, std::array<int, 2> kernel,
              std::array<int, 2> stride) {
  return pool_nd<2>("pool2d", x, kind, kernel, stride);
}

Tensor global_avg_pool(const Tensor& x) {
  check_defined(x, "global_avg_pool");
  require(x.rank() >= 3, "global_avg_pool",
          "expects rank >= 3, got " + shape_str(nd(x).shape));
  const auto B = nd(x).shape[0], C = nd(x).shape[1];
  std::int64_t inner = 1;
  for (int d = 2; d < x.rank(); ++d) inner *= nd(x).shape[d];
  const auto& xd = nd(x).data;
  std::vector<double> out(static_cast<size_t>(B * C), 0.0);
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    double s = 0.0;
    for (std::int64_t i = 0; i < inner; ++i) s += xd[bc * inner + i];
    out[bc] = s / static_cast<double>(inner);
  }
  return make_op({B, C}, std::move(out), {x}, [x, inner](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    px.ensure_grad();
    const double inv = 1.0 / static_cast<double>(inner);
    for (size_t bc = 0; bc < self.grad.size(); ++bc) {
      const double g = self.grad[bc] * inv;
      for (std::int64_t i = 0; i < inner; ++i) px.grad[bc * inner + i] += g;
    }
  });
}

// ---- shape ----

Tensor reshape(const Tensor& x, Shape shape) {
  check_defined(x, "reshape");
  for (auto e : shape)
    require(e > 0, "reshape", "nonpositive extent in " + shape_str(shape));
  require(shape_numel(shape) == x.numel(), "reshape",
          shape_str(nd(x).shape) + " has " + std::to_string(x.numel()) +
              " elements, target " + shape_str(shape));
  return make_op(std::move(shape), nd(x).data, {x}, [x](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
  });
}

Tensor flatten(const Tensor& x) {
  check_defined(x, "flatten");
  require(x.rank() >= 1, "flatten", "cannot flatten an empty shape");
  return reshape(x, {nd(x).shape[0], x.numel() / nd(x).shape[0]});
}

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
  check_defined(x, "permute");
  const int r = x.rank();
  require(static_cast<int>(dims.size()) == r, "permute",
          "got " + std::to_string(dims.size()) + " dims for rank " + std::to_string(r));
  std::vector<bool> used(r, false);
  for (int d : dims) {
    require(d >= 0 && d < r && !used[d], "permute", "invalid permutation");
    used[d] = true;
  }
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) out_shape[i] = nd(x).shape[dims[i]];
  const auto in_strides = row_major_strides(nd(x).shape);
  const auto n = x.numel();
  std::vector<double> out(static_cast<size_t>(n));
  std::vector<std::int64_t> opos(r, 0);
  // src maps each output position back to its input offset; reused in backward.
  std::vector<std::int64_t> src(static_cast<size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    std::int64_t off = 0;
    for (int d = 0; d < r; ++d) off += opos[d] * in_strides[dims[d]];
    src[i] = off;
    out[i] = nd(x).data[off];
    for (int d = r - 1; d >= 0; --d) {
      if (++opos[d] < out_shape[d]) break;
      opos[d] = 0;
    }
  }
  return make_op(std::move(out_shape), std::move(out), {x},
                 [x, src = std::move(src)](Node& self) {
                   Node& px = nd(x);
                   if (!px.requires_grad) return;
                   px.ensure_grad();
                   for (size_t i = 0; i < self.grad.size(); ++i)
                     px.grad[src[i]] += self.grad[i];
                 });
}

Tensor select_dim1(const Tensor& x, std::int64_t index) {
  check_defined(x, "select_dim1");
  require(x.rank() >= 2, "select_dim1", "expects rank >= 2, got " + shape_str(nd(x).shape));
  const auto B = nd(x).shape[0], T = nd(x).shape[1];
  require(index >= 0 && index < T, "select_dim1",
          "index " + std::to_string(index) + " out of range for " + shape_str(nd(x).shape));
  std::int64_t inner = 1;
  Shape out_shape{B};
  for (int d = 2; d < x.rank(); ++d) {
    inner *= nd(x).shape[d];
    out_shape.push_back(nd(x).shape[d]);
  }
  if (out_shape.size() == 1) out_shape.push_back(1), inner = 1;
  std::vector<double> out(static_cast<size_t>(B * inner));
  for (std::int64_t b = 0; b < B; ++b)
    std::memcpy(out.data() + b * inner, nd(x).data.data() + (b * T + index) * inner,
                static_cast<size_t>(inner) * sizeof(double));
  return make_op(std::move(out_shape), std::move(out), {x},
                 [x, index, T, inner](Node& self) {
                   Node& px = nd(x);
                   if (!px.requires_grad) return;
                   px.ensure_grad();
                   const auto B = px.shape[0];
                   for (std::int64_t b = 0; b < B; ++b)
                     for (std::int64_t i = 0; i < inner; ++i)
                       px.grad[(b * T + index) * inner + i] += self.grad[b * inner + i];
                 });
}

Tensor mean_dim1(const Tensor& x) {
  check_defined(x, "mean_dim1");
  require(x.rank() >= 2, "mean_dim1", "expects rank >= 2, got " + shape_str(nd(x).shape));
  const auto B = nd(x).shape[0], T = nd(x).shape[1];
  std::int64_t inner = 1;
  Shape out_shape{B};
  for (int d = 2; d < x.rank(); ++d) {
    inner *= nd(x).shape[d];
    out_shape.push_back(nd(x).shape[d]);
  }
  if (out_shape.size() == 1) out_shape.push_back(1), inner = 1;
  std::vector<double> out(static_cast<size_t>(B * inner), 0.0);
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t t = 0; t < T; ++t)
      for (std::int64_t i = 0; i < inner; ++i)
        out[b * inner + i] += nd(x).data[(b * T + t) * inner + i];
  for (auto& v : out) v /= static_cast<double>(T);
  return make_op(std::move(out_shape), std::move(out), {x}, [x, T, inner](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    px.ensure_grad();
    const auto B = px.shape[0];
    const double inv = 1.0 / static_cast<double>(T);
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t t = 0; t < T; ++t)
        for (std::int64_t i = 0; i < inner; ++i)
          px.grad[(b * T + t) * inner + i] += self.grad[b * inner + i] * inv;
  });
}

// ---- channel-broadcast ----

namespace {

struct ChannelDims {
  std::int64_t outer, C, inner;
};

ChannelDims channel_dims(const Tensor& x, const char* op) {
  check_defined(x, op);
  require(x.rank() >= 2, op, "expects rank >= 2, got " + shape_str(nd(x).shape));
  ChannelDims d{nd(x).shape[0], nd(x).shape[1], 1};
  for (int i = 2; i < x.rank(); ++i) d.inner *= nd(x).shape[i];
  return d;
}

template <class Fwd, class Bwd>
Tensor channel_bcast(const char* op, const Tensor& x, const Tensor& v, Fwd fwd, Bwd bwd) {
  const ChannelDims d = channel_dims(x, op);
  check_defined(v, op);
  require(v.rank() == 1 && nd(v).shape[0] == d.C, op,
          "per-channel vector " + shape_str(nd(v).shape) + " does not match " +
              std::to_string(d.C) + " channels of " + shape_str(nd(x).shape));
  std::vector<double> out(nd(x).data.size());
  for (std::int64_t o = 0; o < d.outer; ++o)
    for (std::int64_t c = 0; c < d.C; ++c) {
      const double vc = nd(v).data[c];
      const std::int64_t base = (o * d.C + c) * d.inner;
      for (std::int64_t i = 0; i < d.inner; ++i)
        out[base + i] = fwd(nd(x).data[base + i], vc);
    }
  return make_op(nd(x).shape, std::move(out), {x, v}, [x, v, d, bwd](Node& self) {
    bwd(self, nd(x), nd(v), d);
  });
}

}  // namespace

Tensor channel_mean(const Tensor& x) {
  const ChannelDims d = channel_dims(x, "channel_mean");
  std::vector<double> out(static_cast<size_t>(d.C), 0.0);
  for (std::int64_t o = 0; o < d.outer; ++o)
    for (std::int64_t c = 0; c < d.C; ++c) {
      const std::int64_t base = (o * d.C + c) * d.inner;
      for (std::int64_t i = 0; i < d.inner; ++i) out[c] += nd(x).data[base + i];
    }
  const double inv = 1.0 / static_cast<double>(d.outer * d.inner);
  for (auto& v : out) v *= inv;
  return make_op({d.C}, std::move(out), {x}, [x, d, inv](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (std::int64_t o = 0; o < d.outer; ++o)
      for (std::int64_t c = 0; c < d.C; ++c) {
        const double g = self.grad[c] * inv;
        const std::int64_t base = (o * d.C + c) * d.inner;
        for (std::int64_t i = 0; i < d.inner; ++i) px.grad[base + i] += g;
      }
  });
}

Tensor channel_add(const Tensor& x, const Tensor& v) {
  return channel_bcast(
      "channel_add", x, v, [](double a, double b) { return a + b; },
      [](Node& self, Node& px, Node& pv, const ChannelDims& d) {
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
        }
        if (pv.requires_grad) {
          pv.ensure_grad();
          for (std::int64_t o = 0; o < d.outer; ++o)
            for (std::int64_t c = 0; c < d.C; ++c) {
              const std::int64_t base = (o * d.C + c) * d.inner;
              for (std::int64_t i = 0; i < d.inner; ++i)
                pv.grad[c] += self.grad[base + i];
            }
        }
      });
}

Tensor channel_sub(const Tensor& x, const Tensor& v) {
  return channel_bcast(
      "channel_sub", x, v, [](double a, double b) { return a - b; },
      [](Node& self, Node& px, Node& pv, const ChannelDims& d) {
        if (px.requires_grad) {
          px.ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) px.grad[i] += self.grad[i];
        }
        if (pv.requires_grad) {
          pv.ensure_grad();
          for (std::int64_t o = 0; o < d.outer; ++o)
            for (std::int64_t c = 0; c < d.C; ++c) {
              const std::int64_t base = (o * d.C + c) * d.inner;
              for (std::int64_t i = 0; i < d.inner; ++i)
                pv.grad[c] -= self.grad[base + i];
            }
        }
      });
}

Tensor channel_mul(const Tensor& x, const Tensor& v) {
  return channel_bcast(
      "channel_mul", x, v, [](double a, double b) { return a * b; },
      [](Node& self, Node& px, Node& pv, const ChannelDims& d) {
        if (px.requires_grad) {
          px.ensure_grad();
          for (std::int64_t o = 0; o < d.outer; ++o)
            for (std::int64_t c = 0; c < d.C; ++c) {
              const double vc = pv.data[c];
              const std::int64_t base = (o * d.C + c) * d.inner;
              for (std::int64_t i = 0; i < d.inner; ++i)
                px.grad[base + i] += self.grad[base + i] * vc;
            }
        }
        if (pv.requires_grad) {
          pv.ensure_grad();
          for (std::int64_t o = 0; o < d.outer; ++o)
            for (std::int64_t c = 0; c < d.C; ++c) {
              const std::int64_t base = (o * d.C + c) * d.inner;
              for (std::int64_t i = 0; i < d.inner; ++i)
                pv.grad[c] += self.grad[base + i] * px.data[base + i];
            }
        }
      });
}

// ---- rows ----

namespace {

void check_rows(const Tensor& x, const char* op) {
  check_defined(x, op);
  require(x.rank() == 2, op, "expects [rows, classes], got " + shape_str(nd(x).shape));
}

}  // namespace

Tensor softmax(const Tensor& x) {
  check_rows(x, "softmax");
  const auto B = nd(x).shape[0], C = nd(x).shape[1];
  std::vector<double> out(nd(x).data.size());
  for (std::int64_t b = 0; b < B; ++b) {
    const double* row = nd(x).data.data() + b * C;
    const double m = *std::max_element(row, row + C);
    double denom = 0.0;
    for (std::int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - m);
    for (std::int64_t c = 0; c < C; ++c) out[b * C + c] = std::exp(row[c] - m) / denom;
  }
  return make_op(nd(x).shape, std::move(out), {x}, [x, B, C](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (std::int64_t b = 0; b < B; ++b) {
      const double* y = self.data.data() + b * C;
      const double* g = self.grad.data() + b * C;
      double dot = 0.0;
      for (std::int64_t c = 0; c < C; ++c) dot += g[c] * y[c];
      for (std::int64_t c = 0; c < C; ++c) px.grad[b * C + c] += y[c] * (g[c] - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  check_rows(x, "log_softmax");
  const auto B = nd(x).shape[0], C = nd(x).shape[1];
  std::vector<double> out(nd(x).data.size());
  for (std::int64_t b = 0; b < B; ++b) {
    const double* row = nd(x).data.data() + b * C;
    const double m = *std::max_element(row, row + C);
    double denom = 0.0;
    for (std::int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - m);
    const double lse = m + std::log(denom);
    for (std::int64_t c = 0; c < C; ++c) out[b * C + c] = row[c] - lse;
  }
  return make_op(nd(x).shape, std::move(out), {x}, [x, B, C](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    px.ensure_grad();
    for (std::int64_t b = 0; b < B; ++b) {
      const double* y = self.data.data() + b * C;
      const double* g = self.grad.data() + b * C;
      double gs = 0.0;
      for (std::int64_t c = 0; c < C; ++c) gs += g[c];
      for (std::int64_t c = 0; c < C; ++c)
        px.grad[b * C + c] += g[c] - std::exp(y[c]) * gs;
    }
  });
}

// ---- reductions ----

Tensor sum(const Tensor& x) {
  check_defined(x, "sum");
  double s = 0.0;
  for (double v : nd(x).data) s += v;
  return make_op({1}, {s}, {x}, [x](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    px.ensure_grad();
    const double g = self.grad[0];
    for (auto& v : px.grad) v += g;
  });
}

Tensor mean(const Tensor& x) {
  check_defined(x, "mean");
  require(x.numel() > 0, "mean", "mean of empty tensor");
  double s = 0.0;
  for (double v : nd(x).data) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  return make_op({1}, {s * inv}, {x}, [x, inv](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    px.ensure_grad();
    const double g = self.grad[0] * inv;
    for (auto& v : px.grad) v += g;
  });
}

Tensor l2norm(const Tensor& x) {
  check_defined(x, "l2norm");
  double sq = 0.0;
  for (double v : nd(x).data) sq += v * v;
  const double n = std::sqrt(sq);
  return make_op({1}, {n}, {x}, [x](Node& self) {
    Node& px = nd(x);
    if (!px.requires_grad) return;
    // Subgradient 0 at the origin keeps a perfectly matched statistic inert.
    const double n = self.data[0];
    if (n == 0.0) return;
    px.ensure_grad();
    const double g = self.grad[0] / n;
    for (size_t i = 0; i < px.data.size(); ++i) px.grad[i] += g * px.data[i];
  });
}

Tensor cross_entropy(const Tensor& logits, const Tensor& targets) {
  check_rows(logits, "cross_entropy");
  check_defined(targets, "cross_entropy");
  check_same_shape(logits, targets, "cross_entropy");
  const auto B = nd(logits).shape[0], C = nd(logits).shape[1];
  // Stable forward through log-softmax; softmax probabilities saved for backward.
  std::vector<double> prob(nd(logits).data.size());
  double loss = 0.0;
  for (std::int64_t b = 0; b < B; ++b) {
    const double* row = nd(logits).data.data() + b * C;
    const double* t = nd(targets).data.data() + b * C;
    const double m = *std::max_element(row, row + C);
    double denom = 0.0;
    for (std::int64_t c = 0; c < C; ++c) denom += std::exp(row[c] - m);
    const double lse = m + std::log(denom);
    for (std::int64_t c = 0; c < C; ++c) {
      prob[b * C + c] = std::exp(row[c] - lse);
      loss -= t[c] * (row[c] - lse);
    }
  }
  loss /= static_cast<double>(B);
  return make_op({1}, {loss}, {logits, targets},
                 [logits, targets, B, C, prob = std::move(prob)](Node& self) {
                   Node& px = nd(logits);
                   if (!px.requires_grad) return;
                   px.ensure_grad();
                   const double g = self.grad[0] / static_cast<double>(B);
                   for (std::int64_t b = 0; b < B; ++b) {
                     const double* t = nd(targets).data.data() + b * C;
                     double tsum = 0.0;
                     for (std::int64_t c = 0; c < C; ++c) tsum += t[c];
                     for (std::int64_t c = 0; c < C; ++c)
                       px.grad[b * C + c] += g * (prob[b * C + c] * tsum - t[c]);
                   }
                 });
}

}  // namespace tsgf
