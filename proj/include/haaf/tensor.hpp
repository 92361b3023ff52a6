// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with define-by-run reverse-mode differentiation.
//
// Every op records its inputs and a backward closure on the output node when
// any input requires a gradient. Calling backward() on a scalar walks the
// recorded DAG in reverse topological order exactly once; afterwards the
// interior of the graph is released and a second backward() on it throws.
// Leaf gradients accumulate (+=) until zero_grad() clears them.
//
// Shapes: most ops view a tensor as a matrix [rows, cols] with cols equal to
// the last dimension. Scalars have shape {1}.
#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace haaf {

#ifdef HAAF_FP32
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  ShapeError(std::string op, std::string expected, std::string actual)
      : Error(op + ": expected " + expected + ", got " + actual),
        op_(std::move(op)),
        expected_(std::move(expected)),
        actual_(std::move(actual)) {}

  const std::string& op() const noexcept { return op_; }
  const std::string& expected() const noexcept { return expected_; }
  const std::string& actual() const noexcept { return actual_; }

 private:
  std::string op_, expected_, actual_;
};

class NonFiniteError : public Error {
 public:
  using Error::Error;
};

class AutodiffError : public Error {
 public:
  using Error::Error;
};

namespace detail {

inline std::atomic<bool>& strict_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

struct Node {
  Shape shape;
  std::vector<real> values;
  std::vector<real> grad;  // empty == no gradient yet
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), real(0));
  }
};

}  // namespace detail

/// When enabled, every op rejects non-finite inputs with NonFiniteError.
inline void set_strict_finite(bool on) { detail::strict_flag().store(on); }
inline bool strict_finite() { return detail::strict_flag().load(); }

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Shared handle to a node. Copies alias the same storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto d : shape)
      if (d == 0) throw ShapeError("tensor", "positive dimensions", shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw ShapeError("tensor", std::to_string(shape_numel(shape)) + " values for " + shape_str(shape),
                       std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->values = std::move(values);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape.empty() ? Shape{1} : shape);
    return from(std::move(shape), std::vector<real>(n, real(0)), requires_grad);
  }

  static Tensor scalar(real v, bool requires_grad = false) { return from({1}, {v}, requires_grad); }

  static Tensor row(std::span<const real> v, bool requires_grad = false) {
    return from({1, v.size()}, std::vector<real>(v.begin(), v.end()), requires_grad);
  }

  bool defined() const noexcept { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  std::size_t cols() const { return node_->shape.back(); }
  std::size_t rows() const { return size() / cols(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }

  std::span<const real> values() const { return node_->values; }
  std::span<real> mutable_values() { return node_->values; }
  real item() const {
    if (size() != 1) throw ShapeError("item", "single element", shape_str(shape()));
    return node_->values[0];
  }
  real operator[](std::size_t i) const { return node_->values[i]; }
  real at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->leaf) throw AutodiffError("requires_grad can only be changed on leaf tensors");
    node_->requires_grad = on;
  }
  bool is_leaf() const { return node_->leaf; }
  const char* op() const { return node_->op; }

  bool has_grad() const { return node_->grad.size() == node_->values.size(); }
  std::span<const real> grad() const { return node_->grad; }
  std::span<real> mutable_grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of the values as a fresh leaf.
  Tensor clone(bool requires_grad) const { return from(shape(), node_->values, requires_grad); }
  Tensor detach() const { return clone(false); }

  bool same_node(const Tensor& o) const noexcept { return node_ == o.node_; }

  void backward() const;

  // Internal: used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

inline void Tensor::backward() const {
  if (!defined()) throw AutodiffError("backward: undefined tensor");
  if (size() != 1) throw AutodiffError("backward: loss must be scalar, got shape " + shape_str(shape()));
  if (node_->consumed) throw AutodiffError("backward: graph already consumed by a previous backward()");
  if (!node_->requires_grad) throw AutodiffError("backward: loss does not depend on any tensor requiring grad");
  if (node_->leaf) {
    node_->ensure_grad();
    node_->grad[0] += real(1);
    return;
  }

  // Iterative post-order DFS over interior nodes yields a topological order.
  // `order` owns the nodes so releasing inputs below cannot free them early.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<const detail::Node*> seen{node_.get()};
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(node_, 0);
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.first->consumed) throw AutodiffError("backward: graph already consumed by a previous backward()");
    if (top.second < top.first->inputs.size()) {
      std::shared_ptr<detail::Node> child = top.first->inputs[top.second++];
      if (child->requires_grad && !child->leaf && seen.insert(child.get()).second) stack.emplace_back(std::move(child), 0);
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  for (auto& n : order) n->grad.assign(n->values.size(), real(0));
  node_->grad[0] = real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node& n = **it;
    for (auto& in : n.inputs)
      if (in->requires_grad) in->ensure_grad();
    n.backward(n);
    n.backward = nullptr;
    n.inputs.clear();
    n.consumed = true;
    if (&n != node_.get()) {
      n.grad.clear();
      n.grad.shrink_to_fit();
    }
  }
}

namespace detail {

inline void check_finite(const char* op, const Tensor& t) {
  if (!strict_finite()) return;
  for (real v : t.values())
    if (!std::isfinite(v)) throw NonFiniteError(std::string(op) + ": non-finite input value");
}

template <typename... T>
void check_inputs(const char* op, const T&... ts) {
  (check_finite(op, ts), ...);
}

/// Creates the output node and wires the graph when recording is needed.
inline Tensor make_result(const char* op, Shape shape, std::vector<real> values,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  auto& n = *out.node();
  n.op = op;
  bool needs = false;
  for (auto& t : inputs) needs = needs || t.requires_grad();
  if (needs && grad_mode()) {
    n.requires_grad = true;
    n.leaf = false;
    for (auto& t : inputs) n.inputs.push_back(t.node());
    n.backward = std::move(backward);
  }
  return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(op, shape_str(a.shape()), shape_str(b.shape()));
}

inline void require_rank2(const char* op, const Tensor& a) {
  if (a.rank() != 2) throw ShapeError(op, "rank-2 tensor", shape_str(a.shape()));
}

// C[n,m] += A[n,k] * B[k,m]
inline void gemm_nn(const real* a, const real* b, real* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    real* ci = c + i * m;
    const real* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const real aip = ai[p];
      if (aip == real(0)) continue;
      const real* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += aip * bp[j];
    }
  }
}

// C[n,k] += A[n,m] * B[k,m]^T
inline void gemm_nt(const real* a, const real* b, real* c, std::size_t n, std::size_t m, std::size_t k) {
  for (std::size_t i = 0; i < n; ++i) {
    const real* ai = a + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const real* bp = b + p * m;
      real s = 0;
      for (std::size_t j = 0; j < m; ++j) s += ai[j] * bp[j];
      c[i * k + p] += s;
    }
  }
}

// C[k,m] += A[n,k]^T * B[n,m]
inline void gemm_tn(const real* a, const real* b, real* c, std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const real* ai = a + i * k;
    const real* bi = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const real aip = ai[p];
      if (aip == real(0)) continue;
      real* cp = c + p * m;
      for (std::size_t j = 0; j < m; ++j) cp[j] += aip * bi[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary(const char* op, const Tensor& x, Fwd f, Deriv df) {
  check_inputs(op, x);
  std::vector<real> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return make_result(op, x.shape(), std::move(out), {x}, [df](Node& n) {
    auto& in = *n.inputs[0];
    if (!in.requires_grad) return;
    for (std::size_t i = 0; i < n.grad.size(); ++i) in.grad[i] += n.grad[i] * df(in.values[i], n.values[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ops

/// [n,k] x [k,m] -> [n,m]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2("matmul", a);
  detail::require_rank2("matmul", b);
  const std::size_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul", "rhs rows == " + std::to_string(k), shape_str(b.shape()));
  detail::check_inputs("matmul", a, b);
  std::vector<real> c(n * m, real(0));
  detail::gemm_nn(a.values().data(), b.values().data(), c.data(), n, k, m);
  return detail::make_result("matmul", {n, m}, std::move(c), {a, b}, [n, k, m](detail::Node& node) {
    auto& A = *node.inputs[0];
    auto& B = *node.inputs[1];
    if (A.requires_grad) detail::gemm_nt(node.grad.data(), B.values.data(), A.grad.data(), n, m, k);
    if (B.requires_grad) detail::gemm_tn(A.values.data(), node.grad.data(), B.grad.data(), n, k, m);
  });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  detail::check_inputs("add", a, b);
  std::vector<real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result("add", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    for (auto& in : n.inputs)
      if (in->requires_grad)
        for (std::size_t i = 0; i < n.grad.size(); ++i) in->grad[i] += n.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  detail::check_inputs("sub", a, b);
  std::vector<real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto& A = *n.inputs[0];
    auto& B = *n.inputs[1];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (A.requires_grad) A.grad[i] += n.grad[i];
      if (B.requires_grad) B.grad[i] -= n.grad[i];
    }
  });
}

/// Elementwise product.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  detail::check_inputs("mul", a, b);
  std::vector<real> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return detail::make_result("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& n) {
    auto& A = *n.inputs[0];
    auto& B = *n.inputs[1];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (A.requires_grad) A.grad[i] += n.grad[i] * B.values[i];
      if (B.requires_grad) B.grad[i] += n.grad[i] * A.values[i];
    }
  });
}

inline Tensor scale(const Tensor& x, real c) {
  return detail::unary("scale", x, [c](real v) { return c * v; }, [c](real, real) { return c; });
}

/// x[r, :] + row for every r; row has x.cols() elements.
inline Tensor broadcast_add_row(const Tensor& x, const Tensor& row) {
  if (row.size() != x.cols())
    throw ShapeError("broadcast_add_row", "row of " + std::to_string(x.cols()) + " elements", shape_str(row.shape()));
  detail::check_inputs("broadcast_add_row", x, row);
  const std::size_t c = x.cols();
  std::vector<real> out(x.values().begin(), x.values().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += row[i % c];
  return detail::make_result("broadcast_add_row", x.shape(), std::move(out), {x, row}, [c](detail::Node& n) {
    auto& X = *n.inputs[0];
    auto& R = *n.inputs[1];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (X.requires_grad) X.grad[i] += n.grad[i];
      if (R.requires_grad) R.grad[i % c] += n.grad[i];
    }
  });
}

/// x[r, :] * row (elementwise) for every r.
inline Tensor broadcast_mul_row(const Tensor& x, const Tensor& row) {
  if (row.size() != x.cols())
    throw ShapeError("broadcast_mul_row", "row of " + std::to_string(x.cols()) + " elements", shape_str(row.shape()));
  detail::check_inputs("broadcast_mul_row", x, row);
  const std::size_t c = x.cols();
  std::vector<real> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * row[i % c];
  return detail::make_result("broadcast_mul_row", x.shape(), std::move(out), {x, row}, [c](detail::Node& n) {
    auto& X = *n.inputs[0];
    auto& R = *n.inputs[1];
    for (std::size_t i = 0; i < n.grad.size(); ++i) {
      if (X.requires_grad) X.grad[i] += n.grad[i] * R.values[i % c];
      if (R.requires_grad) R.grad[i % c] += n.grad[i] * X.values[i];
    }
  });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary("relu", x, [](real v) { return v > 0 ? v : real(0); },
                       [](real v, real) { return v > 0 ? real(1) : real(0); });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr real inv_sqrt2 = real(0.70710678118654752440);
  constexpr real inv_sqrt2pi = real(0.39894228040143267794);
  return detail::unary(
      "gelu", x, [](real v) { return real(0.5) * v * (real(1) + std::erf(v * inv_sqrt2)); },
      [](real v, real) {
        return real(0.5) * (real(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(real(-0.5) * v * v);
      });
}

inline real sigmoid(real v) {
  if (v >= 0) return real(1) / (real(1) + std::exp(-v));
  const real e = std::exp(v);
  return e / (real(1) + e);
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary("sigmoid", x, [](real v) { return sigmoid(v); },
                       [](real, real y) { return y * (real(1) - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary("tanh", x, [](real v) { return std::tanh(v); }, [](real, real y) { return real(1) - y * y; });
}

inline Tensor softmax_lastdim(const Tensor& x) {
  detail::check_inputs("softmax_lastdim", x);
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<real> out(x.size());
  for (std::size_t i = 0; i < r; ++i) {
    const real* in = x.values().data() + i * c;
    real* o = out.data() + i * c;
    const real mx = *std::max_element(in, in + c);
    real s = 0;
    for (std::size_t j = 0; j < c; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < c; ++j) o[j] /= s;
  }
  return detail::make_result("softmax_lastdim", x.shape(), std::move(out), {x}, [r, c](detail::Node& n) {
    auto& X = *n.inputs[0];
    for (std::size_t i = 0; i < r; ++i) {
      const real* y = n.values.data() + i * c;
      const real* g = n.grad.data() + i * c;
      real dot = 0;
      for (std::size_t j = 0; j < c; ++j) dot += g[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) X.grad[i * c + j] += y[j] * (g[j] - dot);
    }
  });
}

inline constexpr real kLayerNormEps = sizeof(real) == 8 ? real(1e-9) : real(1e-5);

/// Normalizes each row to zero mean and unit variance (no affine terms).
inline Tensor layernorm_lastdim(const Tensor& x, real eps = kLayerNormEps) {
  detail::check_inputs("layernorm_lastdim", x);
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<real> out(x.size());
  std::vector<real> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const real* in = x.values().data() + i * c;
    real mean = 0;
    for (std::size_t j = 0; j < c; ++j) mean += in[j];
    mean /= real(c);
    real var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= real(c);
    inv_std[i] = real(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = (in[j] - mean) * inv_std[i];
  }
  return detail::make_result("layernorm_lastdim", x.shape(), std::move(out), {x},
                             [r, c, inv_std = std::move(inv_std)](detail::Node& n) {
                               auto& X = *n.inputs[0];
                               for (std::size_t i = 0; i < r; ++i) {
                                 const real* y = n.values.data() + i * c;
                                 const real* g = n.grad.data() + i * c;
                                 real mg = 0, mgy = 0;
                                 for (std::size_t j = 0; j < c; ++j) {
                                   mg += g[j];
                                   mgy += g[j] * y[j];
                                 }
                                 mg /= real(c);
                                 mgy /= real(c);
                                 for (std::size_t j = 0; j < c; ++j)
                                   X.grad[i * c + j] += inv_std[i] * (g[j] - mg - y[j] * mgy);
                               }
                             });
}

namespace detail {
inline Shape drop_last(const Shape& s) {
  if (s.size() <= 1) return {1};
  return Shape(s.begin(), s.end() - 1);
}
}  // namespace detail

/// [..., c] -> [...]
inline Tensor mean_lastdim(const Tensor& x) {
  detail::check_inputs("mean_lastdim", x);
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<real> out(r, real(0));
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) out[i] += x[i * c + j];
    out[i] /= real(c);
  }
  return detail::make_result("mean_lastdim", detail::drop_last(x.shape()), std::move(out), {x}, [r, c](detail::Node& n) {
    auto& X = *n.inputs[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) X.grad[i * c + j] += n.grad[i] / real(c);
  });
}

/// [..., c] -> [...]; the gradient goes to the first maximal entry.
inline Tensor max_lastdim(const Tensor& x) {
  detail::check_inputs("max_lastdim", x);
  const std::size_t c = x.cols(), r = x.rows();
  std::vector<real> out(r);
  std::vector<std::size_t> arg(r);
  for (std::size_t i = 0; i < r; ++i) {
    const real* in = x.values().data() + i * c;
    arg[i] = static_cast<std::size_t>(std::max_element(in, in + c) - in);
    out[i] = in[arg[i]];
  }
  return detail::make_result("max_lastdim", detail::drop_last(x.shape()), std::move(out), {x},
                             [c, arg = std::move(arg)](detail::Node& n) {
                               auto& X = *n.inputs[0];
                               for (std::size_t i = 0; i < arg.size(); ++i) X.grad[i * c + arg[i]] += n.grad[i];
                             });
}

/// Sum of all entries -> [1].
inline Tensor sum(const Tensor& x) {
  detail::check_inputs("sum", x);
  real s = 0;
  for (real v : x.values()) s += v;
  return detail::make_result("sum", {1}, {s}, {x}, [](detail::Node& n) {
    auto& X = *n.inputs[0];
    for (auto& g : X.grad) g += n.grad[0];
  });
}

/// Concatenates along the last dimension; leading dims must agree.
inline Tensor concat_lastdim(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_lastdim", "at least one input", "none");
  const Shape lead = detail::drop_last(xs[0].shape());
  const std::size_t r = xs[0].rows();
  std::size_t total = 0;
  for (auto& t : xs) {
    if (t.rows() != r || (xs[0].rank() > 1 && detail::drop_last(t.shape()) != lead))
      throw ShapeError("concat_lastdim", "leading shape " + shape_str(lead), shape_str(t.shape()));
    detail::check_finite("concat_lastdim", t);
    total += t.cols();
  }
  std::vector<real> out(r * total);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (auto& t : xs) {
    offsets.push_back(off);
    const std::size_t c = t.cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(t.values().data() + i * c, c, out.data() + i * total + off);
    off += c;
  }
  Shape shape = xs[0].shape();
  shape.back() = total;
  return detail::make_result("concat_lastdim", shape, std::move(out), xs,
                             [r, total, offsets = std::move(offsets)](detail::Node& n) {
                               for (std::size_t k = 0; k < n.inputs.size(); ++k) {
                                 auto& in = *n.inputs[k];
                                 if (!in.requires_grad) continue;
                                 const std::size_t c = in.shape.back();
                                 for (std::size_t i = 0; i < r; ++i)
                                   for (std::size_t j = 0; j < c; ++j)
                                     in.grad[i * c + j] += n.grad[i * total + offsets[k] + j];
                               }
                             });
}

/// Stacks matrices (or row vectors) vertically: [r_i, c] -> [sum r_i, c].
inline Tensor concat_rows(const std::vector<Tensor>& xs) {
  if (xs.empty()) throw ShapeError("concat_rows", "at least one input", "none");
  const std::size_t c = xs[0].cols();
  std::size_t r = 0;
  for (auto& t : xs) {
    if (t.cols() != c || t.rank() > 2)
      throw ShapeError("concat_rows", "[*, " + std::to_string(c) + "]", shape_str(t.shape()));
    detail::check_finite("concat_rows", t);
    r += t.rows();
  }
  std::vector<real> out;
  out.reserve(r * c);
  for (auto& t : xs) out.insert(out.end(), t.values().begin(), t.values().end());
  return detail::make_result("concat_rows", {r, c}, std::move(out), xs, [](detail::Node& n) {
    std::size_t off = 0;
    for (auto& in : n.inputs) {
      if (in->requires_grad)
        for (std::size_t i = 0; i < in->values.size(); ++i) in->grad[i] += n.grad[off + i];
      off += in->values.size();
    }
  });
}

/// Half-open slice [begin, end) along axis 0 (rows) or the last axis of a
/// rank-1 or rank-2 tensor.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  if (x.rank() > 2 || axis >= x.rank())
    throw ShapeError("slice", "axis < rank <= 2", "axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  const std::size_t extent = x.dim(axis);
  if (begin >= end || end > extent)
    throw ShapeError("slice", "0 <= begin < end <= " + std::to_string(extent),
                     "[" + std::to_string(begin) + "," + std::to_string(end) + ")");
  detail::check_inputs("slice", x);
  const std::size_t r = x.rank() == 2 ? x.dim(0) : 1, c = x.cols();
  const bool rows = x.rank() == 2 && axis == 0;
  const std::size_t r0 = rows ? begin : 0, r1 = rows ? end : r;
  const std::size_t c0 = rows ? 0 : begin, c1 = rows ? c : end;
  std::vector<real> out;
  out.reserve((r1 - r0) * (c1 - c0));
  for (std::size_t i = r0; i < r1; ++i)
    for (std::size_t j = c0; j < c1; ++j) out.push_back(x[i * c + j]);
  Shape shape = x.rank() == 2 ? Shape{r1 - r0, c1 - c0} : Shape{c1 - c0};
  return detail::make_result("slice", shape, std::move(out), {x}, [=](detail::Node& n) {
    auto& X = *n.inputs[0];
    std::size_t k = 0;
    for (std::size_t i = r0; i < r1; ++i)
      for (std::size_t j = c0; j < c1; ++j) X.grad[i * c + j] += n.grad[k++];
  });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.size())
    throw ShapeError("reshape", std::to_string(x.size()) + " elements", shape_str(shape));
  detail::check_inputs("reshape", x);
  std::vector<real> out(x.values().begin(), x.values().end());
  return detail::make_result("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& n) {
    auto& X = *n.inputs[0];
    for (std::size_t i = 0; i < n.grad.size(); ++i) X.grad[i] += n.grad[i];
  });
}

inline Tensor transpose_last2(const Tensor& x) {
  detail::require_rank2("transpose_last2", x);
  detail::check_inputs("transpose_last2", x);
  const std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<real> out(x.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = x[i * c + j];
  return detail::make_result("transpose_last2", {c, r}, std::move(out), {x}, [r, c](detail::Node& n) {
    auto& X = *n.inputs[0];
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) X.grad[i * c + j] += n.grad[j * r + i];
  });
}

/// out[i] = x[index[i]], or 0 where index[i] < 0. Used for im2col.
inline Tensor gather(const Tensor& x, std::vector<std::ptrdiff_t> index, Shape shape) {
  if (shape_numel(shape) != index.size())
    throw ShapeError("gather", std::to_string(index.size()) + " output elements", shape_str(shape));
  detail::check_inputs("gather", x);
  std::vector<real> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= static_cast<std::ptrdiff_t>(x.size()))
      throw ShapeError("gather", "index < " + std::to_string(x.size()), std::to_string(index[i]));
    out[i] = index[i] < 0 ? real(0) : x[static_cast<std::size_t>(index[i])];
  }
  return detail::make_result("gather", std::move(shape), std::move(out), {x}, [index = std::move(index)](detail::Node& n) {
    auto& X = *n.inputs[0];
    for (std::size_t i = 0; i < index.size(); ++i)
      if (index[i] >= 0) X.grad[static_cast<std::size_t>(index[i])] += n.grad[i];
  });
}

/// Mean binary cross-entropy over logits, computed as
/// max(z,0) - z*y + log1p(exp(-|z|)). Returns shape [1].
inline Tensor bce_with_logits(const Tensor& logits, std::span<const real> labels) {
  if (labels.size() != logits.size())
    throw ShapeError("bce_with_logits", std::to_string(logits.size()) + " labels",
                     std::to_string(labels.size()) + " labels");
  detail::check_inputs("bce_with_logits", logits);
  const std::size_t n = logits.size();
  real total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const real z = logits[i], y = labels[i];
    total += std::max(z, real(0)) - z * y + std::log1p(std::exp(-std::abs(z)));
  }
  std::vector<real> ys(labels.begin(), labels.end());
  return detail::make_result("bce_with_logits", {1}, {total / real(n)}, {logits}, [ys = std::move(ys)](detail::Node& node) {
    auto& Z = *node.inputs[0];
    const real g = node.grad[0] / real(ys.size());
    for (std::size_t i = 0; i < ys.size(); ++i) Z.grad[i] += g * (sigmoid(Z.values[i]) - ys[i]);
  });
}

inline Tensor bce_with_logits(const Tensor& logits, std::initializer_list<real> labels) {
  return bce_with_logits(logits, std::span<const real>(labels.begin(), labels.size()));
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline real finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, real eps) {
  if (!(eps > 0)) throw std::invalid_argument("finite_diff_check: eps must be positive");
  std::vector<real> base(point.values().begin(), point.values().end());
  auto eval = [&](const std::vector<real>& v) {
    NoGradGuard ng;
    Tensor y = f(Tensor::from(point.shape(), v));
    if (y.size() != 1) throw ShapeError("finite_diff_check", "scalar-valued f", shape_str(y.shape()));
    return y.item();
  };
  const real f0 = eval(base);
  if (eval(base) != f0) throw Error("finite_diff_check: f is not deterministic");

  Tensor x = Tensor::from(point.shape(), base, true);
  Tensor y = f(x);
  if (y.size() != 1) throw ShapeError("finite_diff_check", "scalar-valued f", shape_str(y.shape()));
  std::vector<real> analytic(base.size(), real(0));
  if (y.requires_grad()) {
    y.backward();
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
  }

  real worst = 0;
  std::vector<real> probe = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    probe[i] = base[i] + eps;
    const real up = eval(probe);
    probe[i] = base[i] - eps;
    const real down = eval(probe);
    probe[i] = base[i];
    const real numeric = (up - down) / (real(2) * eps);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(real(1), std::abs(numeric)));
  }
  return worst;
}

}  // namespace haaf
