#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "mst/op_counter.hpp"
#include "mst/tensor.hpp"

namespace mst {

class Tape;

// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t axis) const { return value().dim(axis); }
  std::size_t size() const { return value().size(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Define-by-run recording of a forward pass. Single-threaded; one tape per worker.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  struct Node {
    const char* op = "";
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    std::vector<std::size_t> parents;
    BackwardFn backward;
    const Tensor* bound = nullptr;
  };

  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    return push("constant", std::move(value), false, {}, nullptr, nullptr);
  }

  Var leaf(Tensor value) { return push("leaf", std::move(value), true, {}, nullptr, nullptr); }

  // Leaf whose gradient is attributed to the weight tensor at this address.
  Var param(const Tensor& weight) {
    auto it = bound_.find(&weight);
    if (it != bound_.end()) return Var(this, it->second);
    Var v = push("param", weight, true, {}, nullptr, &weight);
    bound_.emplace(&weight, v.id());
    return v;
  }

  Var record(const char* op, Tensor value, std::vector<std::size_t> parents, BackwardFn backward) {
    bool rg = false;
    for (auto p : parents) rg = rg || nodes_[p].requires_grad;
    if (!rg) {
      parents.clear();
      backward = nullptr;
    }
    return push(op, std::move(value), rg, std::move(parents), std::move(backward), nullptr);
  }

  const Node& node(std::size_t id) const { return nodes_[id]; }
  std::size_t size() const { return nodes_.size(); }

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Gradient accumulator, allocated as zeros on first touch.
  Tensor& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(n.value.shape());
    return n.grad;
  }

  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  void backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: variable belongs to another tape");
    if (loss.size() != 1) {
      throw DimensionError("backward requires a scalar, got shape " + shape_str(loss.shape()));
    }
    grad(loss.id()).fill(1.0);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || n.grad.empty()) continue;
      n.backward(*this, i);
    }
  }

  Tensor grad_of(const Var& v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? Tensor(n.value.shape()) : n.grad;
  }

  // Gradient for a bound weight; zeros if the weight was never used.
  Tensor param_grad(const Tensor& weight) const {
    auto it = bound_.find(&weight);
    if (it == bound_.end() || nodes_[it->second].grad.empty()) return Tensor(weight.shape());
    return nodes_[it->second].grad;
  }

  bool uses(const Tensor& weight) const { return bound_.count(&weight) != 0; }

  void set_counter(OpCounter* counter) { counter_ = counter; }
  OpCounter* counter() const { return counter_; }
  void set_component(Component c) { component_ = c; }
  Component component() const { return component_; }

  void count(MacKind kind, std::uint64_t macs) {
    if (counter_ && counting_) counter_->add_macs(component_, kind, macs);
  }

  bool counting() const { return counting_; }
  void set_counting(bool on) { counting_ = on; }

 private:
  Var push(const char* op, Tensor value, bool rg, std::vector<std::size_t> parents, BackwardFn fn,
           const Tensor* bound) {
    if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    Node n;
    n.op = op;
    n.value = std::move(value);
    n.requires_grad = rg;
    n.parents = std::move(parents);
    n.backward = std::move(fn);
    n.bound = bound;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> bound_;
  OpCounter* counter_ = nullptr;
  Component component_ = Component::Backbone;
  bool counting_ = true;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

// Sets the tape's counting component for the lifetime of the scope.
class ComponentScope {
 public:
  ComponentScope(Tape& tape, Component c) : tape_(tape), saved_(tape.component()) { tape.set_component(c); }
  ~ComponentScope() { tape_.set_component(saved_); }
  ComponentScope(const ComponentScope&) = delete;
  ComponentScope& operator=(const ComponentScope&) = delete;

 private:
  Tape& tape_;
  Component saved_;
};

// Suspends MAC counting for the scope (kernel assembly and routing overhead).
class CountingPause {
 public:
  explicit CountingPause(Tape& tape) : tape_(tape), saved_(tape.counting()) { tape.set_counting(false); }
  ~CountingPause() { tape_.set_counting(saved_); }
  CountingPause(const CountingPause&) = delete;
  CountingPause& operator=(const CountingPause&) = delete;

 private:
  Tape& tape_;
  bool saved_;
};

struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t cells() const { return h * w; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

namespace detail {

using RowMat = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

inline ConstMap cmap(const Tensor& t, std::size_t r, std::size_t c) {
  return ConstMap(t.storage().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MutMap mmap(Tensor& t, std::size_t r, std::size_t c) {
  return MutMap(t.storage().data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

inline Tape& same_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw std::invalid_argument("operands recorded on different tapes");
  return *a.tape();
}

inline void require_rank2(const Var& v, const char* op) {
  if (v.shape().size() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(v.shape()));
  }
}

// How operand b broadcasts against a: 0 same shape, 1 trailing-axis row broadcast, 2 scalar.
inline int broadcast_mode(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return 0;
  const std::size_t nb = shape_numel(b);
  if (nb == 1) return 2;
  if (!a.empty() && nb == a.back() && (b.size() == 1 || (b.size() == 2 && b[0] == 1))) return 1;
  throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b) + " against " + shape_str(a));
}

inline std::size_t bidx(int mode, std::size_t i, std::size_t last) {
  return mode == 0 ? i : (mode == 1 ? i % last : 0);
}

template <class F, class DF>
Var unary(const Var& x, const char* op, F f, DF df) {
  Tape& t = *x.tape();
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
  const std::size_t xi = x.id();
  return t.record(op, std::move(y), {xi}, [xi, df](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.node(self).grad;
    const Tensor& xv2 = tp.value(xi);
    const Tensor& yv = tp.value(self);
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv2[i], yv[i]);
  });
}

// outer/extent/inner decomposition of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw DimensionError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Var matmul(const Var& a, const Var& b, MacKind kind = MacKind::Linear) {
  Tape& t = detail::same_tape(a, b);
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Tensor y({m, n});
  detail::mmap(y, m, n).noalias() = detail::cmap(a.value(), m, k) * detail::cmap(b.value(), k, n);
  t.count(kind, static_cast<std::uint64_t>(m) * k * n);
  const std::size_t ai = a.id(), bi = b.id();
  return t.record("matmul", std::move(y), {ai, bi}, [ai, bi, m, k, n](Tape& tp, std::size_t self) {
    auto g = detail::cmap(tp.node(self).grad, m, n);
    if (tp.requires_grad(ai)) {
      detail::mmap(tp.grad(ai), m, k).noalias() += g * detail::cmap(tp.value(bi), k, n).transpose();
    }
    if (tp.requires_grad(bi)) {
      detail::mmap(tp.grad(bi), k, n).noalias() += detail::cmap(tp.value(ai), m, k).transpose() * g;
    }
  });
}

// x·Wᵀ + b with W stored [out, in]; b may be absent (invalid Var).
inline Var linear(const Var& x, const Var& w, const Var& b = Var{}, MacKind kind = MacKind::Linear) {
  Tape& t = detail::same_tape(x, w);
  detail::require_rank2(x, "linear");
  detail::require_rank2(w, "linear");
  const std::size_t m = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (w.dim(1) != in) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const bool has_bias = b.valid();
  if (has_bias && b.size() != out) {
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match " + std::to_string(out) +
                         " outputs");
  }
  Tensor y({m, out});
  auto ym = detail::mmap(y, m, out);
  ym.noalias() = detail::cmap(x.value(), m, in) * detail::cmap(w.value(), out, in).transpose();
  if (has_bias) ym.rowwise() += detail::cmap(b.value(), 1, out).row(0);
  t.count(kind, static_cast<std::uint64_t>(m) * in * out);
  const std::size_t xi = x.id(), wi = w.id(), bi = has_bias ? b.id() : 0;
  std::vector<std::size_t> parents{xi, wi};
  if (has_bias) parents.push_back(bi);
  return t.record("linear", std::move(y), std::move(parents),
                  [xi, wi, bi, has_bias, m, in, out](Tape& tp, std::size_t self) {
                    auto g = detail::cmap(tp.node(self).grad, m, out);
                    if (tp.requires_grad(xi)) {
                      detail::mmap(tp.grad(xi), m, in).noalias() += g * detail::cmap(tp.value(wi), out, in);
                    }
                    if (tp.requires_grad(wi)) {
                      detail::mmap(tp.grad(wi), out, in).noalias() +=
                          g.transpose() * detail::cmap(tp.value(xi), m, in);
                    }
                    if (has_bias && tp.requires_grad(bi)) {
                      detail::mmap(tp.grad(bi), 1, out) += g.colwise().sum();
                    }
                  });
}

inline Var transpose(const Var& x) {
  detail::require_rank2(x, "transpose");
  const std::size_t m = x.dim(0), n = x.dim(1);
  Tensor y({n, m});
  detail::mmap(y, n, m) = detail::cmap(x.value(), m, n).transpose();
  const std::size_t xi = x.id();
  return x.tape()->record("transpose", std::move(y), {xi}, [xi, m, n](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    detail::mmap(tp.grad(xi), m, n) += detail::cmap(tp.node(self).grad, n, m).transpose();
  });
}

inline Var reshape(const Var& x, Shape shape) {
  Tensor y = x.value().reshaped(std::move(shape));
  const std::size_t xi = x.id();
  return x.tape()->record("reshape", std::move(y), {xi}, [xi](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.node(self).grad;
    Tensor& gx = tp.grad(xi);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Operand b broadcasts when it is a scalar or matches the last axis.

inline Var add(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const int mode = detail::broadcast_mode(a.shape(), b.shape(), "add");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t last = av.shape().back();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[detail::bidx(mode, i, last)];
  const std::size_t ai = a.id(), bi = b.id();
  return t.record("add", std::move(y), {ai, bi}, [ai, bi, mode, last](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[detail::bidx(mode, i, last)] += g[i];
    }
  });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const int mode = detail::broadcast_mode(a.shape(), b.shape(), "sub");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t last = av.shape().back();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[detail::bidx(mode, i, last)];
  const std::size_t ai = a.id(), bi = b.id();
  return t.record("sub", std::move(y), {ai, bi}, [ai, bi, mode, last](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[detail::bidx(mode, i, last)] -= g[i];
    }
  });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const int mode = detail::broadcast_mode(a.shape(), b.shape(), "mul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t last = av.shape().back();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[detail::bidx(mode, i, last)];
  const std::size_t ai = a.id(), bi = b.id();
  return t.record("mul", std::move(y), {ai, bi}, [ai, bi, mode, last](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    const Tensor& av2 = tp.value(ai);
    const Tensor& bv2 = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[detail::bidx(mode, i, last)];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) gb[detail::bidx(mode, i, last)] += g[i] * av2[i];
    }
  });
}

inline Var div(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  const int mode = detail::broadcast_mode(a.shape(), b.shape(), "div");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t last = av.shape().back();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] / bv[detail::bidx(mode, i, last)];
  const std::size_t ai = a.id(), bi = b.id();
  return t.record("div", std::move(y), {ai, bi}, [ai, bi, mode, last](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    const Tensor& av2 = tp.value(ai);
    const Tensor& bv2 = tp.value(bi);
    if (tp.requires_grad(ai)) {
      Tensor& ga = tp.grad(ai);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / bv2[detail::bidx(mode, i, last)];
    }
    if (tp.requires_grad(bi)) {
      Tensor& gb = tp.grad(bi);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const real d = bv2[detail::bidx(mode, i, last)];
        gb[detail::bidx(mode, i, last)] -= g[i] * av2[i] / (d * d);
      }
    }
  });
}

inline Var minimum(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("minimum: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::min(av[i], bv[i]);
  const std::size_t ai = a.id(), bi = b.id();
  return t.record("minimum", std::move(y), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    const Tensor& av2 = tp.value(ai);
    const Tensor& bv2 = tp.value(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool take_a = av2[i] <= bv2[i];
      if (take_a && tp.requires_grad(ai)) tp.grad(ai)[i] += g[i];
      if (!take_a && tp.requires_grad(bi)) tp.grad(bi)[i] += g[i];
    }
  });
}

inline Var maximum(const Var& a, const Var& b) {
  Tape& t = detail::same_tape(a, b);
  if (a.shape() != b.shape()) {
    throw DimensionError("maximum: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = std::max(av[i], bv[i]);
  const std::size_t ai = a.id(), bi = b.id();
  return t.record("maximum", std::move(y), {ai, bi}, [ai, bi](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    const Tensor& av2 = tp.value(ai);
    const Tensor& bv2 = tp.value(bi);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool take_a = av2[i] >= bv2[i];
      if (take_a && tp.requires_grad(ai)) tp.grad(ai)[i] += g[i];
      if (!take_a && tp.requires_grad(bi)) tp.grad(bi)[i] += g[i];
    }
  });
}

inline Var scale(const Var& x, real c) {
  return detail::unary(x, "scale", [c](real v) { return c * v; }, [c](real, real) { return c; });
}

inline Var add_scalar(const Var& x, real c) {
  return detail::unary(x, "add_scalar", [c](real v) { return v + c; }, [](real, real) { return 1.0; });
}

inline Var neg(const Var& x) { return scale(x, -1.0); }

inline Var square(const Var& x) {
  return detail::unary(x, "square", [](real v) { return v * v; }, [](real v, real) { return 2.0 * v; });
}

inline Var abs(const Var& x) {
  return detail::unary(
      x, "abs", [](real v) { return std::abs(v); },
      [](real v, real) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

inline Var exp(const Var& x) {
  return detail::unary(x, "exp", [](real v) { return std::exp(v); }, [](real, real y) { return y; });
}

// log(max(x, floor)); gradient is zero where the floor is active.
inline Var log(const Var& x, real floor = 0.0) {
  return detail::unary(
      x, "log", [floor](real v) { return std::log(std::max(v, floor)); },
      [floor](real v, real) { return v > floor ? 1.0 / v : 0.0; });
}

inline Var sigmoid(const Var& x) {
  return detail::unary(
      x, "sigmoid",
      [](real v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](real, real y) { return y * (1.0 - y); });
}

inline real softplus_value(real v) { return std::max<real>(v, 0.0) + std::log1p(std::exp(-std::abs(v))); }

inline Var softplus(const Var& x) {
  return detail::unary(
      x, "softplus", [](real v) { return softplus_value(v); },
      [](real v, real) {
        return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
      });
}

inline Var silu(const Var& x) {
  return detail::unary(
      x, "silu", [](real v) { return v / (1.0 + std::exp(-v)); },
      [](real v, real) {
        const real s = 1.0 / (1.0 + std::exp(-v));
        return s * (1.0 + v * (1.0 - s));
      });
}

inline Var relu(const Var& x) {
  return detail::unary(
      x, "relu", [](real v) { return v > 0 ? v : 0.0; }, [](real v, real) { return v > 0 ? 1.0 : 0.0; });
}

// Exact (erf) GELU.
inline Var gelu(const Var& x) {
  return detail::unary(
      x, "gelu", [](real v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](real v, real) {
        const real cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const real pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

// ---------------------------------------------------------------------------
// Reductions, softmax, normalization

inline Var sum(const Var& x) {
  const std::size_t xi = x.id();
  return x.tape()->record("sum", Tensor::scalar(x.value().sum()), {xi}, [xi](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const real g = tp.node(self).grad[0];
    for (auto& v : tp.grad(xi).data()) v += g;
  });
}

inline Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<real>(x.size())); }

// Sum along one axis, keeping it with extent 1.
inline Var reduce_sum(const Var& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  Shape out_shape = x.shape();
  out_shape[axis] = 1;
  Tensor y(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) y[o * s.inner + i] += xv[(o * s.extent + e) * s.inner + i];
  const std::size_t xi = x.id();
  return x.tape()->record("reduce_sum", std::move(y), {xi}, [xi, s](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.node(self).grad;
    Tensor& gx = tp.grad(xi);
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t e = 0; e < s.extent; ++e)
        for (std::size_t i = 0; i < s.inner; ++i) gx[(o * s.extent + e) * s.inner + i] += g[o * s.inner + i];
  });
}

inline Var reduce_mean(const Var& x, std::size_t axis) {
  const real n = static_cast<real>(x.shape().at(axis));
  return scale(reduce_sum(x, axis), 1.0 / n);
}

inline Var softmax(const Var& x, std::size_t axis) {
  const auto s = detail::split_axis(x.shape(), axis);
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      real mx = -std::numeric_limits<real>::infinity();
      for (std::size_t e = 0; e < s.extent; ++e) mx = std::max(mx, xv[base + e * s.inner]);
      real z = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const real v = std::exp(xv[base + e * s.inner] - mx);
        y[base + e * s.inner] = v;
        z += v;
      }
      for (std::size_t e = 0; e < s.extent; ++e) y[base + e * s.inner] /= z;
    }
  }
  const std::size_t xi = x.id();
  return x.tape()->record("softmax", std::move(y), {xi}, [xi, s](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.node(self).grad;
    const Tensor& yv = tp.value(self);
    Tensor& gx = tp.grad(xi);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        real dot = 0.0;
        for (std::size_t e = 0; e < s.extent; ++e) dot += g[base + e * s.inner] * yv[base + e * s.inner];
        for (std::size_t e = 0; e < s.extent; ++e) {
          const std::size_t k = base + e * s.inner;
          gx[k] += yv[k] * (g[k] - dot);
        }
      }
    }
  });
}

// Standardizes along `axis` of a matrix: axis 1 normalizes rows (layer norm), axis 0 columns (batch norm).
inline Var standardize(const Var& x, std::size_t axis, real eps) {
  detail::require_rank2(x, "standardize");
  const std::size_t m = x.dim(0), n = x.dim(1);
  const std::size_t groups = axis == 1 ? m : n;
  const std::size_t len = axis == 1 ? n : m;
  auto at = [n, axis](std::size_t g, std::size_t e) { return axis == 1 ? g * n + e : e * n + g; };
  const Tensor& xv = x.value();
  Tensor y(xv.shape());
  std::vector<real> inv_std(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    real mu = 0.0;
    for (std::size_t e = 0; e < len; ++e) mu += xv[at(g, e)];
    mu /= static_cast<real>(len);
    real var = 0.0;
    for (std::size_t e = 0; e < len; ++e) {
      const real d = xv[at(g, e)] - mu;
      var += d * d;
    }
    var /= static_cast<real>(len);
    inv_std[g] = 1.0 / std::sqrt(var + eps);
    for (std::size_t e = 0; e < len; ++e) y[at(g, e)] = (xv[at(g, e)] - mu) * inv_std[g];
  }
  const std::size_t xi = x.id();
  return x.tape()->record(
      "standardize", std::move(y), {xi}, [xi, groups, len, at, inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
        if (!tp.requires_grad(xi)) return;
        const Tensor& g = tp.node(self).grad;
        const Tensor& yv = tp.value(self);
        Tensor& gx = tp.grad(xi);
        for (std::size_t gr = 0; gr < groups; ++gr) {
          real mg = 0.0, mgy = 0.0;
          for (std::size_t e = 0; e < len; ++e) {
            mg += g[at(gr, e)];
            mgy += g[at(gr, e)] * yv[at(gr, e)];
          }
          mg /= static_cast<real>(len);
          mgy /= static_cast<real>(len);
          for (std::size_t e = 0; e < len; ++e) {
            const std::size_t k = at(gr, e);
            gx[k] += inv_std[gr] * (g[k] - mg - yv[k] * mgy);
          }
        }
      });
}

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, real eps = 1e-6) {
  return add(mul(standardize(x, 1, eps), gamma), beta);
}

// ---------------------------------------------------------------------------
// Structural ops

inline Var slice(const Var& x, std::size_t axis, std::size_t start, std::size_t len) {
  const auto s = detail::split_axis(x.shape(), axis);
  if (len == 0 || start + len > s.extent) {
    throw DimensionError("slice [" + std::to_string(start) + ", " + std::to_string(start + len) +
                         ") out of range for axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = len;
  Tensor y(out_shape);
  const Tensor& xv = x.value();
  for (std::size_t o = 0; o < s.outer; ++o) {
    const real* src = xv.storage().data() + (o * s.extent + start) * s.inner;
    std::copy(src, src + len * s.inner, y.storage().data() + o * len * s.inner);
  }
  const std::size_t xi = x.id();
  return x.tape()->record("slice", std::move(y), {xi}, [xi, s, start, len](Tape& tp, std::size_t self) {
    if (!tp.requires_grad(xi)) return;
    const Tensor& g = tp.node(self).grad;
    Tensor& gx = tp.grad(xi);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const std::size_t dst = (o * s.extent + start) * s.inner;
      const std::size_t src = o * len * s.inner;
      for (std::size_t k = 0; k < len * s.inner; ++k) gx[dst + k] += g[src + k];
    }
  });
}

inline Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  Tape& t = *parts.front().tape();
  Shape out_shape = parts.front().shape();
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.tape() != &t) throw std::invalid_argument("concat: operands recorded on different tapes");
    Shape a = p.shape(), b = out_shape;
    if (a.size() != b.size() || axis >= a.size()) {
      throw DimensionError("concat: rank mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    a[axis] = b[axis] = 0;
    if (a != b) throw DimensionError("concat: incompatible shapes " + shape_str(p.shape()) + " vs " + shape_str(out_shape));
    total += p.shape()[axis];
  }
  out_shape[axis] = total;
  const auto so = detail::split_axis(out_shape, axis);
  Tensor y(out_shape);
  std::vector<std::size_t> ids, offsets, extents;
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t ext = p.shape()[axis];
    const Tensor& pv = p.value();
    for (std::size_t o = 0; o < so.outer; ++o) {
      const real* src = pv.storage().data() + o * ext * so.inner;
      std::copy(src, src + ext * so.inner, y.storage().data() + (o * so.extent + off) * so.inner);
    }
    ids.push_back(p.id());
    offsets.push_back(off);
    extents.push_back(ext);
    off += ext;
  }
  std::vector<std::size_t> parents = ids;
  return t.record("concat", std::move(y), std::move(parents),
                  [ids, offsets, extents, so](Tape& tp, std::size_t self) {
                    const Tensor& g = tp.node(self).grad;
                    for (std::size_t p = 0; p < ids.size(); ++p) {
                      if (!tp.requires_grad(ids[p])) continue;
                      Tensor& gp = tp.grad(ids[p]);
                      for (std::size_t o = 0; o < so.outer; ++o) {
                        const std::size_t src = (o * so.extent + offsets[p]) * so.inner;
                        const std::size_t dst = o * extents[p] * so.inner;
                        for (std::size_t k = 0; k < extents[p] * so.inner; ++k) gp[dst + k] += g[src + k];
                      }
                    }
                  });
}

inline std::vector<Var> split(const Var& x, std::size_t axis, const std::vector<std::size_t>& extents) {
  std::size_t total = 0;
  for (auto e : extents) total += e;
  if (axis >= x.shape().size() || total != x.shape()[axis]) {
    throw DimensionError("split: extents do not cover axis " + std::to_string(axis) + " of " + shape_str(x.shape()));
  }
  std::vector<Var> out;
  std::size_t start = 0;
  for (auto e : extents) {
    out.push_back(slice(x, axis, start, e));
    start += e;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolutions on token-major feature maps: x is [H*W, C] in row-major grid order.

// k x k convolution, stride 1, zero padding k/2. Weight is [Cout, k*k*Cin] ordered (ky, kx, cin).
inline Var conv2d(const Var& x, Grid grid, const Var& w, const Var& b, std::size_t k) {
  Tape& t = detail::same_tape(x, w);
  detail::require_rank2(x, "conv2d");
  const std::size_t hw = grid.cells();
  const std::size_t cin = x.dim(1), cout = w.dim(0);
  if (x.dim(0) != hw) {
    throw GeometryError("conv2d: " + std::to_string(x.dim(0)) + " tokens for a " + std::to_string(grid.h) + "x" +
                        std::to_string(grid.w) + " grid");
  }
  if (w.dim(1) != k * k * cin) {
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " incompatible with " + std::to_string(cin) +
                         " input channels and kernel " + std::to_string(k));
  }
  const std::ptrdiff_t pad = static_cast<std::ptrdiff_t>(k / 2);
  auto im2col = [grid, cin, k, pad](const Tensor& xv) {
    Tensor cols({grid.cells(), k * k * cin});
    for (std::size_t r = 0; r < grid.h; ++r) {
      for (std::size_t c = 0; c < grid.w; ++c) {
        real* dst = cols.storage().data() + (r * grid.w + c) * k * k * cin;
        for (std::size_t ky = 0; ky < k; ++ky) {
          const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r + ky) - pad;
          for (std::size_t kx = 0; kx < k; ++kx) {
            const std::ptrdiff_t cc = static_cast<std::ptrdiff_t>(c + kx) - pad;
            real* d = dst + (ky * k + kx) * cin;
            if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(grid.h) ||
                cc >= static_cast<std::ptrdiff_t>(grid.w)) {
              continue;
            }
            const real* s = xv.storage().data() + (static_cast<std::size_t>(rr) * grid.w + cc) * cin;
            std::copy(s, s + cin, d);
          }
        }
      }
    }
    return cols;
  };
  const Tensor cols = im2col(x.value());
  Tensor y({hw, cout});
  auto ym = detail::mmap(y, hw, cout);
  ym.noalias() = detail::cmap(cols, hw, k * k * cin) * detail::cmap(w.value(), cout, k * k * cin).transpose();
  const bool has_bias = b.valid();
  if (has_bias) ym.rowwise() += detail::cmap(b.value(), 1, cout).row(0);
  t.count(MacKind::Conv, static_cast<std::uint64_t>(hw) * k * k * cin * cout);
  const std::size_t xi = x.id(), wi = w.id(), bi = has_bias ? b.id() : 0;
  std::vector<std::size_t> parents{xi, wi};
  if (has_bias) parents.push_back(bi);
  return t.record(
      "conv2d", std::move(y), std::move(parents),
      [xi, wi, bi, has_bias, grid, cin, cout, k, pad, im2col](Tape& tp, std::size_t self) {
        const std::size_t hw2 = grid.cells();
        const std::size_t kk = k * k * cin;
        auto g = detail::cmap(tp.node(self).grad, hw2, cout);
        if (tp.requires_grad(wi)) {
          const Tensor cols2 = im2col(tp.value(xi));
          detail::mmap(tp.grad(wi), cout, kk).noalias() += g.transpose() * detail::cmap(cols2, hw2, kk);
        }
        if (has_bias && tp.requires_grad(bi)) detail::mmap(tp.grad(bi), 1, cout) += g.colwise().sum();
        if (tp.requires_grad(xi)) {
          Tensor dcols({hw2, kk});
          detail::mmap(dcols, hw2, kk).noalias() = g * detail::cmap(tp.value(wi), cout, kk);
          Tensor& gx = tp.grad(xi);
          for (std::size_t r = 0; r < grid.h; ++r) {
            for (std::size_t c = 0; c < grid.w; ++c) {
              const real* src = dcols.storage().data() + (r * grid.w + c) * kk;
              for (std::size_t ky = 0; ky < k; ++ky) {
                const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r + ky) - pad;
                for (std::size_t kx = 0; kx < k; ++kx) {
                  const std::ptrdiff_t cc = static_cast<std::ptrdiff_t>(c + kx) - pad;
                  if (rr < 0 || cc < 0 || rr >= static_cast<std::ptrdiff_t>(grid.h) ||
                      cc >= static_cast<std::ptrdiff_t>(grid.w)) {
                    continue;
                  }
                  real* d = gx.storage().data() + (static_cast<std::size_t>(rr) * grid.w + cc) * cin;
                  const real* s = src + (ky * k + kx) * cin;
                  for (std::size_t ci = 0; ci < cin; ++ci) d[ci] += s[ci];
                }
              }
            }
          }
        }
      });
}

// Depthwise 3x3 convolution with zero padding applied to each grid segment of the token
// axis independently. x is [L, C] with L = sum of grid cells; kernel is [C, 9].
inline Var depthwise_conv3x3(const Var& x, const std::vector<Grid>& grids, const Var& kernel) {
  Tape& t = detail::same_tape(x, kernel);
  detail::require_rank2(x, "depthwise_conv3x3");
  const std::size_t l = x.dim(0), ch = x.dim(1);
  std::size_t total = 0;
  for (const auto& g : grids) total += g.cells();
  if (total != l) {
    throw GeometryError("depthwise_conv3x3: grids cover " + std::to_string(total) + " tokens but input has " +
                        std::to_string(l));
  }
  if (kernel.shape() != Shape{ch, 9}) {
    throw DimensionError("depthwise_conv3x3: kernel " + shape_str(kernel.shape()) + " for " + std::to_string(ch) +
                         " channels");
  }
  // Visits every (output token, input token, tap) triple inside each grid.
  auto for_each_tap = [grids, ch](auto&& fn) {
    std::size_t base = 0;
    for (const auto& g : grids) {
      for (std::size_t r = 0; r < g.h; ++r) {
        for (std::size_t c = 0; c < g.w; ++c) {
          const std::size_t out = base + r * g.w + c;
          for (int dy = -1; dy <= 1; ++dy) {
            const std::ptrdiff_t rr = static_cast<std::ptrdiff_t>(r) + dy;
            if (rr < 0 || rr >= static_cast<std::ptrdiff_t>(g.h)) continue;
            for (int dx = -1; dx <= 1; ++dx) {
              const std::ptrdiff_t cc = static_cast<std::ptrdiff_t>(c) + dx;
              if (cc < 0 || cc >= static_cast<std::ptrdiff_t>(g.w)) continue;
              const std::size_t in = base + static_cast<std::size_t>(rr) * g.w + static_cast<std::size_t>(cc);
              fn(out, in, static_cast<std::size_t>((dy + 1) * 3 + (dx + 1)));
            }
          }
        }
      }
      base += g.cells();
    }
    (void)ch;
  };
  const Tensor& xv = x.value();
  const Tensor& kv = kernel.value();
  Tensor y({l, ch});
  for_each_tap([&](std::size_t out, std::size_t in, std::size_t tap) {
    for (std::size_t c = 0; c < ch; ++c) y[out * ch + c] += kv[c * 9 + tap] * xv[in * ch + c];
  });
  t.count(MacKind::DepthwiseConv, static_cast<std::uint64_t>(9) * l * ch);
  const std::size_t xi = x.id(), ki = kernel.id();
  return t.record("depthwise_conv3x3", std::move(y), {xi, ki}, [xi, ki, ch, for_each_tap](Tape& tp, std::size_t self) {
    const Tensor& g = tp.node(self).grad;
    const Tensor& xv2 = tp.value(xi);
    const Tensor& kv2 = tp.value(ki);
    const bool gx_on = tp.requires_grad(xi), gk_on = tp.requires_grad(ki);
    Tensor* gx = gx_on ? &tp.grad(xi) : nullptr;
    Tensor* gk = gk_on ? &tp.grad(ki) : nullptr;
    for_each_tap([&](std::size_t out, std::size_t in, std::size_t tap) {
      for (std::size_t c = 0; c < ch; ++c) {
        const real go = g[out * ch + c];
        if (gx) (*gx)[in * ch + c] += go * kv2[c * 9 + tap];
        if (gk) (*gk)[c * 9 + tap] += go * xv2[in * ch + c];
      }
    });
  });
}

// ---------------------------------------------------------------------------
// Finite-difference verification

// Central-difference check of the tape gradient of scalar f at x. Returns the maximum
// relative error with denominator max(|analytic|, |numeric|, 1e-8).
inline real grad_check(const std::function<Var(Tape&, const Var&)>& f, const Tensor& x, real eps = 1e-6) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.leaf(x);
    Var y = f(tape, xv);
    tape.backward(y);
    analytic = tape.grad_of(xv);
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    Var xv = tape.leaf(at);
    return f(tape, xv).value().item();
  };
  real worst = 0.0;
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const real orig = probe[i];
    probe[i] = orig + eps;
    const real fp = eval(probe);
    probe[i] = orig - eps;
    const real fm = eval(probe);
    probe[i] = orig;
    const real numeric = (fp - fm) / (2.0 * eps);
    const real denom = std::max<real>({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

// Same check with respect to weight tensors bound through Tape::param. Perturbs the
// tensors in place and restores them. `stride` > 1 checks every stride-th entry.
inline real grad_check_weights(const std::function<Var(Tape&)>& f, const std::vector<Tensor*>& weights,
                                 real eps = 1e-6, std::size_t stride = 1) {
  if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps must lie in [1e-7, 1e-3]");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    Var y = f(tape);
    tape.backward(y);
    for (const Tensor* w : weights) analytic.push_back(tape.param_grad(*w));
  }
  auto eval = [&]() {
    Tape tape;
    return f(tape).value().item();
  };
  real worst = 0.0;
  for (std::size_t wi = 0; wi < weights.size(); ++wi) {
    Tensor& w = *weights[wi];
    for (std::size_t i = 0; i < w.size(); i += std::max<std::size_t>(stride, 1)) {
      const real orig = w[i];
      w[i] = orig + eps;
      const real fp = eval();
      w[i] = orig - eps;
      const real fm = eval();
      w[i] = orig;
      const real numeric = (fp - fm) / (2.0 * eps);
      const real denom = std::max<real>({std::abs(analytic[wi][i]), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(analytic[wi][i] - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mst
