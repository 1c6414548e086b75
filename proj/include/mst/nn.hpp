#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "mst/autodiff.hpp"

namespace mst {

using TensorVisitor = std::function<void(const std::string& name, Tensor& tensor)>;

// Weight x·Wᵀ + b, W stored [out, in]. An empty b means no bias.
struct LinearWeights {
  Tensor w;
  Tensor b;

  static LinearWeights init(std::size_t in, std::size_t out, std::mt19937_64& rng, real stddev = 0.02,
                            bool bias = true) {
    return {Tensor::randn({out, in}, rng, stddev), bias ? Tensor({out}) : Tensor()};
  }

  std::size_t in() const { return w.dim(1); }
  std::size_t out() const { return w.dim(0); }

  Var operator()(const Var& x, MacKind kind = MacKind::Linear) const {
    Tape& t = *x.tape();
    return linear(x, t.param(w), b.empty() ? Var{} : t.param(b), kind);
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    fn(prefix + ".weight", w);
    if (!b.empty()) fn(prefix + ".bias", b);
  }
};

struct NormWeights {
  Tensor gamma;
  Tensor beta;

  static NormWeights init(std::size_t dim) { return {Tensor({dim}, 1.0), Tensor({dim})}; }

  Var operator()(const Var& x, real eps = 1e-6) const {
    Tape& t = *x.tape();
    return layer_norm(x, t.param(gamma), t.param(beta), eps);
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    fn(prefix + ".gamma", gamma);
    fn(prefix + ".beta", beta);
  }
};

// He initialization for ReLU convolutions.
inline Tensor he_init(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  return Tensor::randn(std::move(shape), rng, std::sqrt(2.0 / static_cast<real>(fan_in)));
}

inline void zero_all(const std::function<void(const TensorVisitor&)>& visit) {
  visit([](const std::string&, Tensor& t) { t.fill(0.0); });
}

}  // namespace mst
