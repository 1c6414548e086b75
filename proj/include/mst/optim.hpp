#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mst/model.hpp"

namespace mst {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled weight decay; decay applies to matrices and kernels only (rank >= 2).
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {}

  void step(MstModel& model, const std::vector<Tensor>& grads, double lr) {
    std::vector<Tensor*> params;
    model.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });
    if (grads.size() != params.size()) throw DimensionError("AdamW: gradient count does not match parameters");
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->shape());
        v_.emplace_back(p->shape());
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor& p = *params[i];
      const Tensor& g = grads[i];
      auto m = m_[i].data();
      auto v = v_[i].data();
      const bool decay = p.rank() >= 2;
      for (std::size_t j = 0; j < p.size(); ++j) {
        m[j] = opt_.beta1 * m[j] + (1 - opt_.beta1) * g[j];
        v[j] = opt_.beta2 * v[j] + (1 - opt_.beta2) * g[j] * g[j];
        if (decay) p[j] -= lr * opt_.weight_decay * p[j];
        p[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + opt_.eps);
      }
    }
  }

  std::size_t steps() const { return t_; }

 private:
  AdamWOptions opt_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

}  // namespace mst
