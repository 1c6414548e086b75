#pragma once

#include <cmath>
#include <vector>

#include "mst/hsa_ssd.hpp"

namespace mst {

struct SsdProjectionValues {
  Tensor b;
  Tensor c;
  Tensor delta;
};

namespace oracle_detail {

inline Tensor discretize_loops(const Tensor& delta) {
  const std::size_t l = delta.dim(0), n = delta.dim(1);
  Tensor a({l, n});
  for (std::size_t j = 0; j < n; ++j) {
    real total = 0.0;
    for (std::size_t t = 0; t < l; ++t) total += softplus_value(delta(t, j));
    for (std::size_t t = 0; t < l; ++t) a(t, j) = softplus_value(delta(t, j)) / (kDiscretizeEps + total);
  }
  return a;
}

struct Mixture {
  Tensor kernel;  // [out, in]
  std::vector<real> bias;
};

inline Mixture mix_kernels(const Tensor& pooled_rows, const AConvWeights& w) {
  const std::size_t rows = pooled_rows.dim(0), in = w.in(), out = w.out(), k = w.kernel_count();
  std::vector<real> pooled(in, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t i = 0; i < in; ++i) pooled[i] += pooled_rows(r, i) / static_cast<real>(rows);
  const std::size_t hidden = w.route1.out();
  std::vector<real> hid(hidden);
  for (std::size_t h = 0; h < hidden; ++h) {
    real v = w.route1.b[h];
    for (std::size_t i = 0; i < in; ++i) v += w.route1.w(h, i) * pooled[i];
    hid[h] = v > 0 ? v : 0.0;
  }
  std::vector<real> logits(k);
  real mx = -1e300;
  for (std::size_t j = 0; j < k; ++j) {
    real v = w.route2.b[j];
    for (std::size_t h = 0; h < hidden; ++h) v += w.route2.w(j, h) * hid[h];
    logits[j] = v;
    mx = std::max(mx, v);
  }
  real z = 0.0;
  for (auto& v : logits) z += (v = std::exp(v - mx));
  Mixture m{Tensor({out, in}), std::vector<real>(out, 0.0)};
  for (std::size_t j = 0; j < k; ++j) {
    const real pi = logits[j] / z;
    for (std::size_t o = 0; o < out; ++o) {
      m.bias[o] += pi * w.biases(j, o);
      for (std::size_t i = 0; i < in; ++i) m.kernel(o, i) += pi * w.kernels(j, o * in + i);
    }
  }
  return m;
}

}  // namespace oracle_detail

// L x L token-mixing matrix sum_n C[:, n] (A ⊙ B)[:, n]ᵀ.
inline Tensor token_mixing_matrix(const Tensor& c, const Tensor& ab) {
  const std::size_t l = c.dim(0), n = c.dim(1);
  Tensor m({l, l});
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t s = 0; s < l; ++s)
      for (std::size_t j = 0; j < n; ++j) m(t, s) += c(t, j) * ab(s, j);
  return m;
}

// Quadratic reference for ssd_core. Hidden states are only used to evaluate the gate and
// kernel attention; the output is assembled token-to-token through per-state L x L
// mixing matrices: Y[t] = sum_n sum_s C[t,n] AB[s,n] ((G_n ⊙ S_s) W̃ᵀ) + (sum_n C[t,n]) b̃.
inline Tensor ssd_oracle(const Tensor& s, const SsdProjectionValues& proj, const LinearWeights* gate,
                         const AConvWeights* mix) {
  const std::size_t l = s.dim(0), d = s.dim(1), n = proj.b.dim(1);
  const Tensor a = oracle_detail::discretize_loops(proj.delta);
  Tensor ab({l, n});
  for (std::size_t t = 0; t < l; ++t)
    for (std::size_t j = 0; j < n; ++j) ab(t, j) = a(t, j) * proj.b(t, j);

  Tensor h_in({n, d});
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t e = 0; e < d; ++e) h_in(j, e) += ab(t, j) * s(t, e);

  Tensor g({n, d}, 1.0);
  if (gate) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t o = 0; o < d; ++o) {
        real v = gate->b[o];
        for (std::size_t e = 0; e < d; ++e) v += gate->w(o, e) * h_in(j, e);
        g(j, o) = v / (1.0 + std::exp(-v));
      }
    }
  }

  Tensor kernel({d, d});
  std::vector<real> bias(d, 0.0);
  if (mix) {
    Tensor gated({n, d});
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t e = 0; e < d; ++e) gated(j, e) = g(j, e) * h_in(j, e);
    auto m = oracle_detail::mix_kernels(gated, *mix);
    kernel = std::move(m.kernel);
    bias = std::move(m.bias);
  } else {
    for (std::size_t e = 0; e < d; ++e) kernel(e, e) = 1.0;
  }

  Tensor y({l, d});
  Tensor p({l, d});
  Tensor mn({l, l});
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t t = 0; t < l; ++t) {
      for (std::size_t o = 0; o < d; ++o) {
        real v = 0.0;
        for (std::size_t e = 0; e < d; ++e) v += g(j, e) * s(t, e) * kernel(o, e);
        p(t, o) = v;
      }
    }
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t u = 0; u < l; ++u) mn(t, u) = proj.c(t, j) * ab(u, j);
    for (std::size_t t = 0; t < l; ++t)
      for (std::size_t u = 0; u < l; ++u) {
        const real m = mn(t, u);
        for (std::size_t o = 0; o < d; ++o) y(t, o) += m * p(u, o);
      }
  }
  for (std::size_t t = 0; t < l; ++t) {
    real csum = 0.0;
    for (std::size_t j = 0; j < n; ++j) csum += proj.c(t, j);
    for (std::size_t o = 0; o < d; ++o) y(t, o) += csum * bias[o];
  }
  return y;
}

}  // namespace mst
