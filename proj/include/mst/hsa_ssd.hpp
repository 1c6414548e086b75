#pragma once

#include <algorithm>
#include <random>
#include <string>
#include <vector>

#include "mst/autodiff.hpp"
#include "mst/nn.hpp"

namespace mst {

inline constexpr real kDiscretizeEps = 1e-8;

inline std::size_t routing_width(std::size_t in, std::size_t reduction) { return std::max<std::size_t>(4, in / reduction); }

// K candidate kernels mixed by attention weights pi = softmax(route(mean(x))).
struct AConvWeights {
  Tensor kernels;  // [K, out*in], kernel k is a row-major [out, in] matrix
  Tensor biases;   // [K, out]
  LinearWeights route1;  // in -> hidden
  LinearWeights route2;  // hidden -> K

  std::size_t kernel_count() const { return kernels.dim(0); }
  std::size_t out() const { return biases.dim(1); }
  std::size_t in() const { return kernels.dim(1) / out(); }

  static AConvWeights init(std::size_t in, std::size_t out, std::size_t k, std::size_t reduction, std::mt19937_64& rng,
                           real stddev = 0.02) {
    const std::size_t hidden = routing_width(in, reduction);
    AConvWeights w;
    w.kernels = Tensor::randn({k, out * in}, rng, stddev);
    w.biases = Tensor({k, out});
    w.route1 = LinearWeights::init(in, hidden, rng, 0.1);
    w.route2 = LinearWeights::init(hidden, k, rng, 0.1);
    return w;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    fn(prefix + ".kernels", kernels);
    fn(prefix + ".biases", biases);
    route1.visit(prefix + ".route1", fn);
    route2.visit(prefix + ".route2", fn);
  }
};

// Attention over the K kernels from globally pooled features: [1, K], rows sum to 1.
inline Var kernel_attention(const Var& x, const LinearWeights& route1, const LinearWeights& route2) {
  Tape& t = *x.tape();
  CountingPause pause(t);
  Var pooled = reduce_mean(x, 0);
  return softmax(route2(relu(route1(pooled))), 1);
}

// Adaptive 1x1 convolution over tokens: x [L, in] -> [L, out] with one kernel mixture per sequence.
inline Var aconv1x1(const Var& x, const AConvWeights& w) {
  Tape& t = *x.tape();
  if (x.dim(1) != w.in()) {
    throw DimensionError("aconv1x1: input " + shape_str(x.shape()) + " for a kernel with " + std::to_string(w.in()) +
                         " input channels");
  }
  Var pi = kernel_attention(x, w.route1, w.route2);
  Var kernel, bias;
  {
    CountingPause pause(t);
    kernel = reshape(matmul(pi, t.param(w.kernels)), {w.out(), w.in()});
    bias = matmul(pi, t.param(w.biases));
  }
  return linear(x, kernel, bias, MacKind::Linear);
}

// Depthwise 3x3 kernels over C channels, mixed the same way as AConvWeights.
struct DwAConvWeights {
  Tensor kernels;  // [K, C*9]
  LinearWeights route1;
  LinearWeights route2;

  std::size_t kernel_count() const { return kernels.dim(0); }
  std::size_t channels() const { return kernels.dim(1) / 9; }

  static DwAConvWeights init(std::size_t channels, std::size_t k, std::size_t reduction, std::mt19937_64& rng,
                             real stddev = 0.1) {
    const std::size_t hidden = routing_width(channels, reduction);
    DwAConvWeights w;
    w.kernels = Tensor::randn({k, channels * 9}, rng, stddev);
    w.route1 = LinearWeights::init(channels, hidden, rng, 0.1);
    w.route2 = LinearWeights::init(hidden, k, rng, 0.1);
    return w;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    fn(prefix + ".kernels", kernels);
    route1.visit(prefix + ".route1", fn);
    route2.visit(prefix + ".route2", fn);
  }
};

struct BCPair {
  Var b;
  Var c;
};

// Residual adaptive depthwise 3x3 over B and C laid out on their token grids. Each grid is
// convolved separately, so tokens of different grids never mix.
inline BCPair adwconv3x3(const Var& b, const Var& c, const std::vector<Grid>& grids, const DwAConvWeights& w) {
  Tape& t = *b.tape();
  const std::size_t n = b.dim(1);
  if (c.shape() != b.shape()) throw DimensionError("adwconv3x3: B and C shapes differ");
  if (w.channels() != 2 * n) {
    throw DimensionError("adwconv3x3: kernels for " + std::to_string(w.channels()) + " channels, got " +
                         std::to_string(2 * n));
  }
  std::size_t covered = 0;
  for (const auto& g : grids) covered += g.cells();
  if (covered != b.dim(0)) {
    throw GeometryError("adwconv3x3: grids cover " + std::to_string(covered) + " tokens, sequence has " +
                        std::to_string(b.dim(0)));
  }
  Var bc = concat({b, c}, 1);
  Var pi = kernel_attention(bc, w.route1, w.route2);
  Var kernel;
  {
    CountingPause pause(t);
    kernel = reshape(matmul(pi, t.param(w.kernels)), {2 * n, 9});
  }
  Var out = add(bc, depthwise_conv3x3(bc, grids, kernel));
  return {slice(out, 1, 0, n), slice(out, 1, n, n)};
}

// A[t, n] = softplus(delta[t, n]) / (eps + sum_t' softplus(delta[t', n])).
inline Var discretize(const Var& delta) {
  Var sp = softplus(delta);
  return div(sp, add_scalar(reduce_sum(sp, 0), kDiscretizeEps));
}

struct SsdProjection {
  Var b;      // [L, N_s]
  Var c;      // [L, N_s]
  Var delta;  // [L, N_s]
};

// Reduce to N_s hidden states, gate and mix them, expand back to L tokens.
// A null gate means G = 1; a null mix means identity.
inline Var ssd_core(const Var& s, const SsdProjection& proj, const LinearWeights* gate, const AConvWeights* mix) {
  const std::size_t l = s.dim(0);
  if (proj.b.dim(0) != l || proj.c.shape() != proj.b.shape() || proj.delta.shape() != proj.b.shape()) {
    throw DimensionError("ssd_core: projection shapes " + shape_str(proj.b.shape()) + "/" + shape_str(proj.c.shape()) +
                         "/" + shape_str(proj.delta.shape()) + " inconsistent with input " + shape_str(s.shape()));
  }
  Var a = discretize(proj.delta);
  Var h_in = matmul(transpose(mul(a, proj.b)), s, MacKind::StateContraction);  // [N_s, D]
  Var gated = gate ? mul(silu((*gate)(h_in)), h_in) : h_in;
  Var h_out = mix ? aconv1x1(gated, *mix) : gated;
  return matmul(proj.c, h_out, MacKind::StateContraction);
}

struct HsaSsdWeights {
  NormWeights norm;
  AConvWeights proj;   // D -> 3 N_s packed as [B | C | delta]
  DwAConvWeights dw;   // 2 N_s channels (B and C)
  LinearWeights gate;  // D -> D on hidden states
  AConvWeights mix;    // D -> D on hidden states

  std::size_t state_count() const { return proj.out() / 3; }

  static HsaSsdWeights init(std::size_t d, std::size_t n, std::size_t k, std::size_t reduction, std::mt19937_64& rng) {
    HsaSsdWeights w;
    w.norm = NormWeights::init(d);
    w.proj = AConvWeights::init(d, 3 * n, k, reduction, rng, 1.0 / std::sqrt(static_cast<real>(d)));
    w.dw = DwAConvWeights::init(2 * n, k, reduction, rng);
    w.gate = LinearWeights::init(d, d, rng, 1.0 / std::sqrt(static_cast<real>(d)));
    w.mix = AConvWeights::init(d, d, k, reduction, rng, 0.5 / std::sqrt(static_cast<real>(d)));
    return w;
  }

  void visit(const std::string& prefix, const TensorVisitor& fn) {
    norm.visit(prefix + ".norm", fn);
    proj.visit(prefix + ".proj", fn);
    dw.visit(prefix + ".dw", fn);
    gate.visit(prefix + ".gate", fn);
    mix.visit(prefix + ".mix", fn);
  }
};

// LN -> packed adaptive projection -> B, C, delta -> adaptive depthwise on B, C -> SSD core -> residual.
inline Var hsa_ssd_block(const Var& s, const std::vector<Grid>& grids, const HsaSsdWeights& w) {
  const std::size_t n = w.state_count();
  Var x = w.norm(s);
  Var packed = aconv1x1(x, w.proj);
  auto parts = split(packed, 1, {n, n, n});
  BCPair bc = adwconv3x3(parts[0], parts[1], grids, w.dw);
  Var y = ssd_core(x, SsdProjection{bc.b, bc.c, parts[2]}, &w.gate, &w.mix);
  return add(s, y);
}

// MACs counted for one hsa_ssd_block over L tokens.
inline std::uint64_t hsa_ssd_block_macs(std::uint64_t l, std::uint64_t d, std::uint64_t n) {
  return l * d * 3 * n + 9 * 2 * l * n + l * n * d + n * d * d + n * d * d + l * n * d;
}

}  // namespace mst
