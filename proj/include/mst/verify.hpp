#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mst/backbone.hpp"
#include "mst/fusion.hpp"
#include "mst/head.hpp"
#include "mst/hsa_ssd.hpp"
#include "mst/ssd_oracle.hpp"

namespace mst {

// A named finite-difference check; run(seed) returns the max relative error.
// Composite cases have many weights with gradients near the 1e-8 floor, where double
// central differences are roundoff-bound; run_grad_suite evaluates them with long double.
struct GradCase {
  std::string module;
  std::string name;
  std::function<real(std::uint64_t)> run;

  bool composite() const { return module != "tensor-autodiff"; }
};

inline constexpr real kGradCheckEps = 1e-6;

namespace verify_detail {

// Reduces any output to a scalar through fixed random weights so every output entry matters.
inline Var project(const Var& y, std::mt19937_64& rng) {
  Tape& t = *y.tape();
  return sum(mul(y, t.constant(Tensor::randn(y.shape(), rng))));
}

inline Tensor positive(Shape s, std::mt19937_64& rng) { return Tensor::uniform(std::move(s), rng, 0.5, 2.0); }

// Unary case on input x drawn by `make`; `op` builds the output.
inline GradCase unary(std::string name, std::function<Tensor(std::mt19937_64&)> make,
                      std::function<Var(Tape&, const Var&, std::mt19937_64&)> op) {
  return {"tensor-autodiff", std::move(name), [make, op](std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            const Tensor x = make(rng);
            const std::uint64_t sub = rng();
            return grad_check(
                [&](Tape& t, const Var& v) {
                  std::mt19937_64 r(sub);  // same constants on every evaluation
                  return project(op(t, v, r), r);
                },
                x, kGradCheckEps);
          }};
}

struct SmallBlock {
  std::vector<Grid> grids{{2, 2}, {2, 4}};
  std::size_t l = 12, d = 8, n = 4, k = 2;
};

// Non-trivial fusion weights: LN affine and biases randomized so no path is degenerate.
inline void jitter(const std::function<void(const TensorVisitor&)>& visit, std::mt19937_64& rng, real s = 0.1) {
  visit([&](const std::string&, Tensor& t) {
    Tensor n = Tensor::randn(t.shape(), rng, s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += n[i];
  });
}

}  // namespace verify_detail

inline std::vector<GradCase> grad_cases() {
  using namespace verify_detail;
  auto mat = [](std::size_t r, std::size_t c) {
    return [r, c](std::mt19937_64& g) { return Tensor::randn({r, c}, g); };
  };
  auto pos = [](std::size_t r, std::size_t c) {
    return [r, c](std::mt19937_64& g) { return positive({r, c}, g); };
  };
  std::vector<GradCase> cases;
  auto add_case = [&](GradCase c) { cases.push_back(std::move(c)); };

  add_case(unary("matmul.lhs", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return matmul(x, t.constant(Tensor::randn({4, 5}, r)));
  }));
  add_case(unary("matmul.rhs", mat(4, 5), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return matmul(t.constant(Tensor::randn({3, 4}, r)), x);
  }));
  add_case(unary("linear", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return linear(x, t.constant(Tensor::randn({5, 4}, r)), t.constant(Tensor::randn({5}, r)));
  }));
  add_case(unary("linear.weight", mat(5, 4), [](Tape& t, const Var& w, std::mt19937_64& r) {
    return linear(t.constant(Tensor::randn({3, 4}, r)), w, t.constant(Tensor::randn({5}, r)));
  }));
  add_case(unary("transpose", mat(3, 5), [](Tape&, const Var& x, std::mt19937_64&) { return transpose(x); }));
  add_case(unary("reshape", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return reshape(x, {2, 6}); }));
  add_case(unary("add", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return add(x, t.constant(Tensor::randn({3, 4}, r)));
  }));
  add_case(unary("add.broadcast_row", mat(1, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return add(t.constant(Tensor::randn({3, 4}, r)), reshape(x, {4}));
  }));
  add_case(unary("sub", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return sub(t.constant(Tensor::randn({3, 4}, r)), x);
  }));
  add_case(unary("mul", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return mul(x, t.constant(Tensor::randn({3, 4}, r)));
  }));
  add_case(unary("mul.self", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return mul(x, x); }));
  add_case(unary("div.numerator", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return div(x, t.constant(positive({3, 4}, r)));
  }));
  add_case(unary("div.denominator", pos(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return div(t.constant(Tensor::randn({3, 4}, r)), x);
  }));
  add_case(unary("minimum", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return minimum(x, t.constant(Tensor::randn({3, 4}, r)));
  }));
  add_case(unary("maximum", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return maximum(x, t.constant(Tensor::randn({3, 4}, r)));
  }));
  add_case(unary("scale", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return scale(x, -1.7); }));
  add_case(unary("add_scalar", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return add_scalar(x, 0.3); }));
  add_case(unary("square", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return square(x); }));
  add_case(unary("abs", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return abs(x); }));
  add_case(unary("exp", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return exp(x); }));
  add_case(unary("log", pos(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return log(x); }));
  add_case(unary("sigmoid", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return sigmoid(x); }));
  add_case(unary("softplus", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return softplus(x); }));
  add_case(unary("silu", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return silu(x); }));
  add_case(unary("relu", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return relu(x); }));
  add_case(unary("gelu", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return gelu(x); }));
  add_case(unary("sum", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return sum(x); }));
  add_case(unary("mean", mat(3, 4), [](Tape&, const Var& x, std::mt19937_64&) { return mean(x); }));
  for (std::size_t axis : {0u, 1u}) {
    const std::string a = std::to_string(axis);
    add_case(unary("reduce_sum.axis" + a, mat(3, 4),
                   [axis](Tape&, const Var& x, std::mt19937_64&) { return reduce_sum(x, axis); }));
    add_case(unary("reduce_mean.axis" + a, mat(3, 4),
                   [axis](Tape&, const Var& x, std::mt19937_64&) { return reduce_mean(x, axis); }));
    add_case(unary("softmax.axis" + a, mat(3, 4),
                   [axis](Tape&, const Var& x, std::mt19937_64&) { return softmax(x, axis); }));
    add_case(unary("standardize.axis" + a, mat(5, 4),
                   [axis](Tape&, const Var& x, std::mt19937_64&) { return standardize(x, axis, 1e-5); }));
  }
  add_case(unary("layer_norm", mat(3, 6), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return layer_norm(x, t.constant(Tensor::randn({6}, r)), t.constant(Tensor::randn({6}, r)));
  }));
  add_case(unary("layer_norm.gamma", mat(1, 6), [](Tape& t, const Var& g, std::mt19937_64& r) {
    return layer_norm(t.constant(Tensor::randn({3, 6}, r)), reshape(g, {6}), t.constant(Tensor::randn({6}, r)));
  }));
  add_case(unary("slice", mat(5, 4), [](Tape&, const Var& x, std::mt19937_64&) {
    return add(slice(x, 0, 1, 3), slice(x, 0, 2, 3));
  }));
  add_case(unary("concat.axis0", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return concat({x, t.constant(Tensor::randn({2, 4}, r)), x}, 0);
  }));
  add_case(unary("concat.axis1", mat(3, 4), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return concat({t.constant(Tensor::randn({3, 2}, r)), x}, 1);
  }));
  add_case(unary("split", mat(6, 4), [](Tape&, const Var& x, std::mt19937_64&) {
    auto p = split(x, 0, {1, 2, 3});
    return concat({mul(p[0], p[0]), p[2], p[1]}, 0);
  }));
  add_case(unary("conv2d.3x3", mat(12, 3), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return conv2d(x, Grid{3, 4}, t.constant(Tensor::randn({2, 27}, r)), t.constant(Tensor::randn({2}, r)), 3);
  }));
  add_case(unary("conv2d.weight", mat(2, 27), [](Tape& t, const Var& w, std::mt19937_64& r) {
    return conv2d(t.constant(Tensor::randn({12, 3}, r)), Grid{3, 4}, w, Var{}, 3);
  }));
  add_case(unary("conv2d.1x1", mat(12, 3), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return conv2d(x, Grid{3, 4}, t.constant(Tensor::randn({2, 3}, r)), t.constant(Tensor::randn({2}, r)), 1);
  }));
  add_case(unary("depthwise_conv3x3", mat(13, 2), [](Tape& t, const Var& x, std::mt19937_64& r) {
    return depthwise_conv3x3(x, {Grid{3, 3}, Grid{2, 2}}, t.constant(Tensor::randn({2, 9}, r)));
  }));
  add_case(unary("depthwise_conv3x3.kernel", mat(2, 9), [](Tape& t, const Var& k, std::mt19937_64& r) {
    return depthwise_conv3x3(t.constant(Tensor::randn({13, 2}, r)), {Grid{3, 3}, Grid{2, 2}}, k);
  }));

  // Composite blocks.
  cases.push_back({"backbone-msg", "attention_block", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     TrackerConfig c;
                     c.embed_dim = 8;
                     c.num_heads = 2;
                     c.mlp_ratio = 2.0;
                     AttentionWeights w = AttentionWeights::init(c, rng);
                     jitter([&](const TensorVisitor& f) { w.visit("a", f); }, rng, 0.3);
                     const Tensor x = Tensor::randn({5, 8}, rng, 0.1);
                     const Tensor proj = Tensor::randn({5, 8}, rng);
                     auto f = [&](Tape& t, const Var& v) { return sum(mul(attention_block(v, w, 2), t.constant(proj))); };
                     std::vector<Tensor*> ws;
                     w.visit("a", [&](const std::string&, Tensor& t) { ws.push_back(&t); });
                     const Tensor xc = x;
                     const real ex = grad_check(f, x, kGradCheckEps);
                     const real ew = grad_check_weights(
                         [&](Tape& t) { return f(t, t.constant(xc)); }, ws, kGradCheckEps);
                     return std::max(ex, ew);
                   }});

  cases.push_back({"hsa-ssd", "hsa_ssd_block", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     SmallBlock b;
                     HsaSsdWeights w = HsaSsdWeights::init(b.d, b.n, b.k, 2, rng);
                     jitter([&](const TensorVisitor& f) { w.visit("s", f); }, rng, 0.3);
                     const Tensor x = Tensor::randn({b.l, b.d}, rng, 0.1);
                     const Tensor proj = Tensor::randn({b.l, b.d}, rng);
                     auto f = [&](Tape& t, const Var& v) {
                       return sum(mul(hsa_ssd_block(v, b.grids, w), t.constant(proj)));
                     };
                     std::vector<Tensor*> ws;
                     w.visit("s", [&](const std::string&, Tensor& t) { ws.push_back(&t); });
                     const real ex = grad_check(f, x, kGradCheckEps);
                     const real ew = grad_check_weights([&](Tape& t) { return f(t, t.constant(x)); }, ws,
                                                          kGradCheckEps);
                     return std::max(ex, ew);
                   }});

  cases.push_back({"state-fusion", "sse_csi_stack", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     TrackerConfig c;
                     c.embed_dim = 8;
                     c.ssd_state_count = 4;
                     c.aconv_kernel_count = 2;
                     c.routing_reduction = 2;
                     c.num_taps = 3;
                     SseWeights sw = SseWeights::init(c, rng);
                     CsiWeights cw = CsiWeights::init(c, rng);
                     jitter([&](const TensorVisitor& f) { sw.visit("sse", f); }, rng, 0.3);
                     jitter([&](const TensorVisitor& f) { cw.visit("csi", f); }, rng, 0.3);
                     const Grid tg{2, 2}, sg{2, 4};
                     const Tensor x = Tensor::randn({36, 8}, rng, 0.1);
                     const Tensor proj = Tensor::randn({12, 8}, rng);
                     auto f = [&](Tape& t, const Var& v) {
                       StateBundle b;
                       for (std::size_t i = 0; i < 3; ++i) b.states.push_back({slice(v, 0, 12 * i, 12), tg, sg});
                       return sum(mul(csi(sse(b, sw), cw).y.tokens, t.constant(proj)));
                     };
                     std::vector<Tensor*> ws;
                     sw.visit("sse", [&](const std::string&, Tensor& t) { ws.push_back(&t); });
                     cw.visit("csi", [&](const std::string&, Tensor& t) { ws.push_back(&t); });
                     const real ex = grad_check(f, x, kGradCheckEps);
                     const real ew = grad_check_weights([&](Tape& t) { return f(t, t.constant(x)); }, ws,
                                                          kGradCheckEps, 3);
                     return std::max(ex, ew);
                   }});

  cases.push_back({"head-and-loss", "total_loss", [](std::uint64_t seed) {
                     std::mt19937_64 rng(seed);
                     TrackerConfig c;
                     c.embed_dim = 8;
                     c.head_channels = 8;
                     c.patch_size = 16;
                     c.template_size = 32;
                     c.search_size = 64;
                     HeadWeights w = HeadWeights::init(c, rng);
                     jitter([&](const TensorVisitor& f) { w.visit("h", f); }, rng, 0.2);
                     const Tensor tokens = Tensor::randn({4 + 16, 8}, rng);
                     auto head = [&](Tape& t) {
                       FusedState y{TokenSequence{t.constant(tokens), Grid{2, 2}, Grid{4, 4}}};
                       return head_forward(y, w, BnMode::Batch);
                     };
                     // Generic point: the target partially overlaps the prediction at its cell on both
                     // axes, so no regression term sits on a nesting plateau or a kink.
                     std::uniform_real_distribution<real> u(0.0, 1.0);
                     const Cell cell{1 + rng() % 2, 1 + rng() % 2};
                     BoxXYWH gt;
                     {
                       Tape t;
                       const BoxXYWH pred = decode_at(to_maps(head(t)), cell, static_cast<real>(c.search_size));
                       const real sx = (u(rng) < 0.5 ? -1 : 1) * (0.2 + 0.1 * u(rng));
                       const real sy = (u(rng) < 0.5 ? -1 : 1) * (0.2 + 0.1 * u(rng));
                       gt = BoxXYWH::from_center(pred.cx() + sx * pred.w, pred.cy() + sy * pred.h,
                                                 pred.w * (0.8 + 0.4 * u(rng)), pred.h * (0.8 + 0.4 * u(rng)));
                       // Keep the center inside the chosen cell so the regression terms read it.
                       const real cs = static_cast<real>(c.patch_size);
                       const real cx = std::clamp<real>(gt.cx(), cell.col * cs + 0.5, (cell.col + 1) * cs - 0.5);
                       const real cy = std::clamp<real>(gt.cy(), cell.row * cs + 0.5, (cell.row + 1) * cs - 0.5);
                       gt = BoxXYWH::from_center(cx, cy, gt.w, gt.h);
                     }
                     auto f = [&](Tape& t) { return total_loss(head(t), gt, c.search_size, c.patch_size).total; };
                     std::vector<Tensor*> ws;
                     w.visit("h", [&](const std::string&, Tensor& t) { ws.push_back(&t); });
                     return grad_check_weights(f, ws, kGradCheckEps);
                   }});
  return cases;
}

inline std::vector<std::string> grad_modules() {
  return {"tensor-autodiff", "backbone-msg", "hsa-ssd", "state-fusion", "head-and-loss"};
}

struct OracleTrial {
  std::size_t l = 0, d = 0, n = 0, k = 0;
  real max_abs_dev = 0.0;
  real max_abs_output = 0.0;
  real relative() const { return max_abs_output > 0 ? max_abs_dev / max_abs_output : max_abs_dev; }
};

// Random configuration with L <= 128, D <= 64, N_s <= 16, K <= 4: linear ssd_core vs quadratic oracle.
inline OracleTrial ssd_oracle_trial(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
  };
  OracleTrial tr;
  tr.n = pick(1, 16);
  tr.l = pick(2 * tr.n, 128);
  tr.d = pick(1, 64);
  tr.k = pick(1, 4);
  const Tensor s = Tensor::randn({tr.l, tr.d}, rng);
  const SsdProjectionValues pv{Tensor::randn({tr.l, tr.n}, rng), Tensor::randn({tr.l, tr.n}, rng),
                               Tensor::randn({tr.l, tr.n}, rng)};
  const LinearWeights gate = LinearWeights::init(tr.d, tr.d, rng, 0.3);
  AConvWeights mix = AConvWeights::init(tr.d, tr.d, tr.k, 2, rng, 0.3);
  mix.biases = Tensor::randn(mix.biases.shape(), rng, 0.3);
  Tape tape;
  const SsdProjection proj{tape.constant(pv.b), tape.constant(pv.c), tape.constant(pv.delta)};
  const Tensor y = ssd_core(tape.constant(s), proj, &gate, &mix).value();
  const Tensor ref = ssd_oracle(s, pv, &gate, &mix);
  tr.max_abs_dev = max_abs_diff(y, ref);
  tr.max_abs_output = ref.max_abs();
  return tr;
}

}  // namespace mst
