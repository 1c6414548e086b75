#include <gtest/gtest.h>

#include <random>

#include "mst/fusion.hpp"
#include "mst/grad_suite.hpp"
#include "test_util.hpp"

using namespace mst;
using mst::testing::rand_tensor;

namespace {

const Grid kTemplate{2, 2};
const Grid kSearch{4, 4};
constexpr std::size_t kLen = 20;
constexpr std::size_t kDim = 8;

TrackerConfig small() {
  TrackerConfig c;
  c.embed_dim = kDim;
  c.ssd_state_count = 4;
  c.aconv_kernel_count = 2;
  c.routing_reduction = 2;
  c.num_taps = 3;
  return c;
}

StateBundle bundle(Tape& t, const std::vector<Tensor>& xs) {
  StateBundle b;
  for (const auto& x : xs) b.states.push_back({t.constant(x), kTemplate, kSearch});
  return b;
}

std::vector<Tensor> random_states(std::mt19937_64& rng) {
  return {rand_tensor({kLen, kDim}, rng), rand_tensor({kLen, kDim}, rng), rand_tensor({kLen, kDim}, rng)};
}

template <class W>
void scramble(W& w, std::mt19937_64& rng, double s = 0.3) {
  w.visit("w", [&](const std::string&, Tensor& t) { t = rand_tensor(t.shape(), rng, s); });
}

}  // namespace

TEST(Sse, ZeroWeightsAreIdentity) {
  std::mt19937_64 rng(1);
  SseWeights w = SseWeights::init(small(), rng);
  zero_all([&](const TensorVisitor& f) { w.visit("sse", f); });
  const auto xs = random_states(rng);
  Tape t;
  StateBundle out = sse(bundle(t, xs), w);
  ASSERT_EQ(out.states.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out.states[i].tokens.value(), xs[i]);
}

TEST(Sse, SharedWeightsOnIdenticalStatesGiveIdenticalOutputs) {
  std::mt19937_64 rng(2);
  SseWeights w = SseWeights::init(small(), rng);
  scramble(w.blocks[0], rng);
  w.blocks[1] = w.blocks[0];
  w.blocks[2] = w.blocks[0];
  const Tensor x = rand_tensor({kLen, kDim}, rng);
  Tape t;
  StateBundle out = sse(bundle(t, {x, x, x}), w);
  EXPECT_EQ(out.states[0].tokens.value(), out.states[1].tokens.value());
  EXPECT_EQ(out.states[0].tokens.value(), out.states[2].tokens.value());
}

TEST(Sse, NoLeakageAcrossStates) {
  std::mt19937_64 rng(3);
  SseWeights w = SseWeights::init(small(), rng);
  scramble(w, rng);
  auto xs = random_states(rng);
  Tape t;
  StateBundle out = sse(bundle(t, xs), w);
  for (std::size_t i = 0; i < 3; ++i) {
    Var single = hsa_ssd_block(t.constant(xs[i]), {kTemplate, kSearch}, w.blocks[i]);
    EXPECT_EQ(out.states[i].tokens.value(), single.value());
  }
  // Zeroing one state changes only that state's output.
  auto zeroed = xs;
  zeroed[1].fill(0);
  StateBundle out2 = sse(bundle(t, zeroed), w);
  EXPECT_EQ(out2.states[0].tokens.value(), out.states[0].tokens.value());
  EXPECT_EQ(out2.states[2].tokens.value(), out.states[2].tokens.value());
  EXPECT_GT(max_abs_diff(out2.states[1].tokens.value(), out.states[1].tokens.value()), 1e-6);
}

TEST(Sse, BlockCountMustMatchTaps) {
  std::mt19937_64 rng(4);
  SseWeights w = SseWeights::init(small(), rng);
  w.blocks.pop_back();
  Tape t;
  EXPECT_THROW(sse(bundle(t, random_states(rng)), w), ConfigError);
}

TEST(Csi, ZeroWeightsSumStates) {
  std::mt19937_64 rng(5);
  CsiWeights w = CsiWeights::init(small(), rng);
  zero_all([&](const TensorVisitor& f) { w.visit("csi", f); });
  const auto xs = random_states(rng);
  Tape t;
  FusedState y = csi(bundle(t, xs), w);
  ASSERT_EQ(y.y.tokens.shape(), (Shape{kLen, kDim}));
  Tensor ref({kLen, kDim});
  for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = xs[0][i] + xs[1][i] + xs[2][i];
  EXPECT_LT(max_abs_diff(y.y.tokens.value(), ref), 1e-12);

  auto zeroed = xs;
  zeroed[0].fill(0);
  Tensor ref2({kLen, kDim});
  for (std::size_t i = 0; i < ref2.size(); ++i) ref2[i] = xs[1][i] + xs[2][i];
  EXPECT_LT(max_abs_diff(csi(bundle(t, zeroed), w).y.tokens.value(), ref2), 1e-12);
}

TEST(Csi, MatchesExplicitConcatenation) {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 5; ++trial) {
    CsiWeights w = CsiWeights::init(small(), rng);
    scramble(w, rng);
    const auto xs = random_states(rng);
    Tape t;
    const Tensor y = csi(bundle(t, xs), w).y.tokens.value();

    Tensor joint({3 * kLen, kDim});
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < kLen; ++i)
        for (std::size_t d = 0; d < kDim; ++d) joint(s * kLen + i, d) = xs[s](i, d);
    const std::vector<Grid> grids{kTemplate, kSearch, kTemplate, kSearch, kTemplate, kSearch};
    const Tensor z = hsa_ssd_block(t.constant(joint), grids, w.block).value();
    Tensor ref({kLen, kDim});
    for (std::size_t s = 0; s < 3; ++s)
      for (std::size_t i = 0; i < kLen; ++i)
        for (std::size_t d = 0; d < kDim; ++d) ref(i, d) += z(s * kLen + i, d);
    EXPECT_LT(max_abs_diff(y, ref), 1e-12);
  }
}

TEST(Csi, MismatchedStatesRejected) {
  std::mt19937_64 rng(7);
  CsiWeights w = CsiWeights::init(small(), rng);
  Tape t;
  StateBundle b = bundle(t, random_states(rng));
  b.states[2].search_grid = Grid{2, 8};
  EXPECT_THROW(csi(b, w), GeometryError);
  EXPECT_THROW(csi(StateBundle{}, w), GeometryError);
}

TEST(Fusion, ZeroedStackIsStateSum) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 10; ++trial) {
    SseWeights sw = SseWeights::init(small(), rng);
    CsiWeights cw = CsiWeights::init(small(), rng);
    zero_all([&](const TensorVisitor& f) {
      sw.visit("sse", f);
      cw.visit("csi", f);
    });
    const auto xs = random_states(rng);
    Tape t;
    const Tensor y = csi(sse(bundle(t, xs), sw), cw).y.tokens.value();
    Tensor ref({kLen, kDim});
    for (std::size_t i = 0; i < ref.size(); ++i) ref[i] = xs[0][i] + xs[1][i] + xs[2][i];
    EXPECT_LT(max_abs_diff(y, ref), 1e-12);
  }
}

TEST(Fusion, GradientReachesEveryState) {
  std::mt19937_64 rng(9);
  SseWeights sw = SseWeights::init(small(), rng);
  CsiWeights cw = CsiWeights::init(small(), rng);
  scramble(sw, rng);
  scramble(cw, rng);
  const auto xs = random_states(rng);
  Tape t;
  StateBundle b;
  std::vector<Var> leaves;
  for (const auto& x : xs) {
    leaves.push_back(t.leaf(x));
    b.states.push_back({leaves.back(), kTemplate, kSearch});
  }
  t.backward(sum(csi(sse(b, sw), cw).y.tokens));
  for (const auto& v : leaves) {
    const Tensor g = t.grad_of(v);
    double norm = 0;
    for (std::size_t i = 0; i < g.size(); ++i) norm += g[i] * g[i];
    EXPECT_GT(norm, 1e-8);
  }
}

TEST(Fusion, StackGradientsFewSeeds) {
  for (const auto& row : run_grad_suite("state-fusion", 3)) EXPECT_LT(row.worst, 1e-4) << row.name;
}
