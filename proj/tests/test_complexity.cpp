#include <gtest/gtest.h>

#include <random>

#include "mst/complexity.hpp"
#include "mst/hsa_ssd.hpp"
#include "test_util.hpp"

using namespace mst;
using mst::testing::rand_tensor;

namespace {

OpCounter attention_counts(std::size_t l, std::size_t d = 32, std::size_t heads = 2) {
  TrackerConfig c;
  c.embed_dim = d;
  c.num_heads = heads;
  std::mt19937_64 rng(1);
  AttentionWeights w = AttentionWeights::init(c, rng);
  OpCounter counter;
  Tape t;
  t.set_counter(&counter);
  attention_block(t.constant(rand_tensor({l, d}, rng)), w, heads);
  return counter;
}

OpCounter ssd_counts(std::size_t l, std::size_t d = 32, std::size_t n = 8) {
  std::mt19937_64 rng(2);
  AConvWeights mix = AConvWeights::init(d, d, 2, 4, rng);
  LinearWeights gate = LinearWeights::init(d, d, rng);
  OpCounter counter;
  Tape t;
  t.set_counter(&counter);
  ssd_core(t.constant(rand_tensor({l, d}, rng)),
           {t.constant(rand_tensor({l, n}, rng)), t.constant(rand_tensor({l, n}, rng)),
            t.constant(rand_tensor({l, n}, rng))},
           &gate, &mix);
  return counter;
}

TrackerConfig tiny() {
  TrackerConfig c;
  c.patch_size = 16;
  c.embed_dim = 16;
  c.num_layers = 3;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.template_size = 32;
  c.search_size = 64;
  c.ssd_state_count = 4;
  c.head_channels = 8;
  c.routing_reduction = 4;
  return c;
}

}  // namespace

TEST(CountParams, LinearLayerClosedForm) {
  std::mt19937_64 rng(3);
  LinearWeights w = LinearWeights::init(192, 192, rng);
  std::uint64_t n = 0;
  w.visit("l", [&](const std::string&, Tensor& t) { n += t.size(); });
  EXPECT_EQ(n, 37056u);
}

TEST(CountFlops, LinearLayerClosedForm) {
  std::mt19937_64 rng(4);
  LinearWeights w = LinearWeights::init(192, 192, rng);
  OpCounter counter;
  Tape t;
  t.set_counter(&counter);
  w(t.constant(Tensor({320, 192})));
  EXPECT_EQ(2 * counter.total_macs(), 23592960u);
  EXPECT_EQ(counter.macs(Component::Backbone, MacKind::Linear), counter.total_macs());
}

TEST(OpCounter, EmptyComponentAndTotals) {
  OpCounter c;
  c.add_macs(Component::Backbone, MacKind::Linear, 10);
  c.add_macs(Component::Head, MacKind::Conv, 5);
  c.add_macs(Component::Backbone, MacKind::AttentionScores, 7);
  c.add_params(Component::Sse, 3);
  EXPECT_EQ(c.macs(Component::Csi), 0u);
  EXPECT_EQ(c.params(Component::Csi), 0u);
  EXPECT_EQ(c.total_macs(), 22u);
  EXPECT_EQ(c.total_weighted_macs(), 15u);
  EXPECT_EQ(c.total_params(), 3u);
}

TEST(CountFlops, ZeroLayerConfigIsAllZero) {
  TrackerConfig c = tiny();
  c.num_layers = 0;
  const OpCounter counter = count_flops(c);
  EXPECT_EQ(counter.total_macs(), 0u);
  EXPECT_EQ(counter.total_params(), 0u);
}

TEST(CountFlops, TotalsEqualComponentSums) {
  const OpCounter counter = count_flops(tiny());
  std::uint64_t macs = 0, params = 0;
  for (std::size_t i = 0; i < kNumComponents; ++i) {
    const auto c = static_cast<Component>(i);
    EXPECT_GT(counter.macs(c), 0u) << component_name(c);
    EXPECT_GT(counter.params(c), 0u) << component_name(c);
    macs += counter.macs(c);
    params += counter.params(c);
  }
  EXPECT_EQ(counter.total_macs(), macs);
  EXPECT_EQ(counter.total_params(), params);
}

TEST(CountFlops, FusionBlocksMatchClosedForm) {
  const TrackerConfig c = tiny();
  const OpCounter counter = count_flops(c);
  const std::uint64_t l = c.template_tokens() + c.search_tokens();
  EXPECT_EQ(counter.macs(Component::Sse), 3 * hsa_ssd_block_macs(l, c.embed_dim, c.ssd_state_count));
  EXPECT_EQ(counter.macs(Component::Csi), hsa_ssd_block_macs(3 * l, c.embed_dim, c.ssd_state_count));
}

TEST(Scaling, AttentionQuadraticSsdLinear) {
  std::vector<std::uint64_t> scores, values, ssd;
  for (std::size_t l : {160u, 320u, 640u}) {
    const OpCounter a = attention_counts(l);
    scores.push_back(a.macs_of_kind(MacKind::AttentionScores));
    values.push_back(a.macs_of_kind(MacKind::AttentionValues));
    ssd.push_back(ssd_counts(l).total_macs());
  }
  for (std::size_t i = 1; i < 3; ++i) {
    EXPECT_EQ(scores[i], 4 * scores[i - 1]);
    EXPECT_EQ(values[i], 4 * values[i - 1]);
    EXPECT_LT(ssd[i], 2 * ssd[i - 1]);  // affine with a positive intercept
    EXPECT_GT(ssd[i], ssd[i - 1]);
  }
  EXPECT_EQ(ssd[2] - ssd[1], 2 * (ssd[1] - ssd[0]));
}

TEST(Scaling, FourTimesTheTokens) {
  const OpCounter a1 = attention_counts(100), a4 = attention_counts(400);
  EXPECT_EQ(a4.macs_of_kind(MacKind::AttentionScores), 16 * a1.macs_of_kind(MacKind::AttentionScores));
  const OpCounter s1 = ssd_counts(100), s4 = ssd_counts(400);
  EXPECT_EQ(s4.macs_of_kind(MacKind::StateContraction), 4 * s1.macs_of_kind(MacKind::StateContraction));
}

TEST(Scaling, SsdCoreMatchesClosedFormOnRandomConfigs) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t d = 4 + rng() % 29, n = 1 + rng() % 16, l = 2 * n + rng() % 100;
    const std::uint64_t got = ssd_counts(l, d, n).total_macs();
    // Reduce, expand, gate and mix: 2 L N D + 2 N D^2.
    EXPECT_EQ(got, 2 * l * n * d + 2 * n * d * d) << "l=" << l << " d=" << d << " n=" << n;
  }
}

TEST(Audit, VitTinyWithinTolerances) {
  const AuditReport rep = audit_report(TrackerConfig::vit_tiny());
  for (const auto& r : rep.rows) {
    if (r.checked()) {
      EXPECT_TRUE(r.within()) << r.name << " dev " << r.dev_flops() << "% / " << r.dev_params() << "%";
    }
  }
  EXPECT_TRUE(rep.all_within());
  EXPECT_TRUE(rep.totals_inconsistent);
  EXPECT_NE(rep.text().find("2.38"), std::string::npos);
  EXPECT_NE(rep.text().find("7.80"), std::string::npos);
}

TEST(Audit, ReferenceColumns) {
  const AuditReport rep = audit_report(count_flops(tiny()));
  const double g[] = {1.75, 0.05, 0.05, 0.53}, m[] = {5.49, 0.49, 0.17, 2.31};
  const char* names[] = {"backbone", "sse", "csi", "head"};
  for (int i = 0; i < 4; ++i) {
    EXPECT_EQ(rep.row(names[i]).ref.gflops, g[i]);
    EXPECT_EQ(rep.row(names[i]).ref.mparams, m[i]);
  }
  EXPECT_NEAR(rep.row("total/breakdown").ref.gflops, 2.38, 1e-12);
  EXPECT_NEAR(rep.row("total/breakdown").ref.mparams, 8.46, 1e-12);
  EXPECT_EQ(rep.row("total/headline").ref.gflops, 2.28);
  const std::string csv = rep.csv();
  EXPECT_EQ(csv.substr(0, csv.find('\n')).substr(0, 56), "component,flops_g,params_m,ref_flops_g,ref_params_m,dev_");
}
