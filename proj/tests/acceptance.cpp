// Exit-gate checks, one PASS/FAIL line each. Usage: acceptance [--only 1,3,5] [--work DIR]

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "metrics_oracle.hpp"
#include "mst/checkpoint.hpp"
#include "mst/complexity.hpp"
#include "mst/grad_suite.hpp"
#include "mst/metrics.hpp"
#include "mst/synthetic.hpp"
#include "mst/tracker.hpp"
#include "mst/train.hpp"
#include "mst/verify.hpp"

namespace fs = std::filesystem;
using namespace mst;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome check_ssd_oracle(const fs::path&) {
  const auto t0 = Clock::now();
  double worst = 0;
  for (std::uint64_t i = 0; i < 100; ++i) worst = std::max(worst, static_cast<double>(ssd_oracle_trial(i).relative()));
  const double secs = seconds_since(t0);
  return {worst < 1e-9 && secs < 60, fmt("100 configs, max |dev|/max|out| %.2e (< 1e-9), %.1fs (< 60s)", worst, secs)};
}

Outcome check_gradients(const fs::path&) {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t cases = 0;
  bool ok = true;
  for (const auto& m : grad_suite_modules()) {
    for (const auto& r : run_grad_suite(m, 20)) {
      ++cases;
      ok = ok && r.seeds == 20 && r.worst < 1e-4;
      if (r.worst >= worst) {
        worst = r.worst;
        worst_name = r.name;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 300,
          fmt("%zu cases x 20 seeds, worst rel err %.2e (%s) (< 1e-4), %.0fs (< 300s)", cases, worst,
              worst_name.c_str(), secs)};
}

Outcome check_scaling(const fs::path&) {
  const std::size_t d = 64, n = 16;
  std::mt19937_64 rng(3);
  AConvWeights mix = AConvWeights::init(d, d, 2, 4, rng);
  LinearWeights gate = LinearWeights::init(d, d, rng);
  TrackerConfig ac;
  ac.embed_dim = d;
  ac.num_heads = 2;
  AttentionWeights attn = AttentionWeights::init(ac, rng);
  std::vector<std::uint64_t> ssd, scores;
  const std::vector<std::size_t> lengths{64, 128, 256, 512};
  for (std::size_t l : lengths) {
    OpCounter c1, c2;
    Tape t;
    t.set_counter(&c1);
    ssd_core(t.constant(Tensor::randn({l, d}, rng)),
             {t.constant(Tensor::randn({l, n}, rng)), t.constant(Tensor::randn({l, n}, rng)),
              t.constant(Tensor::randn({l, n}, rng))},
             &gate, &mix);
    ssd.push_back(c1.total_macs());
    Tape t2;
    t2.set_counter(&c2);
    attention_block(t2.constant(Tensor::randn({l, d}, rng)), attn, 2);
    scores.push_back(c2.macs_of_kind(MacKind::AttentionScores));
  }
  // Affine in L: the MAC increase per added token is the same constant between every pair.
  bool ok = true;
  const std::uint64_t slope = (ssd[1] - ssd[0]) / (lengths[1] - lengths[0]);
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    ok = ok && ssd[i] - ssd[i - 1] == slope * (lengths[i] - lengths[i - 1]);
    ok = ok && scores[i] == 4 * scores[i - 1];
  }
  const std::uint64_t intercept = ssd[0] - slope * lengths[0];
  return {ok, fmt("ssd_core MACs = %llu + %llu*L exactly; attention-score MACs %llu -> %llu (x4 per doubling)",
                  static_cast<unsigned long long>(intercept), static_cast<unsigned long long>(slope),
                  static_cast<unsigned long long>(scores.front()), static_cast<unsigned long long>(scores.back()))};
}

Outcome check_audit(const fs::path& work) {
  const AuditReport rep = audit_report(TrackerConfig::vit_tiny());
  std::ofstream(work / "audit.txt") << rep.text();
  std::ofstream(work / "audit.csv") << rep.csv();
  std::string detail;
  for (const auto& r : rep.rows) {
    if (r.checked()) detail += fmt("%s %+.1f%%/%+.1f%% ", r.name.c_str(), r.dev_flops(), r.dev_params());
  }
  detail += rep.totals_inconsistent ? "; totals inconsistency flagged" : "; totals inconsistency NOT flagged";
  return {rep.all_within() && rep.totals_inconsistent, detail};
}

Outcome check_metrics(const fs::path&) {
  bool ok = true;
  const auto round6 = [](double v) { return std::llround(v * 1e6); };
  std::size_t seqs = 0;
  for (const auto& s : mst::testing::hand_sequences()) {
    ++seqs;
    const MetricsRow a = evaluate(s), b = mst::testing::sheet_metrics(s);
    ok = ok && round6(a.ao) == round6(b.ao) && round6(a.sr50) == round6(b.sr50) && round6(a.sr75) == round6(b.sr75) &&
         round6(a.p20) == round6(b.p20) && round6(a.pnorm) == round6(b.pnorm) && round6(a.auc) == round6(b.auc);
  }
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> pos(0, 200), ext(5, 60), jit(-20, 20), sc(0.6, 1.5);
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    SequenceResult r{"rand", {}};
    const std::size_t n = 1 + rng() % 50;
    for (std::size_t i = 0; i < n; ++i) {
      const BoxXYWH g{pos(rng), pos(rng), ext(rng), ext(rng)};
      r.add({g.x + jit(rng), g.y + jit(rng), g.w * sc(rng), g.h * sc(rng)}, g);
    }
    double prev_sr = 2, prev_p = -1;
    for (int k = 0; k <= 100; ++k) {
      const double sr = success_rate(r, k / 100.0), p = precision(r, 0.5 * k);
      violations += sr > prev_sr || p < prev_p;
      prev_sr = sr;
      prev_p = p;
    }
  }
  return {ok && seqs == 10 && violations == 0,
          fmt("%zu hand sequences match the per-frame oracle to 6 decimals: %s; monotonicity violations on 1000 "
              "random sequences: %zu",
              seqs, ok ? "yes" : "no", violations)};
}

Outcome check_ablation(const fs::path&) {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MstModel m = MstModel::init(TrackerConfig::desk(), seed);
    zero_all([&](const TensorVisitor& f) {
      m.sse.visit("sse", f);
      m.csi.visit("csi", f);
    });
    std::mt19937_64 rng(seed + 100);
    const auto& c = m.config;
    const Tensor z = Tensor::randn({c.template_size, c.template_size, 3}, rng);
    const Tensor x = Tensor::randn({c.search_size, c.search_size, 3}, rng);
    Tape t;
    ForwardResult r = m.forward(t, z, x, BnMode::Running);
    Tensor sum3(r.fused.y.tokens.shape());
    for (const auto& s : r.taps.states)
      for (std::size_t i = 0; i < sum3.size(); ++i) sum3[i] += s.tokens.value()[i];
    worst = std::max(worst, static_cast<double>(max_abs_diff(r.fused.y.tokens.value(), sum3)));
  }
  return {worst < 1e-12, fmt("desk model, 5 seeds: max |fused - (S1+S2+S3)| = %.2e (< 1e-12)", worst)};
}

// Three training scenes and one held-out scene from the same generator.
constexpr std::uint64_t kSeed = 42;
constexpr std::size_t kFrames = 100;
constexpr std::uint64_t kExtraHeldOut = 9;

TrainOptions e2e_options() {
  TrainOptions o;
  o.seed = kSeed;
  o.epochs = 28;
  o.samples_per_epoch = 600;
  o.batch = 8;
  o.lr = 1e-3;
  o.warmup_steps = 100;
  o.max_log_scale = 0.4;
  o.max_seconds = 1800;
  return o;
}

MetricsRow track_and_score(MstModel& m, const std::string& dir, const std::string& name, const fs::path& pred_path) {
  const SequenceDir seq = SequenceDir::open(dir);
  const auto pred = track_sequence(m, seq);
  write_boxes(pred_path.string(), pred);
  return evaluate(build_result(name, read_boxes(pred_path.string()), seq.gt));
}

Outcome check_end_to_end(const fs::path& work) {
  const fs::path data = work / "e2e";
  fs::remove_all(data);
  std::vector<LoadedSequence> scenes;
  for (std::uint64_t s = kSeed; s < kSeed + 4; ++s) {
    generate_sequence(SyntheticScene::random(s, kFrames), (data / ("scene_" + std::to_string(s))).string());
  }
  for (std::uint64_t s = kSeed; s < kSeed + 3; ++s) scenes.push_back(load_sequence((data / ("scene_" + std::to_string(s))).string()));
  TrainOptions o = e2e_options();
  o.checkpoint = (data / "model.ckpt").string();
  o.loss_csv = (data / "loss.csv").string();
  const auto t0 = Clock::now();
  const TrainResult r = train(TrackerConfig::desk(), scenes, o);
  const double train_secs = seconds_since(t0);
  MstModel m = load_checkpoint(o.checkpoint);
  std::vector<MetricsRow> rows;
  for (std::uint64_t s = kSeed; s < kSeed + 4; ++s) {
    const std::string name = "scene_" + std::to_string(s);
    rows.push_back(track_and_score(m, (data / name).string(), name, data / (name + ".pred.txt")));
  }
  const MetricsRow train_mean = aggregate({rows[0], rows[1], rows[2]});
  std::ofstream(data / "metrics.csv") << metrics_csv(rows);
  const bool ok = !r.aborted && train_secs <= 1800 && train_mean.ao >= 0.70 && train_mean.p20 >= 0.80 &&
                  rows[3].ao >= 0.5;
  // Context only, not part of the verdict: more held-out scenes from the same generator.
  std::vector<MetricsRow> extra;
  for (std::uint64_t s = kSeed + 4; s < kSeed + 4 + kExtraHeldOut; ++s) {
    const std::string name = "scene_" + std::to_string(s);
    generate_sequence(SyntheticScene::random(s, kFrames), (data / name).string());
    extra.push_back(track_and_score(m, (data / name).string(), name, data / (name + ".pred.txt")));
  }
  const MetricsRow extra_mean = aggregate(extra);
  std::size_t extra_pass = 0;
  for (const auto& row : extra) extra_pass += row.ao >= 0.5;
  return {ok, fmt("train %.0fs (<= 1800s); training scenes AO %.3f (>= 0.70) P20 %.3f (>= 0.80) [%.2f %.2f %.2f]; "
                  "held-out scene_%llu AO %.3f (>= 0.5); [info] scenes %llu-%llu mean AO %.3f, %zu/%zu >= 0.5",
                  train_secs, train_mean.ao, train_mean.p20, rows[0].ao, rows[1].ao, rows[2].ao,
                  static_cast<unsigned long long>(kSeed + 3), rows[3].ao, static_cast<unsigned long long>(kSeed + 4),
                  static_cast<unsigned long long>(kSeed + 3 + kExtraHeldOut), extra_mean.ao, extra_pass, extra.size())};
}

// Short fixed-seed pipeline run twice into separate directories; every output file must match.
Outcome check_determinism(const fs::path& work) {
  TrackerConfig c = TrackerConfig::desk();
  c.num_layers = 3;
  c.embed_dim = 32;
  c.head_channels = 16;
  auto run = [&](const fs::path& dir) {
    fs::remove_all(dir);
    generate_sequence(SyntheticScene::random(7, 12), (dir / "train").string());
    generate_sequence(SyntheticScene::random(8, 12), (dir / "test").string());
    TrainOptions o;
    o.seed = 7;
    o.epochs = 2;
    o.samples_per_epoch = 8;
    o.batch = 4;
    o.warmup_steps = 2;
    o.checkpoint = (dir / "model.ckpt").string();
    o.loss_csv = (dir / "loss.csv").string();
    train(c, {load_sequence((dir / "train").string())}, o);
    MstModel m = load_checkpoint(o.checkpoint);
    const MetricsRow row = track_and_score(m, (dir / "test").string(), "test", dir / "pred.txt");
    std::ofstream(dir / "metrics.csv") << metrics_csv({row});
  };
  const fs::path a = work / "det_a", b = work / "det_b";
  run(a);
  run(b);
  std::size_t files = 0, same = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    ++files;
    same += slurp(e.path()) == slurp(b / fs::relative(e.path(), a));
  }
  // Checkpoint: load -> save reproduces the bytes, and a flipped byte is rejected.
  MstModel m = load_checkpoint((a / "model.ckpt").string());
  const auto bytes = serialize_checkpoint(m);
  const std::string original = slurp(a / "model.ckpt");
  const bool round_trip = std::string(bytes.begin(), bytes.end()) == original;
  auto corrupt = bytes;
  corrupt[corrupt.size() / 3] ^= 0x01;
  bool rejected = false;
  try {
    deserialize_checkpoint(corrupt);
  } catch (const ChecksumError&) {
    rejected = true;
  }
  return {files > 0 && same == files && round_trip && rejected,
          fmt("%zu/%zu output files byte-identical across runs; checkpoint round trip %s; corrupted checkpoint %s",
              same, files, round_trip ? "bit-exact" : "DIFFERS", rejected ? "rejected" : "ACCEPTED")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance checks"};
  std::vector<int> only;
  std::string work = "acceptance_work";
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome(const fs::path&)>>> criteria = {
      {"ssd oracle equivalence", check_ssd_oracle},
      {"gradient suite", check_gradients},
      {"complexity scaling", check_scaling},
      {"complexity audit", check_audit},
      {"metrics oracle", check_metrics},
      {"ablation degeneracy", check_ablation},
      {"end-to-end synthetic run", check_end_to_end},
      {"determinism and I/O", check_determinism},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome out;
    try {
      out = criteria[i].second(work);
    } catch (const std::exception& e) {
      out = {false, std::string("exception: ") + e.what()};
    }
    failed += !out.pass;
    std::printf("[%s] %d %s: %s\n", out.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(), out.detail.c_str());
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
