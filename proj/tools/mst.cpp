// Command-line driver: synthetic data, training, tracking, evaluation and the checks.
// Exit codes: 0 ok, 1 usage, 2 data, 3 numeric failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

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

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A path to a key=value file, or a bare preset name.
TrackerConfig resolve_config(const std::string& arg) {
  if (arg.empty()) return TrackerConfig::desk();
  if (!fs::exists(arg)) {
    if (arg == "desk") return TrackerConfig::desk();
    if (arg == "vit_tiny") return TrackerConfig::vit_tiny();
  }
  return TrackerConfig::load(arg);
}

void write_file(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_text(path, text);
}

struct GenerateArgs {
  std::uint64_t seed = 42;
  std::size_t frames = 100;
  std::size_t count = 1;
  std::string out;
};

int run_generate(const GenerateArgs& a) {
  if (a.count == 0 || a.frames == 0) throw UsageError("--frames and --count must be positive");
  for (std::size_t i = 0; i < a.count; ++i) {
    const std::uint64_t seed = a.seed + i;
    const std::string dir = a.count == 1 ? a.out : (fs::path(a.out) / ("scene_" + std::to_string(seed))).string();
    generate_sequence(SyntheticScene::random(seed, a.frames), dir);
    std::printf("wrote %zu frames to %s\n", a.frames, dir.c_str());
  }
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string loss_csv;
  TrainOptions opt;
};

int run_train(TrainArgs a) {
  const TrackerConfig config = resolve_config(a.config);
  std::vector<LoadedSequence> scenes;
  for (const auto& dir : find_sequences(a.data)) scenes.push_back(load_sequence(dir));
  a.opt.checkpoint = a.out;
  a.opt.loss_csv = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;
  a.opt.on_epoch = [](std::size_t e, double loss) { std::fprintf(stderr, "epoch %zu loss %.6f\n", e, loss); };
  const TrainResult r = train(config, scenes, a.opt);
  std::printf("trained %zu steps on %zu scenes; checkpoint %s, loss curve %s\n", r.steps, scenes.size(),
              a.out.c_str(), a.opt.loss_csv.c_str());
  if (r.out_of_time) std::printf("%s\n", r.message.c_str());
  if (r.aborted) {
    std::fprintf(stderr, "training aborted: %s\n", r.message.c_str());
    return kNumeric;
  }
  return kOk;
}

int run_track(const std::string& checkpoint, const std::string& sequence, const std::string& out) {
  MstModel model = load_checkpoint(checkpoint);
  const SequenceDir seq = SequenceDir::open(sequence);
  if (!seq.has_gt() || seq.gt.front().absent) throw UsageError("sequence " + sequence + " has no initial box");
  const auto pred = track_sequence(model, seq);
  if (auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);
  write_boxes(out, pred);
  std::printf("wrote %zu predictions to %s\n", pred.size(), out.c_str());
  return kOk;
}

int run_eval(const std::string& pred, const std::string& gt, const std::string& out) {
  const SequenceResult r = build_result(fs::path(pred).stem().string(), read_boxes(pred), read_boxes(gt));
  const std::vector<MetricsRow> rows{evaluate(r)};
  std::cout << metrics_text(rows);
  if (!out.empty()) write_file(out, metrics_csv(rows));
  return kOk;
}

int run_audit(const std::string& config, const std::string& csv) {
  const AuditReport rep = audit_report(resolve_config(config.empty() ? "vit_tiny" : config));
  std::cout << rep.text();
  if (!csv.empty()) write_file(csv, rep.csv());
  return kOk;
}

int run_gradcheck(const std::string& module, std::size_t seeds) {
  const auto modules = grad_suite_modules();
  if (!module.empty() && std::find(modules.begin(), modules.end(), module) == modules.end()) {
    throw UsageError("unknown module '" + module + "'");
  }
  bool ok = true;
  for (const auto& m : modules) {
    if (!module.empty() && m != module) continue;
    for (const auto& row : run_grad_suite(m, seeds)) {
      const bool pass = row.worst < 1e-4;
      ok = ok && pass;
      std::printf("%-16s %-24s max_rel_err %.3e over %zu seeds %6.1fs %s\n", row.module.c_str(), row.name.c_str(),
                  row.worst, row.seeds, row.seconds, pass ? "ok" : "FAIL");
    }
  }
  return ok ? kOk : kNumeric;
}

int run_oracle(std::size_t trials) {
  double worst = 0.0;
  for (std::size_t i = 0; i < trials; ++i) {
    const OracleTrial t = ssd_oracle_trial(i);
    worst = std::max(worst, static_cast<double>(t.relative()));
  }
  const bool ok = worst < 1e-9;
  std::printf("ssd_core vs quadratic oracle: %zu trials, max |dev| / max |out| = %.3e %s\n", trials, worst,
              ok ? "ok" : "FAIL");
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale visual tracker"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "render a synthetic sequence");
  g->add_option("--seed", gen.seed);
  g->add_option("--frames", gen.frames);
  g->add_option("--count", gen.count, "scenes with consecutive seeds, written to <out>/scene_<seed>");
  g->add_option("--out", gen.out)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train on every sequence under --data");
  t->add_option("--config", tr.config, "key=value file or preset name (desk, vit_tiny)");
  t->add_option("--data", tr.data)->required();
  t->add_option("--epochs", tr.opt.epochs);
  t->add_option("--lr", tr.opt.lr);
  t->add_option("--seed", tr.opt.seed);
  t->add_option("--out", tr.out)->required();
  t->add_option("--samples", tr.opt.samples_per_epoch, "samples per epoch (0: one per frame)");
  t->add_option("--batch", tr.opt.batch);
  t->add_option("--max-seconds", tr.opt.max_seconds, "skip epochs that would likely end past this budget");
  t->add_option("--loss-csv", tr.loss_csv);

  std::string ckpt, sequence, track_out;
  auto* k = app.add_subcommand("track", "track a sequence from its first ground-truth box");
  k->add_option("--checkpoint", ckpt)->required();
  k->add_option("--sequence", sequence)->required();
  k->add_option("--out", track_out)->required();

  std::string pred, gt, eval_out;
  auto* e = app.add_subcommand("eval", "score predictions against ground truth");
  e->add_option("--pred", pred)->required();
  e->add_option("--gt", gt)->required();
  e->add_option("--out", eval_out, "metrics CSV");

  std::string audit_config, audit_csv;
  auto* a = app.add_subcommand("audit", "per-component FLOPs and parameters against the reference table");
  a->add_option("--config", audit_config);
  a->add_option("--csv", audit_csv);

  std::string module;
  std::size_t seeds = 20;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  gc->add_option("--module", module);
  gc->add_option("--seeds", seeds);

  std::size_t trials = 100;
  auto* o = app.add_subcommand("oracle", "ssd_core against the quadratic reference");
  o->add_option("--trials", trials);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return run_generate(gen);
    if (*t) return run_train(tr);
    if (*k) return run_track(ckpt, sequence, track_out);
    if (*e) return run_eval(pred, gt, eval_out);
    if (*a) return run_audit(audit_config, audit_csv);
    if (*gc) return run_gradcheck(module, seeds);
    if (*o) return run_oracle(trials);
  } catch (const UsageError& err) {
    std::fprintf(stderr, "usage error: %s\n", err.what());
    return kUsage;
  } catch (const ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kUsage;
  } catch (const NumericError& err) {
    std::fprintf(stderr, "numeric failure: %s\n", err.what());
    return kNumeric;
  } catch (const std::invalid_argument& err) {
    std::fprintf(stderr, "data error: %s\n", err.what());
    return kData;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "data error: %s\n", err.what());
    return kData;
  }
  return kUsage;
}
