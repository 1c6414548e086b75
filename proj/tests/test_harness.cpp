#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "mst/checkpoint.hpp"
#include "mst/metrics.hpp"
#include "mst/synthetic.hpp"
#include "mst/tracker.hpp"
#include "mst/train.hpp"

using namespace mst;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mst_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

TrackerConfig tiny() {
  TrackerConfig c;
  c.patch_size = 16;
  c.embed_dim = 16;
  c.num_layers = 3;
  c.num_heads = 2;
  c.mlp_ratio = 2;
  c.template_size = 32;
  c.search_size = 80;  // odd grid: a centered target sits mid-cell, not on a corner shared by four cells
  c.ssd_state_count = 4;
  c.routing_reduction = 4;
  c.head_channels = 8;
  return c;
}

SyntheticScene static_scene(std::size_t frames) {
  SyntheticScene s;
  s.seed = 7;
  s.num_frames = frames;
  s.target.path.x0 = 150;
  s.target.path.y0 = 110;
  return s;
}

LoadedSequence in_memory(const SyntheticScene& s) {
  RenderedScene r = render_scene(s);
  LoadedSequence seq{"mem", std::move(r.frames), {}};
  for (const auto& b : r.boxes) seq.gt.push_back({b, false});
  return seq;
}

TrainOptions quiet(std::size_t epochs, double lr) {
  TrainOptions o;
  o.epochs = epochs;
  o.lr = lr;
  o.batch = 2;
  o.samples_per_epoch = 4;
  o.warmup_steps = 2;
  return o;
}

}  // namespace

TEST(Synthetic, SameSeedSameBytes) {
  const auto a = scratch("gen_a"), b = scratch("gen_b");
  generate_sequence(SyntheticScene::random(3, 5), a.string());
  generate_sequence(SyntheticScene::random(3, 5), b.string());
  for (const auto& e : fs::directory_iterator(a)) {
    EXPECT_EQ(slurp(e.path()), slurp(b / e.path().filename())) << e.path().filename();
  }
  EXPECT_NE(render_scene(SyntheticScene::random(3, 2)).frames[1], render_scene(SyntheticScene::random(4, 2)).frames[1]);
}

TEST(Synthetic, StaticSceneKeepsBox) {
  const RenderedScene r = render_scene(static_scene(6));
  for (const auto& b : r.boxes) EXPECT_EQ(b, r.boxes.front());
}

TEST(Synthetic, LinearTrajectoryIsArithmetic) {
  SyntheticScene s = static_scene(10);
  s.target.path.vx = 2.0;
  const RenderedScene r = render_scene(s);
  for (std::size_t t = 1; t < 10; ++t) EXPECT_NEAR(r.boxes[t].x - r.boxes[t - 1].x, 2.0, 1e-9);
}

TEST(Synthetic, TargetMostlyVisible) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SyntheticScene s = SyntheticScene::random(seed, 60);
    const RenderedScene r = render_scene(s);
    for (std::size_t t = 0; t < s.num_frames; ++t) {
      const BoxXYWH tb = r.boxes[t];
      EXPECT_GE(tb.x, -1e-9);
      EXPECT_LE(tb.x2(), s.width + 1e-9);
      double hidden = 0;
      for (const auto& o : s.occluders) {
        if (t < o.first || t > o.last) continue;
        const BoxXYWH ob = o.region.translated(tb.x, tb.y);
        hidden += overlap_1d(tb.x, tb.x2(), ob.x, ob.x2()) * overlap_1d(tb.y, tb.y2(), ob.y, ob.y2());
      }
      EXPECT_LE(hidden / tb.area(), 0.5);
    }
  }
}

TEST(Crop, CenteredTargetFillsCentralQuarter) {
  Image frame(320, 240, 100);
  const BoxXYWH box = BoxXYWH::from_center(160, 120, 40, 40);
  const SearchCrop sc = search_crop(frame, box, box, 4.0, 256);
  EXPECT_NEAR(sc.gt_in_crop.x, 96, 1e-9);
  EXPECT_NEAR(sc.gt_in_crop.w, 64, 1e-9);
  EXPECT_NEAR(sc.gt_in_crop.cy(), 128, 1e-9);
}

TEST(Crop, BorderPaddingUsesMeanPixel) {
  Image frame(64, 64);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x)
      for (std::size_t c = 0; c < 3; ++c) frame.at(x, y, c) = static_cast<std::uint8_t>(x * 2 + c);
  const auto mean = frame.mean_pixel();
  const CropResult cr = template_crop(frame, {0, 0, 16, 16}, 4.0, 32);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(cr.image(0, 0, c), mean[c], 1e-9);
}

TEST(Crop, FrameRoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> pos(0, 280), ext(8, 60);
  Image frame(320, 240);
  for (int i = 0; i < 200; ++i) {
    const BoxXYWH prev{pos(rng), pos(rng) * 0.7, ext(rng), ext(rng)};
    const BoxXYWH gt{prev.x + 5, prev.y - 3, ext(rng), ext(rng)};
    const SearchCrop sc = search_crop(frame, prev, gt, 4.0, 256);
    const BoxXYWH back = sc.crop.window.to_crop(sc.crop.window.to_frame(sc.gt_in_crop));
    EXPECT_NEAR(back.x, sc.gt_in_crop.x, 0.5);
    EXPECT_NEAR(back.y, sc.gt_in_crop.y, 0.5);
    EXPECT_NEAR(back.w, sc.gt_in_crop.w, 0.5);
    EXPECT_NEAR(sc.crop.window.to_frame(sc.gt_in_crop).x, gt.x, 1e-9);
  }
}

TEST(Checkpoint, RoundTripIsBitExactInF32) {
  MstModel m = MstModel::init(tiny(), 5);
  m.head.score.stages[0].running_var.fill(1.7);
  const auto path = scratch("ckpt") / "m.ckpt";
  save_checkpoint(path.string(), m);
  MstModel back = load_checkpoint(path.string());
  std::vector<Tensor> a, b;
  m.visit([&](const std::string&, Tensor& t) { a.push_back(t.rounded_to_f32()); });
  m.visit_buffers([&](const std::string&, Tensor& t) { a.push_back(t.rounded_to_f32()); });
  back.visit([&](const std::string&, Tensor& t) { b.push_back(t); });
  back.visit_buffers([&](const std::string&, Tensor& t) { b.push_back(t); });
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
  EXPECT_EQ(back.config.to_text(), m.config.to_text());
  // A second save of the loaded model reproduces the file.
  save_checkpoint((path.string() + "2"), back);
  EXPECT_EQ(slurp(path), slurp(path.string() + "2"));
}

TEST(Checkpoint, CorruptionIsRejected) {
  MstModel m = MstModel::init(tiny(), 6);
  auto bytes = serialize_checkpoint(m);
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x40;
  EXPECT_THROW(deserialize_checkpoint(flipped), ChecksumError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), CheckpointFormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/m.ckpt"), InputError);
}

TEST(Train, FlipMirrorsCropsAndTarget) {
  const std::vector<LoadedSequence> scenes{in_memory(SyntheticScene::random(4, 3))};
  const TrackerConfig c = tiny();
  TrainSample plain;
  plain.frame = 2;
  plain.shift_x = 0.3;
  plain.shift_y = -0.2;
  TrainSample flipped = plain;
  flipped.flip_x = true;
  flipped.flip_y = true;
  const PreparedSample a = prepare_sample(scenes, plain, c), b = prepare_sample(scenes, flipped, c);
  const double side = static_cast<double>(c.search_size);
  EXPECT_NEAR(b.target.x, side - a.target.x2(), 1e-9);
  EXPECT_NEAR(b.target.y, side - a.target.y2(), 1e-9);
  EXPECT_NEAR(b.target.w, a.target.w, 1e-9);
  const std::size_t n = c.search_size;
  for (std::size_t y = 0; y < n; y += 7)
    for (std::size_t x = 0; x < n; x += 5)
      for (std::size_t ch = 0; ch < 3; ++ch)
        EXPECT_EQ(b.search_image[(y * n + x) * 3 + ch], a.search_image[((n - 1 - y) * n + (n - 1 - x)) * 3 + ch]);
}

TEST(Train, ZeroLearningRateKeepsLossConstant) {
  const std::vector<LoadedSequence> scenes{in_memory(SyntheticScene::random(1, 6))};
  TrainOptions o = quiet(3, 0.0);
  o.resample_each_epoch = false;
  const TrainResult r = train(tiny(), scenes, o);
  ASSERT_EQ(r.epochs.size(), 3u);
  EXPECT_EQ(r.epochs[0].total, r.epochs[1].total);
  EXPECT_EQ(r.epochs[1].total, r.epochs[2].total);
}

TEST(Train, SameSeedSameCurve) {
  const std::vector<LoadedSequence> scenes{in_memory(SyntheticScene::random(2, 6))};
  const TrainResult a = train(tiny(), scenes, quiet(3, 1e-3));
  const TrainResult b = train(tiny(), scenes, quiet(3, 1e-3));
  EXPECT_EQ(loss_csv(a.epochs), loss_csv(b.epochs));
  EXPECT_EQ(serialize_checkpoint(const_cast<MstModel&>(a.model)), serialize_checkpoint(const_cast<MstModel&>(b.model)));
}

TEST(Train, RejectsBadInput) {
  EXPECT_THROW(train(tiny(), {}, quiet(1, 1e-3)), InputError);
  const std::vector<LoadedSequence> scenes{in_memory(SyntheticScene::random(2, 3))};
  TrainOptions o = quiet(1, 1e-3);
  o.batch = 0;
  EXPECT_THROW(train(tiny(), scenes, o), ConfigError);
}

TEST(Train, AbortsOnNonFiniteLoss) {
  const std::vector<LoadedSequence> scenes{in_memory(SyntheticScene::random(2, 3))};
  TrainOptions o = quiet(2, 1e300);
  const TrainResult r = train(tiny(), scenes, o);
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.message.empty());
}

// One frame, no augmentation, many steps: the network memorizes the sample.
TEST(Train, OverfitsSingleSample) {
  const std::vector<LoadedSequence> scenes{in_memory(static_scene(1))};
  TrainOptions o;
  o.epochs = 500;
  o.lr = 1e-2;
  o.batch = 1;
  o.samples_per_epoch = 1;
  o.warmup_steps = 20;
  o.max_shift = 0;
  o.max_log_scale = 0;
  o.color_augment = false;
  o.template_from_first = 1.0;
  const TrainResult r = train(tiny(), scenes, o);
  ASSERT_EQ(r.epochs.size(), 500u);
  const double first = r.epochs.front().total;
  EXPECT_LT(r.epochs.back().total, 0.1 * first);
  // Windowed means after warmup never increase.
  double prev = 1e300;
  for (std::size_t w = 20; w + 40 <= 500; w += 40) {
    double m = 0;
    for (std::size_t i = w; i < w + 40; ++i) m += r.epochs[i].total / 40;
    EXPECT_LT(m, prev) << "window at " << w;
    prev = m;
  }
}

TEST(Tracker, OverfitModelFollowsStaticScene) {
  const SyntheticScene s = static_scene(8);
  const auto dir = scratch("static");
  generate_sequence(s, dir.string());
  TrainOptions o;
  o.epochs = 60;
  o.lr = 1e-2;
  o.batch = 4;
  o.warmup_steps = 10;
  o.max_shift = 0;
  o.max_log_scale = 0;
  o.color_augment = false;
  TrainResult r = train(tiny(), {load_sequence(dir.string())}, o);
  const auto path = dir / "m.ckpt";
  save_checkpoint(path.string(), r.model);
  MstModel m = load_checkpoint(path.string());
  const SequenceDir seq = SequenceDir::open(dir.string());
  const auto pred = track_sequence(m, seq);
  for (std::size_t t = 0; t < pred.size(); ++t) EXPECT_GE(iou(pred[t], seq.gt[t].box), 0.7) << "frame " << t;
}

TEST(Tracker, FirstFrameIsInitBoxAndInitRequired) {
  const auto dir = scratch("init");
  generate_sequence(SyntheticScene::random(9, 3), dir.string());
  MstModel m = MstModel::init(tiny(), 1);
  SequenceDir seq = SequenceDir::open(dir.string());
  const auto pred = track_sequence(m, seq);
  ASSERT_EQ(pred.size(), 3u);
  EXPECT_EQ(pred[0], seq.gt[0].box);
  for (const auto& b : pred) EXPECT_TRUE(b.valid());
  seq.gt.clear();
  EXPECT_THROW(track_sequence(m, seq), InputError);
  Tracker tr(m);
  EXPECT_THROW(tr.update(Image(64, 64)), InputError);
}

TEST(Tracker, NeverReadsFutureFrames) {
  const auto dir = scratch("stream");
  generate_sequence(SyntheticScene::random(10, 4), dir.string());
  MstModel m = MstModel::init(tiny(), 2);
  const SequenceDir seq = SequenceDir::open(dir.string());
  const auto full = track_sequence(m, seq);
  // Overwrite the last frame: earlier predictions must not change.
  write_ppm(seq.frames.back(), Image(320, 240, 255));
  const auto changed = track_sequence(m, seq);
  for (std::size_t t = 0; t + 1 < full.size(); ++t) EXPECT_EQ(full[t], changed[t]);
}

TEST(Eval, PerfectCopyAndDisjoint) {
  std::vector<ParsedBox> gt;
  for (int i = 0; i < 5; ++i) gt.push_back({{10.0 + i, 20, 30, 40}, false});
  const MetricsRow perfect = evaluate(build_result("p", gt, gt));
  EXPECT_EQ(perfect.ao, 1.0);
  EXPECT_NEAR(perfect.auc, 1.0, 1e-12);
  EXPECT_EQ(perfect.p20, 1.0);
  std::vector<ParsedBox> zeros(5, ParsedBox{{0, 0, 0, 0}, true});
  EXPECT_EQ(evaluate(build_result("z", zeros, gt)).ao, 0.0);
}
