#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "mst/checkpoint.hpp"
#include "mst/image.hpp"
#include "mst/model.hpp"
#include "mst/optim.hpp"
#include "mst/synthetic.hpp"

namespace mst {

struct LoadedSequence {
  std::string name;
  std::vector<Image> frames;
  std::vector<ParsedBox> gt;
};

inline LoadedSequence load_sequence(const std::string& dir) {
  const SequenceDir s = SequenceDir::open(dir);
  if (!s.has_gt()) throw InputError("sequence " + dir + " has no groundtruth.txt");
  if (s.gt.size() != s.frames.size()) {
    throw InputError("sequence " + dir + ": " + std::to_string(s.frames.size()) + " frames but " +
                     std::to_string(s.gt.size()) + " ground-truth lines");
  }
  LoadedSequence out{std::filesystem::path(dir).filename().string(), {}, s.gt};
  for (const auto& f : s.frames) out.frames.push_back(read_ppm(f));
  return out;
}

// One (template, search, target) triple with its augmentation.
struct TrainSample {
  std::size_t scene = 0;
  std::size_t frame = 0;
  std::size_t template_frame = 0;
  double shift_x = 0.0;  // search-center offset in units of sqrt(w h)
  double shift_y = 0.0;
  double log_scale = 0.0;
  std::array<double, 9> color{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major, out = color * in + offset
  std::array<double, 3> offset{0, 0, 0};
  bool flip_x = false;  // mirror template and search together
  bool flip_y = false;
};

struct TrainOptions {
  std::size_t epochs = 10;
  double lr = 5e-4;
  std::uint64_t seed = 42;
  std::size_t samples_per_epoch = 0;  // 0: one sample per annotated frame
  std::size_t batch = 4;              // samples per step, sharing batch-norm statistics
  std::size_t warmup_steps = 50;
  double min_lr_ratio = 0.05;         // cosine floor
  double weight_decay = 1e-4;
  double clip_norm = 5.0;
  double max_shift = 0.6;
  double max_log_scale = 0.25;
  double template_from_first = 0.5;   // probability the template comes from frame 0
  bool color_augment = true;
  bool flip_augment = true;
  bool resample_each_epoch = true;    // fresh frames and augmentation every epoch
  double max_seconds = 0.0;           // 0: unbounded; no epoch starts that would likely overrun it
  std::string loss_csv;
  std::string checkpoint;
  std::function<void(std::size_t, double)> on_epoch;
};

struct EpochStats {
  double total = 0.0;
  double cls = 0.0;
  double iou = 0.0;
  double l1 = 0.0;
};

struct TrainResult {
  MstModel model;
  std::vector<EpochStats> epochs;
  std::size_t steps = 0;
  bool aborted = false;
  bool out_of_time = false;
  std::string message;
};

// Random channel permutation with per-channel gain, partly mixed toward a random color matrix.
inline void random_color(TrainSample& t, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::array<std::size_t, 3> perm{0, 1, 2};
  std::shuffle(perm.begin(), perm.end(), rng);
  const double mix = 0.4 * u01(rng);
  for (std::size_t r = 0; r < 3; ++r) {
    const double gain = 0.7 + 0.6 * u01(rng);
    for (std::size_t c = 0; c < 3; ++c) t.color[r * 3 + c] = (1 - mix) * (perm[r] == c ? gain : 0.0) + mix * u01(rng) * 0.67;
    t.offset[r] = 30.0 * (u01(rng) - 0.5);
  }
  if (u01(rng) < 0.2) {
    for (std::size_t r = 0; r < 3; ++r) {
      double row = 0;
      for (std::size_t c = 0; c < 3; ++c) row += t.color[r * 3 + c];
      for (std::size_t c = 0; c < 3; ++c) t.color[r * 3 + c] = -t.color[r * 3 + c];
      t.offset[r] += 255.0 * row;
    }
  }
}

inline std::vector<TrainSample> make_samples(const std::vector<LoadedSequence>& scenes, const TrainOptions& opt,
                                             std::uint64_t epoch = 0) {
  std::vector<std::pair<std::size_t, std::size_t>> frames;
  for (std::size_t s = 0; s < scenes.size(); ++s)
    for (std::size_t f = 0; f < scenes[s].frames.size(); ++f)
      if (!scenes[s].gt[f].absent) frames.emplace_back(s, f);
  if (frames.empty()) throw InputError("training data has no annotated frames");
  const std::size_t n = opt.samples_per_epoch ? opt.samples_per_epoch : frames.size();
  std::mt19937_64 rng(opt.seed + 0x9e3779b97f4a7c15ULL * epoch);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::vector<TrainSample> out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [s, f] = frames[i < frames.size() && n == frames.size() ? i : rng() % frames.size()];
    TrainSample t;
    t.scene = s;
    t.frame = f;
    t.template_frame = 0;
    if (u01(rng) >= opt.template_from_first) {
      std::vector<std::size_t> ok;
      for (std::size_t k = 0; k < scenes[s].frames.size(); ++k)
        if (!scenes[s].gt[k].absent) ok.push_back(k);
      t.template_frame = ok[rng() % ok.size()];
    }
    while (scenes[s].gt[t.template_frame].absent) ++t.template_frame;
    t.shift_x = opt.max_shift * u(rng);
    t.shift_y = opt.max_shift * u(rng);
    t.log_scale = opt.max_log_scale * u(rng);
    if (opt.color_augment) random_color(t, rng);
    if (opt.flip_augment) {
      t.flip_x = u01(rng) < 0.5;
      t.flip_y = u01(rng) < 0.5;
    }
    out.push_back(t);
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

inline Tensor recolor(const Tensor& raw, const TrainSample& s) {
  Tensor out(raw.shape());
  const std::size_t px = raw.size() / 3;
  for (std::size_t i = 0; i < px; ++i)
    for (std::size_t r = 0; r < 3; ++r) {
      double v = s.offset[r];
      for (std::size_t c = 0; c < 3; ++c) v += s.color[r * 3 + c] * raw[i * 3 + c];
      out[i * 3 + r] = std::clamp(v, 0.0, 255.0);
    }
  return out;
}

// [H, W, 3] crop mirrored along either axis.
inline Tensor flip_crop(const Tensor& img, bool fx, bool fy) {
  if (!fx && !fy) return img;
  const std::size_t h = img.shape()[0], w = img.shape()[1];
  Tensor out(img.shape());
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sy = fy ? h - 1 - y : y, sx = fx ? w - 1 - x : x;
      for (std::size_t c = 0; c < 3; ++c) out[(y * w + x) * 3 + c] = img[(sy * w + sx) * 3 + c];
    }
  return out;
}

struct PreparedSample {
  Tensor template_image;  // normalized
  Tensor search_image;
  BoxXYWH target;         // search-crop pixels
};

inline PreparedSample prepare_sample(const std::vector<LoadedSequence>& scenes, const TrainSample& s,
                                     const TrackerConfig& c) {
  const auto& seq = scenes[s.scene];
  const BoxXYWH tbox = seq.gt[s.template_frame].box;
  const BoxXYWH gt = seq.gt[s.frame].box;
  const Image& frame = seq.frames[s.frame];
  const double side = std::sqrt(gt.w * gt.h);
  const double scale = std::exp(s.log_scale);
  const BoxXYWH jittered = BoxXYWH::from_center(gt.cx() + s.shift_x * side, gt.cy() + s.shift_y * side,
                                                gt.w * scale, gt.h * scale);
  auto tcrop = template_crop(seq.frames[s.template_frame], tbox, c.template_factor, c.template_size);
  const CropWindow win = context_window(jittered, c.search_factor, c.search_size);
  const double lim = static_cast<double>(c.search_size);
  BoxXYWH target = win.to_crop(gt);
  // Keep the target inside the crop; the jitter range makes this a rare edge case.
  const double x1 = std::clamp(target.x, 0.0, lim - 1.0), y1 = std::clamp(target.y, 0.0, lim - 1.0);
  target = {x1, y1, std::clamp(target.x2(), x1 + 1.0, lim) - x1, std::clamp(target.y2(), y1 + 1.0, lim) - y1};
  if (s.flip_x) target.x = lim - target.x2();
  if (s.flip_y) target.y = lim - target.y2();
  return {normalize_image(flip_crop(recolor(tcrop.image, s), s.flip_x, s.flip_y)),
          normalize_image(flip_crop(recolor(crop_window(frame, win), s), s.flip_x, s.flip_y)), target};
}

inline std::string loss_csv(const std::vector<EpochStats>& epochs) {
  std::string out = "epoch,loss,cls,giou,l1\n";
  char buf[160];
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.8f,%.8f,%.8f,%.8f\n", i + 1, epochs[i].total, epochs[i].cls, epochs[i].iou,
                  epochs[i].l1);
    out += buf;
  }
  return out;
}

inline void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << text;
}

// Epoch-based AdamW training with warmup and cosine decay. A non-finite loss or gradient
// stops training; the returned model (and checkpoint, when requested) holds the last
// weights that produced finite values.
inline TrainResult train(const TrackerConfig& config, const std::vector<LoadedSequence>& scenes,
                         const TrainOptions& opt) {
  if (scenes.empty()) throw InputError("train: no scenes");
  if (opt.batch == 0 || opt.epochs == 0) throw ConfigError("train: epochs and batch must be positive");
  TrainResult res{MstModel::init(config, opt.seed), {}, 0, false, false, ""};
  MstModel& model = res.model;
  auto samples = make_samples(scenes, opt);
  AdamW adam({0.9, 0.999, 1e-8, opt.weight_decay});
  const std::size_t steps_per_epoch = (samples.size() + opt.batch - 1) / opt.batch;
  const std::size_t total_steps = steps_per_epoch * opt.epochs;
  const auto start = std::chrono::steady_clock::now();

  std::vector<Tensor*> params;
  model.visit([&](const std::string&, Tensor& t) { params.push_back(&t); });

  auto lr_at = [&](std::size_t step) {
    if (step < opt.warmup_steps) return opt.lr * static_cast<double>(step + 1) / static_cast<double>(opt.warmup_steps);
    const double p = static_cast<double>(step - opt.warmup_steps) /
                     static_cast<double>(std::max<std::size_t>(1, total_steps - opt.warmup_steps));
    return opt.lr * (opt.min_lr_ratio + (1 - opt.min_lr_ratio) * 0.5 * (1 + std::cos(std::numbers::pi * std::min(1.0, p))));
  };

  auto finish = [&]() {
    if (!opt.loss_csv.empty()) write_text(opt.loss_csv, loss_csv(res.epochs));
    if (!opt.checkpoint.empty()) save_checkpoint(opt.checkpoint, model);
  };

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    if (epoch > 0 && opt.resample_each_epoch) samples = make_samples(scenes, opt, epoch);
    EpochStats stats;
    for (std::size_t b0 = 0; b0 < samples.size(); b0 += opt.batch) {
      const std::size_t b1 = std::min(samples.size(), b0 + opt.batch);
      std::vector<Tensor> grads;
      for (auto* p : params) grads.emplace_back(p->shape());
      // BN running statistics are staged and only committed with a successful step.
      std::vector<Tensor> buffers_before;
      model.visit_buffers([&](const std::string&, Tensor& t) { buffers_before.push_back(t); });
      try {
        std::vector<PreparedSample> batch;
        std::vector<const Tensor*> templates, searches;
        for (std::size_t i = b0; i < b1; ++i) batch.push_back(prepare_sample(scenes, samples[i], config));
        for (const auto& ps : batch) {
          templates.push_back(&ps.template_image);
          searches.push_back(&ps.search_image);
        }
        Tape tape;
        auto fwd = model.forward_batch(tape, templates, searches, BnMode::Batch, true);
        std::vector<Var> totals;
        for (std::size_t i = 0; i < batch.size(); ++i) {
          LossTerms loss = total_loss(fwd[i].head, batch[i].target, config.search_size, config.patch_size);
          const double value = loss.total.value().item();
          if (!std::isfinite(value)) throw NumericError("non-finite training loss");
          totals.push_back(loss.total);
          stats.total += value;
          stats.cls += loss.cls.value().item();
          stats.iou += loss.iou.value().item();
          stats.l1 += loss.l1.value().item();
        }
        tape.backward(mean(concat(totals, 0)));
        for (std::size_t k = 0; k < params.size(); ++k) grads[k] = tape.param_grad(*params[k]);
        double norm2 = 0.0;
        for (const auto& g : grads) {
          for (std::size_t j = 0; j < g.size(); ++j) norm2 += g[j] * g[j];
        }
        if (!std::isfinite(norm2)) throw NumericError("non-finite gradient");
        if (opt.clip_norm > 0 && norm2 > opt.clip_norm * opt.clip_norm) {
          const double s = opt.clip_norm / std::sqrt(norm2);
          for (auto& g : grads)
            for (std::size_t j = 0; j < g.size(); ++j) g[j] *= s;
        }
      } catch (const NumericError& e) {
        std::size_t k = 0;
        model.visit_buffers([&](const std::string&, Tensor& t) { t = buffers_before[k++]; });
        res.aborted = true;
        res.message = std::string(e.what()) + " at epoch " + std::to_string(epoch + 1);
        finish();
        return res;
      }
      adam.step(model, grads, lr_at(res.steps));
      ++res.steps;
    }
    const double n = static_cast<double>(samples.size());
    stats.total /= n;
    stats.cls /= n;
    stats.iou /= n;
    stats.l1 /= n;
    res.epochs.push_back(stats);
    if (opt.on_epoch) opt.on_epoch(epoch + 1, stats.total);
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const double per_epoch = elapsed / static_cast<double>(epoch + 1);
    if (opt.max_seconds > 0 && elapsed + per_epoch > opt.max_seconds && epoch + 1 < opt.epochs) {
      res.out_of_time = true;
      res.message = "time budget reached after epoch " + std::to_string(epoch + 1);
      break;
    }
  }
  finish();
  return res;
}

}  // namespace mst
