#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "mst/box.hpp"
#include "mst/image.hpp"
#include "mst/metrics.hpp"

namespace mst {

using Rgb = std::array<double, 3>;

struct Trajectory {
  double x0 = 160.0, y0 = 120.0;   // initial center
  double vx = 0.0, vy = 0.0;       // px per frame
  double wobble = 0.0;             // sinusoidal amplitude, px
  double wobble_period = 40.0;     // frames
  double phase = 0.0;
  double scale_amp = 0.0;          // relative size oscillation
  double scale_period = 60.0;

  // Center at frame t, reflected at the margins so the object stays inside the frame.
  std::array<double, 2> center(std::size_t t, double half_w, double half_h, double width, double height) const {
    const double ft = static_cast<double>(t);
    const double w = std::sin(2.0 * std::numbers::pi * ft / wobble_period + phase);
    const double cx = x0 + vx * ft + wobble * w;
    const double cy = y0 + vy * ft + wobble * std::cos(2.0 * std::numbers::pi * ft / wobble_period + phase);
    return {reflect(cx, half_w, width - half_w), reflect(cy, half_h, height - half_h)};
  }

  double scale(std::size_t t) const {
    return 1.0 + scale_amp * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) / scale_period);
  }

  static double reflect(double v, double lo, double hi) {
    if (hi <= lo) return 0.5 * (lo + hi);
    const double span = hi - lo;
    double u = std::fmod(v - lo, 2.0 * span);
    if (u < 0) u += 2.0 * span;
    return lo + (u <= span ? u : 2.0 * span - u);
  }
};

struct SceneObject {
  double w = 40.0, h = 40.0;
  Rgb primary{220, 40, 40};
  Rgb secondary{250, 220, 60};
  int stripes = 3;
  Trajectory path;
};

struct Occluder {
  std::size_t first = 0, last = 0;  // inclusive frame range
  BoxXYWH region;
  Rgb color{90, 90, 90};
};

struct SyntheticScene {
  std::uint64_t seed = 42;
  std::size_t width = 320;
  std::size_t height = 240;
  std::size_t num_frames = 100;
  SceneObject target;
  std::vector<SceneObject> distractors;
  std::vector<Occluder> occluders;
  double noise = 4.0;

  // Randomized scene: moving striped target, two look-alike distractors in other colors,
  // one partial occluder and per-frame sensor noise.
  static SyntheticScene random(std::uint64_t seed, std::size_t frames) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SyntheticScene s;
    s.seed = seed;
    s.num_frames = frames;
    auto object = [&](const Rgb& a, const Rgb& b) {
      SceneObject o;
      o.w = 30.0 + 18.0 * u(rng);
      o.h = 30.0 + 18.0 * u(rng);
      o.primary = a;
      o.secondary = b;
      o.stripes = 2 + static_cast<int>(3 * u(rng));
      o.path.x0 = 60.0 + 200.0 * u(rng);
      o.path.y0 = 50.0 + 140.0 * u(rng);
      const double speed = 0.8 + 1.6 * u(rng);
      const double ang = 2.0 * std::numbers::pi * u(rng);
      o.path.vx = speed * std::cos(ang);
      o.path.vy = speed * std::sin(ang);
      o.path.wobble = 6.0 + 10.0 * u(rng);
      o.path.wobble_period = 30.0 + 40.0 * u(rng);
      o.path.phase = 2.0 * std::numbers::pi * u(rng);
      o.path.scale_amp = 0.15 * u(rng);
      o.path.scale_period = 50.0 + 50.0 * u(rng);
      return o;
    };
    auto color = [&]() { return Rgb{40 + 200 * u(rng), 40 + 200 * u(rng), 40 + 200 * u(rng)}; };
    const Rgb tp = color(), ts = color();
    s.target = object(tp, ts);
    for (int i = 0; i < 2; ++i) {
      // Same pattern, hue-rotated colors.
      s.distractors.push_back(object(Rgb{tp[1], tp[2], tp[0]}, Rgb{ts[2], ts[0], ts[1]}));
    }
    Occluder occ;
    occ.first = frames / 3 + static_cast<std::size_t>(u(rng) * static_cast<double>(frames / 3));
    occ.last = std::min(frames - 1, occ.first + 8);
    occ.region = {0, 0, 0.3 * s.target.w, 0.6 * s.target.h};
    s.occluders.push_back(occ);
    return s;
  }
};

// Fraction of [a0, a1] covered by [b0, b1].
inline double overlap_1d(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

struct RenderedScene {
  std::vector<Image> frames;
  std::vector<BoxXYWH> boxes;
};

inline BoxXYWH object_box(const SceneObject& o, std::size_t t, std::size_t width, std::size_t height) {
  const double s = o.path.scale(t);
  const double w = o.w * s, h = o.h * s;
  const auto c = o.path.center(t, 0.5 * w, 0.5 * h, static_cast<double>(width), static_cast<double>(height));
  return BoxXYWH::from_center(c[0], c[1], w, h);
}

namespace synth_detail {

struct Canvas {
  std::size_t w, h;
  std::vector<double> px;  // rgb doubles

  void blend(std::size_t x, std::size_t y, const Rgb& c, double a) {
    double* p = &px[(y * w + x) * 3];
    for (int k = 0; k < 3; ++k) p[k] = (1 - a) * p[k] + a * c[k];
  }
};

// Antialiased box with a diagonal stripe pattern and a dark outline.
inline void draw_object(Canvas& cv, const BoxXYWH& b, const SceneObject& o) {
  const auto xa = static_cast<long>(std::floor(b.x)), xb = static_cast<long>(std::ceil(b.x2()));
  const auto ya = static_cast<long>(std::floor(b.y)), yb = static_cast<long>(std::ceil(b.y2()));
  for (long y = std::max(0L, ya); y < std::min(static_cast<long>(cv.h), yb); ++y) {
    const double cy = overlap_1d(static_cast<double>(y), static_cast<double>(y + 1), b.y, b.y2());
    for (long x = std::max(0L, xa); x < std::min(static_cast<long>(cv.w), xb); ++x) {
      const double cx = overlap_1d(static_cast<double>(x), static_cast<double>(x + 1), b.x, b.x2());
      const double cover = cx * cy;
      if (cover <= 0) continue;
      const double u = (static_cast<double>(x) + 0.5 - b.x) / b.w;
      const double v = (static_cast<double>(y) + 0.5 - b.y) / b.h;
      Rgb c = (static_cast<int>(std::floor((u + v) * o.stripes)) % 2 == 0) ? o.primary : o.secondary;
      if (u < 0.08 || u > 0.92 || v < 0.08 || v > 0.92) c = {c[0] * 0.35, c[1] * 0.35, c[2] * 0.35};
      cv.blend(static_cast<std::size_t>(x), static_cast<std::size_t>(y), c, std::min(1.0, cover));
    }
  }
}

inline void fill_rect(Canvas& cv, const BoxXYWH& b, const Rgb& c) {
  for (std::size_t y = 0; y < cv.h; ++y) {
    const double cy = overlap_1d(static_cast<double>(y), static_cast<double>(y + 1), b.y, b.y2());
    if (cy <= 0) continue;
    for (std::size_t x = 0; x < cv.w; ++x) {
      const double cx = overlap_1d(static_cast<double>(x), static_cast<double>(x + 1), b.x, b.x2());
      if (cx > 0) cv.blend(x, y, c, std::min(1.0, cx * cy));
    }
  }
}

}  // namespace synth_detail

// Deterministic rendering: the same scene (seed included) gives identical pixels.
inline RenderedScene render_scene(const SyntheticScene& s) {
  if (s.width < 16 || s.height < 16 || s.num_frames == 0) throw InputError("synthetic scene too small");
  if (!(s.target.w > 0 && s.target.h > 0)) throw InputError("synthetic target needs positive size");
  std::mt19937_64 rng(s.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // Static background: low-frequency color waves plus fine texture.
  std::vector<double> bg(s.width * s.height * 3);
  struct Wave {
    double fx, fy, ph;
    Rgb amp;
  };
  std::vector<Wave> waves;
  for (int i = 0; i < 4; ++i) {
    waves.push_back({(u(rng) - 0.5) * 0.08, (u(rng) - 0.5) * 0.08, 2.0 * std::numbers::pi * u(rng),
                     Rgb{30 * u(rng), 30 * u(rng), 30 * u(rng)}});
  }
  const Rgb base{90 + 60 * u(rng), 90 + 60 * u(rng), 90 + 60 * u(rng)};
  std::normal_distribution<double> texture(0.0, 10.0);
  for (std::size_t y = 0; y < s.height; ++y) {
    for (std::size_t x = 0; x < s.width; ++x) {
      const double t = texture(rng);
      for (int k = 0; k < 3; ++k) {
        double v = base[k] + t;
        for (const auto& wv : waves) {
          v += wv.amp[k] * std::sin(wv.fx * static_cast<double>(x) + wv.fy * static_cast<double>(y) + wv.ph);
        }
        bg[(y * s.width + x) * 3 + k] = v;
      }
    }
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  RenderedScene out;
  for (std::size_t t = 0; t < s.num_frames; ++t) {
    synth_detail::Canvas cv{s.width, s.height, bg};
    for (const auto& d : s.distractors) synth_detail::draw_object(cv, object_box(d, t, s.width, s.height), d);
    const BoxXYWH tb = object_box(s.target, t, s.width, s.height);
    synth_detail::draw_object(cv, tb, s.target);
    for (const auto& o : s.occluders) {
      if (t < o.first || t > o.last) continue;
      // Region is placed relative to the target's top-left corner.
      synth_detail::fill_rect(cv, o.region.translated(tb.x, tb.y), o.color);
    }
    Image img(s.width, s.height);
    for (std::size_t i = 0; i < img.pixels.size(); ++i) {
      const double v = cv.px[i] + (s.noise > 0 ? s.noise * noise(rng) : 0.0);
      img.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    }
    out.frames.push_back(std::move(img));
    out.boxes.push_back(tb);
  }
  return out;
}

inline std::string frame_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%08zu.ppm", index + 1);
  return buf;
}

// Writes frames as PPM plus groundtruth.txt (one "x,y,w,h" line per frame).
inline RenderedScene generate_sequence(const SyntheticScene& s, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  RenderedScene r = render_scene(s);
  for (std::size_t i = 0; i < r.frames.size(); ++i) write_ppm((fs::path(dir) / frame_name(i)).string(), r.frames[i]);
  write_boxes((fs::path(dir) / "groundtruth.txt").string(), r.boxes);
  return r;
}

// A sequence on disk in the frames + groundtruth.txt layout.
struct SequenceDir {
  std::string path;
  std::vector<std::string> frames;
  std::vector<ParsedBox> gt;

  static SequenceDir open(const std::string& dir) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw InputError("not a sequence directory: " + dir);
    SequenceDir s{dir, {}, {}};
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".ppm") s.frames.push_back(e.path().string());
    }
    std::sort(s.frames.begin(), s.frames.end());
    if (s.frames.empty()) throw InputError("no .ppm frames in " + dir);
    const fs::path gt = fs::path(dir) / "groundtruth.txt";
    if (fs::exists(gt)) s.gt = read_boxes(gt.string());
    return s;
  }

  bool has_gt() const { return !gt.empty(); }
};

// Sequence directories under root (root itself if it holds a sequence).
inline std::vector<std::string> find_sequences(const std::string& root) {
  namespace fs = std::filesystem;
  if (fs::exists(fs::path(root) / "groundtruth.txt")) return {root};
  std::vector<std::string> out;
  if (fs::is_directory(root)) {
    for (const auto& e : fs::directory_iterator(root)) {
      if (e.is_directory() && fs::exists(e.path() / "groundtruth.txt")) out.push_back(e.path().string());
    }
  }
  std::sort(out.begin(), out.end());
  if (out.empty()) throw InputError("no sequences with groundtruth.txt under " + root);
  return out;
}

}  // namespace mst
