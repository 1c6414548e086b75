#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "mst/box.hpp"
#include "mst/tensor.hpp"

namespace mst {

// 8-bit RGB frame, row-major, interleaved channels.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::uint8_t fill = 0) : width(w), height(h), pixels(w * h * 3, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t ch) { return pixels[(y * width + x) * 3 + ch]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t ch) const { return pixels[(y * width + x) * 3 + ch]; }

  std::array<double, 3> mean_pixel() const {
    std::array<double, 3> m{0, 0, 0};
    for (std::size_t i = 0; i < pixels.size(); ++i) m[i % 3] += pixels[i];
    for (auto& v : m) v /= static_cast<double>(width * height);
    return m;
  }

  friend bool operator==(const Image&, const Image&) = default;
};

inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (!out) throw InputError("short write to " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t += ch;
      }
    }
    return t;
  };
  if (token() != "P6") throw InputError(path + ": not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw InputError(path + ": malformed PPM header");
  }
  if (w == 0 || h == 0 || maxval != 255) throw InputError(path + ": unsupported PPM geometry or depth");
  Image img(w, h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) throw InputError(path + ": truncated pixel data");
  return img;
}

// Square window of the frame resampled to out x out pixels.
struct CropWindow {
  double x0 = 0.0;
  double y0 = 0.0;
  double side = 1.0;
  std::size_t out = 1;

  double scale() const { return static_cast<double>(out) / side; }

  BoxXYWH to_crop(const BoxXYWH& b) const {
    const double s = scale();
    return {(b.x - x0) * s, (b.y - y0) * s, b.w * s, b.h * s};
  }

  BoxXYWH to_frame(const BoxXYWH& b) const {
    const double s = 1.0 / scale();
    return {b.x * s + x0, b.y * s + y0, b.w * s, b.h * s};
  }
};

// Window of side factor * sqrt(w h) centred on the box.
inline CropWindow context_window(const BoxXYWH& box, double factor, std::size_t out) {
  const double side = std::max(1.0, factor * std::sqrt(std::max(box.w, 1.0) * std::max(box.h, 1.0)));
  return {box.cx() - 0.5 * side, box.cy() - 0.5 * side, side, out};
}

// Bilinear resampling into an [out, out, 3] tensor of raw 0..255 values. Samples that fall
// outside the frame take the frame's mean pixel.
inline Tensor crop_window(const Image& frame, const CropWindow& win) {
  const auto mean = frame.mean_pixel();
  const std::size_t n = win.out;
  Tensor out({n, n, 3});
  const double step = win.side / static_cast<double>(n);
  const auto w = static_cast<long>(frame.width), h = static_cast<long>(frame.height);
  auto px = [&](long x, long y, std::size_t ch) -> double {
    if (x < 0 || y < 0 || x >= w || y >= h) return mean[ch];
    return frame.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), ch);
  };
  for (std::size_t r = 0; r < n; ++r) {
    const double fy = win.y0 + (static_cast<double>(r) + 0.5) * step - 0.5;
    const long y0 = static_cast<long>(std::floor(fy));
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t c = 0; c < n; ++c) {
      const double fx = win.x0 + (static_cast<double>(c) + 0.5) * step - 0.5;
      const long x0 = static_cast<long>(std::floor(fx));
      const double tx = fx - static_cast<double>(x0);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double top = (1 - tx) * px(x0, y0, ch) + tx * px(x0 + 1, y0, ch);
        const double bot = (1 - tx) * px(x0, y0 + 1, ch) + tx * px(x0 + 1, y0 + 1, ch);
        out(r, c, ch) = (1 - ty) * top + ty * bot;
      }
    }
  }
  return out;
}

// Raw pixels to network input.
inline Tensor normalize_image(const Tensor& raw) {
  Tensor out(raw.shape());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] / 255.0 - 0.5) / 0.25;
  return out;
}

inline BoxXYWH clamp_box(const BoxXYWH& b, std::size_t width, std::size_t height) {
  const double fw = static_cast<double>(width), fh = static_cast<double>(height);
  const double x1 = std::clamp(b.x, 0.0, fw - 1.0), y1 = std::clamp(b.y, 0.0, fh - 1.0);
  const double x2 = std::clamp(b.x2(), x1 + 1.0, fw), y2 = std::clamp(b.y2(), y1 + 1.0, fh);
  return {x1, y1, x2 - x1, y2 - y1};
}

struct CropResult {
  Tensor image;  // [out, out, 3], raw 0..255
  CropWindow window;
};

inline CropResult template_crop(const Image& frame, const BoxXYWH& box, double factor, std::size_t out) {
  const CropWindow win = context_window(clamp_box(box, frame.width, frame.height), factor, out);
  return {crop_window(frame, win), win};
}

struct SearchCrop {
  CropResult crop;
  BoxXYWH gt_in_crop;  // pixels of the resampled crop
};

// Search crop around the previous box with the ground truth mapped into crop coordinates.
inline SearchCrop search_crop(const Image& frame, const BoxXYWH& prev_box, const BoxXYWH& gt_box, double factor,
                              std::size_t out) {
  const CropWindow win = context_window(clamp_box(prev_box, frame.width, frame.height), factor, out);
  return {{crop_window(frame, win), win}, win.to_crop(gt_box)};
}

}  // namespace mst
