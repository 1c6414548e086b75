#pragma once

#include <cmath>
#include <cstdio>
#include <string>

namespace mst {

// Axis-aligned box, top-left corner plus extents.
struct BoxXYWH {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  double x2() const { return x + w; }
  double y2() const { return y + h; }
  double area() const { return w * h; }
  bool valid() const { return std::isfinite(x) && std::isfinite(y) && w > 0 && h > 0; }

  static BoxXYWH from_center(double cx, double cy, double w, double h) {
    return {cx - 0.5 * w, cy - 0.5 * h, w, h};
  }

  BoxXYWH translated(double dx, double dy) const { return {x + dx, y + dy, w, h}; }

  BoxXYWH scaled(double s) const { return {x * s, y * s, w * s, h * s}; }

  std::string to_line() const {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.4f,%.4f,%.4f,%.4f", x, y, w, h);
    return buf;
  }

  friend bool operator==(const BoxXYWH&, const BoxXYWH&) = default;
};

}  // namespace mst
