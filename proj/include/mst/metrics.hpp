#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mst/box.hpp"
#include "mst/tensor.hpp"

namespace mst {

inline double iou(const BoxXYWH& a, const BoxXYWH& b) {
  const double iw = std::max(0.0, std::min(a.x2(), b.x2()) - std::max(a.x, b.x));
  const double ih = std::max(0.0, std::min(a.y2(), b.y2()) - std::max(a.y, b.y));
  const double inter = iw * ih;
  // Areas from the same edge differences, so identical boxes give exactly 1.
  const double uni = (a.x2() - a.x) * (a.y2() - a.y) + (b.x2() - b.x) * (b.y2() - b.y) - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

inline double center_error(const BoxXYWH& a, const BoxXYWH& b) { return std::hypot(a.cx() - b.cx(), a.cy() - b.cy()); }

struct FrameResult {
  BoxXYWH pred;
  BoxXYWH gt;
  bool gt_absent = false;
};

struct SequenceResult {
  std::string name;
  std::vector<FrameResult> frames;

  void add(const BoxXYWH& pred, const BoxXYWH& gt, bool absent = false) { frames.push_back({pred, gt, absent}); }

  std::vector<const FrameResult*> counted() const {
    std::vector<const FrameResult*> out;
    for (const auto& f : frames)
      if (!f.gt_absent) out.push_back(&f);
    if (out.empty()) throw InputError("sequence '" + name + "' has no frame with a ground-truth box");
    return out;
  }
};

inline double ao(const SequenceResult& r) {
  const auto fs = r.counted();
  double total = 0.0;
  for (const auto* f : fs) total += iou(f->pred, f->gt);
  return total / static_cast<double>(fs.size());
}

inline double success_rate(const SequenceResult& r, double tau) {
  const auto fs = r.counted();
  std::size_t hits = 0;
  for (const auto* f : fs) hits += iou(f->pred, f->gt) >= tau ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(fs.size());
}

inline double precision(const SequenceResult& r, double delta) {
  const auto fs = r.counted();
  std::size_t hits = 0;
  for (const auto* f : fs) hits += center_error(f->pred, f->gt) <= delta ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(fs.size());
}

inline constexpr std::size_t kNormPrecisionSamples = 51;
inline constexpr double kNormPrecisionMax = 0.5;
inline constexpr std::size_t kAucSamples = 101;

// Area under the normalized-precision curve on [0, 0.5], rescaled to [0, 1].
inline double norm_precision(const SequenceResult& r) {
  const auto fs = r.counted();
  std::vector<double> errors;
  for (const auto* f : fs) {
    if (!(f->gt.area() > 0.0)) throw InputError("norm_precision: ground-truth box with zero area");
    errors.push_back(center_error(f->pred, f->gt) / std::sqrt(f->gt.w * f->gt.h));
  }
  double total = 0.0;
  for (std::size_t i = 0; i < kNormPrecisionSamples; ++i) {
    const double t = static_cast<double>(i) * kNormPrecisionMax / static_cast<double>(kNormPrecisionSamples - 1);
    std::size_t hits = 0;
    for (double e : errors) hits += e <= t ? 1 : 0;
    total += static_cast<double>(hits) / static_cast<double>(errors.size());
  }
  return total / static_cast<double>(kNormPrecisionSamples);
}

inline double auc(const SequenceResult& r) {
  double total = 0.0;
  for (std::size_t i = 0; i < kAucSamples; ++i) {
    total += success_rate(r, static_cast<double>(i) / static_cast<double>(kAucSamples - 1));
  }
  return total / static_cast<double>(kAucSamples);
}

struct MetricsRow {
  std::string name;
  double ao = 0.0;
  double sr50 = 0.0;
  double sr75 = 0.0;
  double p20 = 0.0;
  double pnorm = 0.0;
  double auc = 0.0;
};

inline MetricsRow evaluate(const SequenceResult& r) {
  return {r.name, ao(r), success_rate(r, 0.5), success_rate(r, 0.75), precision(r, 20.0), norm_precision(r), auc(r)};
}

// Mean of per-sequence rows.
inline MetricsRow aggregate(const std::vector<MetricsRow>& rows) {
  MetricsRow m{"mean"};
  if (rows.empty()) return m;
  for (const auto& r : rows) {
    m.ao += r.ao;
    m.sr50 += r.sr50;
    m.sr75 += r.sr75;
    m.p20 += r.p20;
    m.pnorm += r.pnorm;
    m.auc += r.auc;
  }
  const double n = static_cast<double>(rows.size());
  m.ao /= n;
  m.sr50 /= n;
  m.sr75 /= n;
  m.p20 /= n;
  m.pnorm /= n;
  m.auc /= n;
  return m;
}

inline std::string metrics_csv(const std::vector<MetricsRow>& rows) {
  std::string out = "sequence,ao,sr_0.50,sr_0.75,p_20,pnorm,auc\n";
  auto line = [&](const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", r.name.c_str(), r.ao, r.sr50, r.sr75, r.p20,
                  r.pnorm, r.auc);
    out += buf;
  };
  for (const auto& r : rows) line(r);
  line(aggregate(rows));
  return out;
}

inline std::string metrics_text(const std::vector<MetricsRow>& rows) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-16s %8s %8s %8s %8s %8s %8s\n", "sequence", "AO", "SR0.50", "SR0.75", "P20",
                "PNorm", "AUC");
  out += buf;
  auto line = [&](const MetricsRow& r) {
    std::snprintf(buf, sizeof buf, "%-16s %8.4f %8.4f %8.4f %8.4f %8.4f %8.4f\n", r.name.c_str(), r.ao, r.sr50,
                  r.sr75, r.p20, r.pnorm, r.auc);
    out += buf;
  };
  for (const auto& r : rows) line(r);
  line(aggregate(rows));
  return out;
}

// One box per line, fields separated by commas, tabs or spaces.
struct ParsedBox {
  BoxXYWH box;
  bool absent = false;
};

inline ParsedBox parse_box_line(const std::string& line, std::size_t lineno) {
  std::string s = line;
  std::replace(s.begin(), s.end(), ',', ' ');
  std::replace(s.begin(), s.end(), '\t', ' ');
  std::istringstream in(s);
  std::string tok[4];
  double v[4];
  for (int i = 0; i < 4; ++i) {
    if (!(in >> tok[i])) throw InputError("line " + std::to_string(lineno) + ": expected 4 box fields");
    try {
      v[i] = std::stod(tok[i]);
    } catch (const std::exception&) {
      if (tok[i] == "nan" || tok[i] == "NaN") {
        v[i] = std::nan("");
      } else {
        throw InputError("line " + std::to_string(lineno) + ": bad number '" + tok[i] + "'");
      }
    }
  }
  BoxXYWH b{v[0], v[1], v[2], v[3]};
  return {b, !b.valid()};
}

inline std::vector<ParsedBox> read_boxes(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open box file " + path);
  std::vector<ParsedBox> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_box_line(line, lineno));
  }
  return out;
}

inline void write_boxes(const std::string& path, const std::vector<BoxXYWH>& boxes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  for (const auto& b : boxes) out << b.to_line() << '\n';
}

// Pairs predictions with ground truth; gt lines with NaN or non-positive extents count as absent.
inline SequenceResult build_result(const std::string& name, const std::vector<ParsedBox>& pred,
                                   const std::vector<ParsedBox>& gt) {
  if (pred.size() != gt.size()) {
    throw InputError("prediction file has " + std::to_string(pred.size()) + " lines, ground truth has " +
                     std::to_string(gt.size()));
  }
  SequenceResult r{name, {}};
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const BoxXYWH p = pred[i].box;
    if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.w) || !std::isfinite(p.h) || p.w < 0 ||
        p.h < 0) {
      throw InputError("prediction line " + std::to_string(i + 1) + " is not a valid box");
    }
    r.add(p, gt[i].box, gt[i].absent);
  }
  return r;
}

}  // namespace mst
