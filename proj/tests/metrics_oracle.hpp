#pragma once

// Spreadsheet-style metric oracle: one row of derived columns per frame, then column
// aggregates. Shares nothing with the metrics header except the box and row structs.

#include <cmath>
#include <string>
#include <vector>

#include "mst/metrics.hpp"

namespace mst::testing {

struct SheetRow {
  double overlap = 0;  // IoU
  double dist = 0;     // center distance, px
  double ndist = 0;    // center distance / sqrt(gt area)
};

inline SheetRow sheet_row(const BoxXYWH& p, const BoxXYWH& g) {
  const double pl = p.x, pr = p.x + p.w, pt = p.y, pb = p.y + p.h;
  const double gl = g.x, gr = g.x + g.w, gt = g.y, gb = g.y + g.h;
  double ow = (pr < gr ? pr : gr) - (pl > gl ? pl : gl);
  double oh = (pb < gb ? pb : gb) - (pt > gt ? pt : gt);
  if (ow < 0) ow = 0;
  if (oh < 0) oh = 0;
  const double both = p.w * p.h + g.w * g.h - ow * oh;
  SheetRow r;
  r.overlap = both > 0 ? ow * oh / both : 0;
  const double dx = (pl + pr) / 2 - (gl + gr) / 2, dy = (pt + pb) / 2 - (gt + gb) / 2;
  r.dist = std::sqrt(dx * dx + dy * dy);
  r.ndist = r.dist / std::sqrt(g.w * g.h);
  return r;
}

inline MetricsRow sheet_metrics(const SequenceResult& seq) {
  std::vector<SheetRow> rows;
  for (const auto& f : seq.frames)
    if (!f.gt_absent) rows.push_back(sheet_row(f.pred, f.gt));
  const double n = static_cast<double>(rows.size());
  auto frac = [&](auto pred) {
    double c = 0;
    for (const auto& r : rows) c += pred(r) ? 1 : 0;
    return c / n;
  };
  MetricsRow m{seq.name};
  for (const auto& r : rows) m.ao += r.overlap / n;
  m.sr50 = frac([](const SheetRow& r) { return r.overlap >= 0.5; });
  m.sr75 = frac([](const SheetRow& r) { return r.overlap >= 0.75; });
  m.p20 = frac([](const SheetRow& r) { return r.dist <= 20; });
  for (int k = 0; k <= 50; ++k) m.pnorm += frac([&](const SheetRow& r) { return r.ndist <= k / 100.0; }) / 51;
  for (int k = 0; k <= 100; ++k) m.auc += frac([&](const SheetRow& r) { return r.overlap >= k / 100.0; }) / 101;
  return m;
}

// Ten small hand-built sequences covering perfect, disjoint, partial, shifted, scaled and
// absent-gt frames.
inline std::vector<SequenceResult> hand_sequences() {
  std::vector<SequenceResult> out;
  auto seq = [&](std::string name) -> SequenceResult& {
    out.push_back(SequenceResult{std::move(name), {}});
    return out.back();
  };
  {
    auto& s = seq("perfect");
    for (int i = 0; i < 5; ++i) s.add({10.0 + i, 20, 30, 40}, {10.0 + i, 20, 30, 40});
  }
  {
    auto& s = seq("disjoint");
    for (int i = 0; i < 4; ++i) s.add({0, 0, 10, 10}, {100.0 + 5 * i, 100, 10, 10});
  }
  {
    auto& s = seq("quarter_overlap");
    s.add({0, 0, 2, 2}, {1, 1, 2, 2});
    s.add({0, 0, 4, 4}, {2, 0, 4, 4});
    s.add({0, 0, 4, 4}, {0, 0, 4, 4});
  }
  {
    auto& s = seq("shift_5_25");
    s.add({5, 0, 40, 40}, {0, 0, 40, 40});
    s.add({25, 0, 40, 40}, {0, 0, 40, 40});
  }
  {
    auto& s = seq("scaled");
    s.add({0, 0, 20, 20}, {0, 0, 40, 40});
    s.add({10, 10, 20, 20}, {0, 0, 40, 40});
    s.add({-10, -10, 60, 60}, {0, 0, 40, 40});
    s.add({0, 0, 40, 80}, {0, 0, 40, 40});
  }
  {
    auto& s = seq("with_absent");
    s.add({0, 0, 10, 10}, {0, 0, 10, 10});
    s.add({50, 50, 10, 10}, {0, 0, 0, 0}, true);
    s.add({3, 4, 10, 10}, {0, 0, 10, 10});
  }
  {
    auto& s = seq("drift");
    for (int i = 0; i < 10; ++i) s.add({3.0 * i, 1.5 * i, 32, 24}, {0, 0, 32, 24});
  }
  {
    auto& s = seq("norm_quarter");
    s.add({1, 0, 4, 4}, {0, 0, 4, 4});
  }
  {
    auto& s = seq("mixed");
    s.add({12.5, 7.25, 50, 30}, {10, 10, 48, 33});
    s.add({90, 40, 25, 25}, {60, 45, 30, 20});
    s.add({200, 200, 5, 5}, {0, 0, 5, 5});
    s.add({14, 9, 20, 26}, {15, 10, 19, 25});
    s.add({0, 0, 1, 1}, {0.5, 0.5, 1, 1});
  }
  {
    auto& s = seq("far_large");
    s.add({0, 0, 200, 100}, {150, 20, 100, 100});
    s.add({0, 0, 200, 100}, {30, 10, 100, 60});
    s.add({0, 0, 200, 100}, {0, 0, 200, 100});
  }
  return out;
}

}  // namespace mst::testing
