#pragma once

#include <algorithm>
#include <chrono>

#include "mst/grad_suite.hpp"

namespace mst::detail {

// Generic over the case type so both scalar builds share it.
template <class Cases>
std::vector<GradSuiteRow> collect_rows(const Cases& cases, const std::string& module, std::size_t seeds,
                                       bool composite, bool extended) {
  std::vector<GradSuiteRow> rows;
  for (const auto& c : cases) {
    if (c.composite() != composite) continue;
    if (!module.empty() && c.module != module) continue;
    const auto start = std::chrono::steady_clock::now();
    GradSuiteRow row{c.module, c.name, 0.0, seeds, 0.0, extended};
    for (std::size_t s = 0; s < seeds; ++s) row.worst = std::max(row.worst, static_cast<double>(c.run(s)));
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    rows.push_back(row);
  }
  return rows;
}

}  // namespace mst::detail
