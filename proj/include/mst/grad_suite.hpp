#pragma once

#include <cstddef>
#include <string>
#include <vector>

// Deliberately free of the tensor headers: the composite half of the suite is compiled
// with a different scalar type.
namespace mst {

struct GradSuiteRow {
  std::string module;
  std::string name;
  double worst = 0.0;  // max relative error over all seeds
  std::size_t seeds = 0;
  double seconds = 0.0;
  bool extended = false;  // evaluated in long double
};

// Runs every gradient case of `module` ("" for all) over seeds 0..seeds-1. Primitive ops
// run in double; composite blocks run in long double.
std::vector<GradSuiteRow> run_grad_suite(const std::string& module, std::size_t seeds);

std::vector<std::string> grad_suite_modules();

namespace detail {
std::vector<GradSuiteRow> extended_grad_rows(const std::string& module, std::size_t seeds);
}  // namespace detail

}  // namespace mst
