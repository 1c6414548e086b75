#include "mst/grad_suite.hpp"

#include "grad_rows.hpp"
#include "mst/verify.hpp"

namespace mst {

std::vector<GradSuiteRow> run_grad_suite(const std::string& module, std::size_t seeds) {
  auto rows = detail::collect_rows(grad_cases(), module, seeds, false, false);
  for (auto& r : detail::extended_grad_rows(module, seeds)) rows.push_back(std::move(r));
  return rows;
}

std::vector<std::string> grad_suite_modules() { return grad_modules(); }

}  // namespace mst
