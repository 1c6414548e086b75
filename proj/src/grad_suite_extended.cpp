// The tensor headers compiled a second time with long double scalars. Renaming the
// namespace keeps these inline definitions distinct from the double ones linked alongside.
#include "grad_rows.hpp"
#include "mst/grad_suite.hpp"

#define MST_REAL long double
#define mst mst_ext
#include "mst/verify.hpp"
#undef mst

namespace mst::detail {

std::vector<GradSuiteRow> extended_grad_rows(const std::string& module, std::size_t seeds) {
  return collect_rows(mst_ext::grad_cases(), module, seeds, true, true);
}

}  // namespace mst::detail
