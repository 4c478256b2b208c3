#ifndef MMN_GRAD_CHECK_HPP_
#define MMN_GRAD_CHECK_HPP_

#include <functional>
#include <string>
#include <vector>

#include "mmn/graph.hpp"

namespace mmn::diffcore {

// Builds a scalar on the given graph, reading parameters through
// Graph::param.
using ScalarFn = std::function<Var(Graph&)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
  // Coordinates whose stencil crossed a non-differentiable point (relu or
  // max-pool switch); those are judged on a finer step.
  std::size_t kinks = 0;
};

// Compares backward() against central differences over every coordinate of
// every listed parameter. Error per coordinate is
// |analytic - numeric| / max(1, |numeric|). When a coordinate disagrees, the
// step is cut by 10 (up to 1000x) until two successive estimates agree. The
// parameters are restored on return.
GradCheckResult grad_check(const ScalarFn& fn,
                           const std::vector<Parameter*>& params,
                           double eps = 1e-5);
GradCheckResult grad_check(const ScalarFn& fn, ParameterStore& store,
                           double eps = 1e-5);

}  // namespace mmn::diffcore

#endif  // MMN_GRAD_CHECK_HPP_
