#include "mmn/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "mmn/error.hpp"

namespace mmn::diffcore {

namespace {

double evaluate(const ScalarFn& fn) {
  Graph g(false);
  Var out = fn(g);
  if (out.value().size() != 1) {
    throw ShapeError("grad_check: function must return a scalar, got " +
                     out.value().shape_string());
  }
  const double v = out.value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite output");
  return v;
}

// Central difference along coordinate k of p.
double central(const ScalarFn& fn, Parameter* p, std::size_t k, double h) {
  const double saved = p->value[k];
  p->value[k] = saved + h;
  const double up = evaluate(fn);
  p->value[k] = saved - h;
  const double down = evaluate(fn);
  p->value[k] = saved;
  return (up - down) / (2.0 * h);
}

constexpr double kRefineAbove = 1e-8;
constexpr double kAgreement = 1e-6;
constexpr int kMaxRefinements = 3;

}  // namespace

GradCheckResult grad_check(const ScalarFn& fn,
                           const std::vector<Parameter*>& params, double eps) {
  if (!(eps > 0.0 && eps <= 1e-2)) {
    throw InvalidArgument("grad_check: eps must lie in (0, 1e-2]");
  }
  for (Parameter* p : params) p->grad = Tensor(p->value.shape());
  {
    Graph g;
    Var out = fn(g);
    if (out.value().size() != 1) {
      throw ShapeError("grad_check: function must return a scalar, got " +
                       out.value().shape_string());
    }
    if (!std::isfinite(out.value()[0])) {
      throw NumericError("grad_check: non-finite output");
    }
    g.backward(out);
  }

  GradCheckResult result;
  for (Parameter* p : params) {
    if (!p->grad.all_finite()) {
      throw NumericError("grad_check: non-finite gradient for " + p->name);
    }
    for (std::size_t k = 0; k < p->value.size(); ++k) {
      double numeric = central(fn, p, k, eps);
      auto error_of = [&](double n) {
        return std::abs(p->grad[k] - n) / std::max(1.0, std::abs(n));
      };
      if (error_of(numeric) > kRefineAbove) {
        // A stencil straddling a kink gives an estimate that moves with h.
        double h = eps;
        for (int r = 0; r < kMaxRefinements; ++r) {
          h /= 10.0;
          const double finer = central(fn, p, k, h);
          const bool stable =
              std::abs(finer - numeric) <= kAgreement * std::max(1.0, std::abs(numeric));
          if (stable) break;
          if (r == 0) ++result.kinks;
          numeric = finer;
        }
      }
      const double err = error_of(numeric);
      ++result.coordinates;
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_param = p->name;
        result.worst_index = k;
      }
    }
  }
  return result;
}

GradCheckResult grad_check(const ScalarFn& fn, ParameterStore& store,
                           double eps) {
  std::vector<Parameter*> params;
  for (auto& p : store.all()) params.push_back(&p);
  return grad_check(fn, params, eps);
}

}  // namespace mmn::diffcore
