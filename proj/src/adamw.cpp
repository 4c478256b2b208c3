#include "mmn/adamw.hpp"

#include <cmath>

#include "mmn/error.hpp"

namespace mmn::diffcore {

void adamw_step(ParameterStore& params, AdamWState& state) {
  const AdamWConfig& c = state.config;
  if (!(c.lr > 0.0)) throw InvalidArgument("adamw: learning rate must be > 0");
  for (const auto& p : params.all()) {
    if (p.grad.shape() != p.value.shape()) {
      throw ShapeError("adamw: gradient shape " + p.grad.shape_string() +
                       " for parameter " + p.name + " of shape " +
                       p.value.shape_string());
    }
    if (!p.grad.all_finite()) {
      throw NumericError("adamw: non-finite gradient for parameter " + p.name);
    }
  }

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(c.beta1, t);
  const double bc2 = 1.0 - std::pow(c.beta2, t);
  for (auto& p : params.all()) {
    auto [it, fresh] = state.moments.try_emplace(p.name);
    auto& mom = it->second;
    if (fresh || mom.first.shape() != p.value.shape()) {
      mom.first = Tensor(p.value.shape());
      mom.second = Tensor(p.value.shape());
    }
    const double lr = c.lr * p.lr_scale;
    const double decay = 1.0 - lr * c.weight_decay;
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      mom.first[k] = c.beta1 * mom.first[k] + (1.0 - c.beta1) * g;
      mom.second[k] = c.beta2 * mom.second[k] + (1.0 - c.beta2) * g * g;
      const double m_hat = mom.first[k] / bc1;
      const double v_hat = mom.second[k] / bc2;
      p.value[k] = p.value[k] * decay - lr * m_hat / (std::sqrt(v_hat) + c.eps);
    }
  }
}

}  // namespace mmn::diffcore
