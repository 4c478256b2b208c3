#ifndef MMN_ADAMW_HPP_
#define MMN_ADAMW_HPP_

#include <cstdint>
#include <map>
#include <string>

#include "mmn/graph.hpp"

namespace mmn::diffcore {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct AdamWState {
  struct Moments {
    Tensor first;
    Tensor second;
  };
  AdamWConfig config;
  std::uint64_t step = 0;
  std::map<std::string, Moments> moments;
};

// One AdamW update with decoupled weight decay:
//   p <- p * (1 - lr * wd)
//   p <- p - lr * m_hat / (sqrt(v_hat) + eps)
// where lr is config.lr scaled by the parameter's lr_scale.
void adamw_step(ParameterStore& params, AdamWState& state);

}  // namespace mmn::diffcore

#endif  // MMN_ADAMW_HPP_
