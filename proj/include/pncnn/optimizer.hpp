#pragma once
#include <cmath>
#include <cstdint>
#include <vector>

#include "errors.hpp"

namespace pncnn {

struct AdamConfig {
  double lr = 3e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<double> m, v;
  std::int64_t step = 0;
};

inline void adam_step(std::vector<double>& params, const std::vector<double>& grad,
                      AdamState& st, const AdamConfig& cfg) {
  check_shape(params.size() == grad.size(), "adam_step parameter/gradient length mismatch");
  if (st.m.empty() && st.v.empty() && st.step == 0) {
    st.m.assign(params.size(), 0.0);
    st.v.assign(params.size(), 0.0);
  }
  check_shape(st.m.size() == params.size() && st.v.size() == params.size(),
              "adam_step state length mismatch");
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * grad[i];
    st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    params[i] -= cfg.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + cfg.eps);
  }
}

}  // namespace pncnn
