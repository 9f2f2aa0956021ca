#pragma once
#include <cstddef>
#include <functional>

#include "errors.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pncnn {

using MatVec = std::function<Tensor(const Tensor&)>;

// diag(B) ~ (1/P) sum_p z_p (x) B z_p with z ~ N(0, I); unbiased for any
// square B, exact in expectation, variance shrinks like 1/P
inline Tensor stochastic_diag(const MatVec& apply, std::size_t n, std::size_t probes, Rng& rng) {
  check_shape(probes >= 1, "stochastic_diag wants at least one probe");
  Tensor acc{{n}};
  Tensor z{{n}};
  for (std::size_t p = 0; p < probes; ++p) {
    for (std::size_t i = 0; i < n; ++i) z(i) = rng.gaussian();
    const Tensor w = apply(z);
    check_shape(w.numel() == n, "stochastic_diag matvec changed size");
    for (std::size_t i = 0; i < n; ++i) acc(i) += z(i) * w[i];
  }
  const double inv = 1.0 / static_cast<double>(probes);
  for (std::size_t i = 0; i < n; ++i) acc(i) *= inv;
  return acc;
}

}  // namespace pncnn
