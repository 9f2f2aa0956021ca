#pragma once
#include <cmath>
#include <cstddef>

#include "gp.hpp"
#include "linalg.hpp"
#include "special.hpp"
#include "tensor.hpp"

namespace pncnn {

// infinite-domain pooled mean: integrating the RBF against R^d leaves a,
// so P mu_p = a sum_i alpha_i per channel
inline Tensor pool_mean(const RbfGp& gp) {
  const std::size_t c = gp.c();
  Tensor out{{c}};
  const double a = gp.hyper.a();
  for (std::size_t i = 0; i < gp.n(); ++i)
    for (std::size_t ch = 0; ch < c; ++ch) out(ch) += a * gp.alpha(i, ch);
  return out;
}

// kernel integrated over the unit box, evaluated at x'
inline double box_kernel_integral(const RbfHyper& hy, const double* x) {
  const double l = hy.l();
  double f = hy.a();
  for (std::size_t j = 0; j < static_cast<std::size_t>(hy.d); ++j)
    f *= normal_cdf(x[j] / l) - normal_cdf((x[j] - 1.0) / l);
  return f;
}

// prior kernel integrated over both box arguments
inline double box_prior_double_integral(const RbfHyper& hy) {
  const double l = hy.l();
  const double base = l * std::sqrt(2.0 / M_PI) * (std::exp(-1.0 / (2.0 * l * l)) - 1.0) +
                      2.0 * normal_cdf(1.0 / l) - 1.0;
  return hy.a() * std::pow(base, static_cast<double>(hy.d));
}

struct BoxPooled {
  Tensor mean;  // C
  Tensor var;   // C, nonnegative
};

// finite-box pooling over [0,1]^d with the posterior covariance of the
// integral per channel
inline BoxPooled pool_box(const RbfGp& gp) {
  const std::size_t n = gp.n(), c = gp.c(), d = static_cast<std::size_t>(gp.hyper.d);
  BoxPooled out{Tensor{{c}}, Tensor{{c}}};
  const double prior = box_prior_double_integral(gp.hyper);

  Tensor pk{{n}};
  for (std::size_t i = 0; i < n; ++i) pk(i) = box_kernel_integral(gp.hyper, gp.X.data() + i * d);

  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += pk(i) * gp.alpha(i, ch);
    out.mean(ch) = mean;
    double v = prior;
    if (n > 0) {
      const Tensor sol = solve_chol(gp.chol[gp.group_of[ch]], pk.reshaped({n, 1}));
      for (std::size_t i = 0; i < n; ++i) v -= pk(i) * sol(i, 0);
    }
    out.var(ch) = std::max(v, 0.0);
  }
  return out;
}

}  // namespace pncnn
