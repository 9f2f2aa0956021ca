#pragma once
#include <cmath>
#include <cstddef>
#include <cstdint>

#include "errors.hpp"
#include "rng.hpp"
#include "special.hpp"
#include "tensor.hpp"

namespace pncnn {

// joint law of (f(x1), f(x2)) under the layer GP
struct BivariateGaussian {
  double mu1 = 0.0, mu2 = 0.0;
  double s11 = 1.0, s12 = 0.0, s22 = 1.0;

  static BivariateGaussian make(double m1, double m2, double v11, double v12, double v22) {
    if (!(v11 >= 0.0) || !(v22 >= 0.0) || std::fabs(v12) > std::sqrt(v11 * v22) + 1e-12)
      throw NotPositiveDefinite("bivariate gaussian wants a PSD covariance");
    return {m1, m2, v11, v12, v22};
  }
};

// per-point rectified moments handed to the next layer as measurements
struct MomentField {
  Tensor Q;     // M x d
  Tensor mean;  // M x C
  Tensor var;   // M x C, nonnegative

  std::size_t m() const { return Q.dim(0); }
  std::size_t d() const { return Q.dim(1); }
  std::size_t c() const { return mean.dim(1); }
};

// E[ReLU(f1) ReLU(f2)]; the same-point case belongs to relu_mean_var's
// second moment, so a degenerate covariance is refused here
inline double relu_cross_moment(const BivariateGaussian& bg) {
  const BvnDerivs dv = bvn_cdf_grad_hess(bg.mu1, bg.mu2, bg.s11, bg.s12, bg.s22);
  // columns c1 = (s11, s12), c2 = (s12, s22)
  const double lin = bg.mu1 * (bg.s12 * dv.g[0] + bg.s22 * dv.g[1]) +
                     bg.mu2 * (bg.s11 * dv.g[0] + bg.s12 * dv.g[1]);
  const double quad = bg.s11 * (dv.h[0][0] * bg.s12 + dv.h[0][1] * bg.s22) +
                      bg.s12 * (dv.h[1][0] * bg.s12 + dv.h[1][1] * bg.s22);
  return (bg.s12 + bg.mu1 * bg.mu2) * dv.p + lin + quad;
}

struct RectifiedSample {
  double e1 = 0.0, e2 = 0.0, e12 = 0.0;     // sample means of h1, h2, h1 h2
  double se1 = 0.0, se2 = 0.0, se12 = 0.0;  // standard errors
};

// plain Monte Carlo over rectified draws; PSD factor built directly so the
// comonotone limit stays usable
inline RectifiedSample mc_rectified_oracle(const BivariateGaussian& bg, std::size_t n_samples,
                                           std::uint64_t seed) {
  check_shape(n_samples >= 10000, "mc_rectified_oracle wants n_samples >= 1e4");
  const double l11 = std::sqrt(bg.s11);
  const double l21 = l11 > 0.0 ? bg.s12 / l11 : 0.0;
  const double l22 = std::sqrt(std::max(bg.s22 - l21 * l21, 0.0));

  Rng rng(seed);
  double s1 = 0.0, s2 = 0.0, s12 = 0.0, q1 = 0.0, q2 = 0.0, q12 = 0.0;
  for (std::size_t i = 0; i < n_samples; ++i) {
    const double z1 = rng.gaussian(), z2 = rng.gaussian();
    const double h1 = std::max(bg.mu1 + l11 * z1, 0.0);
    const double h2 = std::max(bg.mu2 + l21 * z1 + l22 * z2, 0.0);
    s1 += h1;
    s2 += h2;
    s12 += h1 * h2;
    q1 += h1 * h1;
    q2 += h2 * h2;
    q12 += h1 * h1 * h2 * h2;
  }
  const double n = static_cast<double>(n_samples);
  RectifiedSample out;
  out.e1 = s1 / n;
  out.e2 = s2 / n;
  out.e12 = s12 / n;
  out.se1 = std::sqrt(std::max(q1 / n - out.e1 * out.e1, 0.0) / n);
  out.se2 = std::sqrt(std::max(q2 / n - out.e2 * out.e2, 0.0) / n);
  out.se12 = std::sqrt(std::max(q12 / n - out.e12 * out.e12, 0.0) / n);
  return out;
}

}  // namespace pncnn
