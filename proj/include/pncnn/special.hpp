#pragma once
#include <array>
#include <cmath>

#include "errors.hpp"

namespace pncnn {

inline constexpr double kInvSqrt2Pi = 0.39894228040143267793994605993438;
inline constexpr double kSqrt2 = 1.4142135623730950488016887242097;
inline constexpr double kTwoPi = 6.2831853071795864769252867665590;

inline double normal_pdf(double z) { return kInvSqrt2Pi * std::exp(-0.5 * z * z); }

inline double normal_pdf(double z, double var) {
  return kInvSqrt2Pi / std::sqrt(var) * std::exp(-0.5 * z * z / var);
}

// Phi(z), absolute error a few ulp via erfc.
inline double normal_cdf(double z) { return 0.5 * std::erfc(-z / kSqrt2); }

// E[max(g,0)] and Var[max(g,0)] for g ~ N(mu, var).
// Deterministic branch when the std falls under 1e-8.
struct ReluMoments {
  double mean;
  double var;
};

inline ReluMoments relu_mean_var(double mu, double var) {
  const double sd = std::sqrt(std::max(var, 0.0));
  if (sd < 1e-8) return {mu > 0.0 ? mu : 0.0, 0.0};
  const double t = mu / sd;
  const double cdf = normal_cdf(t);
  const double pdf = normal_pdf(t);
  const double mean = mu * cdf + sd * pdf;
  const double second = (var + mu * mu) * cdf + mu * sd * pdf;
  double v = second - mean * mean;
  if (v < 0.0) v = 0.0;
  return {mean, v};
}

namespace detail {

// 20-point Gauss-Legendre nodes/weights on [-1, 1].
inline constexpr std::array<double, 10> kGl20X = {
    0.0765265211334973, 0.2277858511416451, 0.3737060887154195, 0.5108670019508271,
    0.6360536807265150, 0.7463319064601508, 0.8391169718222188, 0.9122344282513259,
    0.9639719272779138, 0.9931285991850949};
inline constexpr std::array<double, 10> kGl20W = {
    0.1527533871307258, 0.1491729864726037, 0.1420961093183820, 0.1316886384491766,
    0.1181945319615184, 0.1019301198172404, 0.0832767415767048, 0.0626720483341091,
    0.0406014298003869, 0.0176140071391521};

// integral of phi(u) * Phi((a - rho*u)/s) du over [lo, hi]
inline double bvn_panel(double lo, double hi, double a, double rho, double s) {
  const double c = 0.5 * (hi + lo), h = 0.5 * (hi - lo);
  double acc = 0.0;
  for (int i = 0; i < 10; ++i) {
    for (int sign = -1; sign <= 1; sign += 2) {
      const double u = c + sign * h * kGl20X[(std::size_t)i];
      acc += kGl20W[(std::size_t)i] * normal_pdf(u) * normal_cdf((a - rho * u) / s);
    }
  }
  return acc * h;
}

}  // namespace detail

// Standardized bivariate normal CDF P(U1 <= a, U2 <= b), corr rho, via the
// conditional decomposition Phi2 = int_{-inf}^{b} phi(u) Phi((a-rho u)/sqrt(1-rho^2)) du
// on panelled Gauss-Legendre. Absolute error well under 1e-10.
inline double bvn_cdf_standard(double a, double b, double rho) {
  if (rho > 1.0 && rho < 1.0 + 1e-9) rho = 1.0;
  if (rho < -1.0 && rho > -1.0 - 1e-9) rho = -1.0;
  if (rho > 1.0 || rho < -1.0) throw SingularSigma("correlation outside [-1,1]");
  if (rho >= 1.0 - 1e-12) return normal_cdf(std::min(a, b));
  if (rho <= -1.0 + 1e-12) return std::max(0.0, normal_cdf(a) + normal_cdf(b) - 1.0);
  const double s = std::sqrt((1.0 - rho) * (1.0 + rho));
  const double lim = 8.6;  // phi beyond is < 1e-16
  if (b <= -lim) return 0.0;
  const double hi = std::min(b, lim);
  double acc = 0.0;
  const double step = 0.5;
  for (double lo = -lim; lo < hi; lo += step)
    acc += detail::bvn_panel(lo, std::min(lo + step, hi), a, rho, s);
  return acc;
}

// P(G1 <= z1, G2 <= z2) for (G1,G2) ~ N(0, Sigma), Sigma = [[s11,s12],[s12,s22]].
// Degenerate components (variance ~ 0) reduce to indicator/univariate forms.
inline double bvn_cdf(double z1, double z2, double s11, double s12, double s22) {
  if (s11 < 0.0 || s22 < 0.0) throw SingularSigma("negative variance");
  const double scale = std::max(s11, s22);
  const double tiny = 1e-14 * std::max(scale, 1.0);
  const bool d1 = s11 <= tiny, d2 = s22 <= tiny;
  if (d1 && d2) return (z1 >= 0.0 && z2 >= 0.0) ? 1.0 : 0.0;
  if (d1) return (z1 >= 0.0) ? normal_cdf(z2 / std::sqrt(s22)) : 0.0;
  if (d2) return (z2 >= 0.0) ? normal_cdf(z1 / std::sqrt(s11)) : 0.0;
  const double sd1 = std::sqrt(s11), sd2 = std::sqrt(s22);
  double rho = s12 / (sd1 * sd2);
  return bvn_cdf_standard(z1 / sd1, z2 / sd2, rho);
}

// Gradient and Hessian of z -> Phi2(z; 0, Sigma) in closed form:
//   d/dz1 Phi2 = psi(z1; s11) * Phi((z2 - a2 z1)/sqrt(b2)),  a2 = s12/s11, b2 = s22 - s12^2/s11
//   d2/dz1dz2  = bivariate density psi2(z; Sigma)
//   d2/dz1^2   = -(z1/s11) dPhi2/dz1 - psi(z1; s11) a2 psi((z2-a2 z1); b2)
struct BvnDerivs {
  double p;          // Phi2(z; 0, Sigma)
  double g[2];       // gradient
  double h[2][2];    // Hessian
};

inline BvnDerivs bvn_cdf_grad_hess(double z1, double z2, double s11, double s12, double s22) {
  if (s11 <= 0.0 || s22 <= 0.0) throw DegenerateSigma("bvn_cdf_grad_hess wants positive variances");
  const double det = s11 * s22 - s12 * s12;
  if (det <= 1e-14 * s11 * s22) throw DegenerateSigma("bvn_cdf_grad_hess wants nondegenerate Sigma");
  BvnDerivs r{};
  r.p = bvn_cdf(z1, z2, s11, s12, s22);

  const double a2 = s12 / s11, b2 = s22 - s12 * s12 / s11;
  const double a1 = s12 / s22, b1 = s11 - s12 * s12 / s22;
  const double p1 = normal_pdf(z1, s11);
  const double p2 = normal_pdf(z2, s22);
  const double c1 = normal_cdf((z2 - a2 * z1) / std::sqrt(b2));
  const double c2 = normal_cdf((z1 - a1 * z2) / std::sqrt(b1));
  r.g[0] = p1 * c1;
  r.g[1] = p2 * c2;

  const double q = (z1 * z1 * s22 - 2.0 * z1 * z2 * s12 + z2 * z2 * s11) / det;
  const double dens = std::exp(-0.5 * q) / (kTwoPi * std::sqrt(det));
  r.h[0][1] = r.h[1][0] = dens;
  r.h[0][0] = -(z1 / s11) * r.g[0] - p1 * a2 * normal_pdf(z2 - a2 * z1, b2);
  r.h[1][1] = -(z2 / s22) * r.g[1] - p2 * a1 * normal_pdf(z1 - a1 * z2, b1);
  return r;
}

}  // namespace pncnn
