#pragma once
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "gp.hpp"
#include "linalg.hpp"
#include "special.hpp"
#include "tensor.hpp"

namespace pncnn {

// A = sum_k W_k e^{D_k} + b with D_k = beta_k' grad + 1/2 grad' Sigma_k grad.
// Sigma_k is stored through its Cholesky factor; t stays at 1, the drift and
// diffusion absorb the time scale.
struct DiffusionOp {
  Tensor W;           // K x c_out x c_in
  Tensor beta;        // K x d
  Tensor sigma_chol;  // K x d x d, lower triangles used
  Tensor bias;        // c_out
  double t = 1.0;

  std::size_t k() const { return W.dim(0); }
  std::size_t c_out() const { return W.dim(1); }
  std::size_t c_in() const { return W.dim(2); }
  std::size_t d() const { return beta.dim(1); }

  Tensor sigma(std::size_t kk) const {
    const std::size_t dd = d();
    Tensor s{{dd, dd}};
    for (std::size_t i = 0; i < dd; ++i)
      for (std::size_t j = 0; j < dd; ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r <= std::min(i, j); ++r)
          acc += sigma_chol(kk, i, r) * sigma_chol(kk, j, r);
        s(i, j) = acc;
      }
    return s;
  }
};

struct ConvolvedGpView {
  const RbfGp* source = nullptr;
  const DiffusionOp* op = nullptr;
};

namespace detail {

// density-form helper: N(x; mean, cov), with the determinant guard shared by
// greens_eval
struct GaussDens {
  Tensor prec;     // cov^{-1}
  double lognorm;  // -d/2 log 2pi - 1/2 log det cov

  GaussDens(const Tensor& cov, const char* who) {
    const std::size_t d = cov.dim(0);
    Tensor l;
    double det = 0.0;
    try {
      l = pncnn::cholesky(cov);
      det = std::exp(logdet_from_chol(l));
    } catch (const NotPositiveDefinite&) {
      det = 0.0;
    }
    if (!(det >= 1e-300)) throw SingularSigma(who);
    prec = pncnn::spd_inverse(cov);
    lognorm = -0.5 * static_cast<double>(d) * std::log(kTwoPi) - 0.5 * std::log(det);
  }

  double operator()(const double* x, const double* mean, std::size_t d) const {
    double q = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += prec(i, j) * (x[j] - mean[j]);
      q += (x[i] - mean[i]) * acc;
    }
    return std::exp(lognorm - 0.5 * q);
  }
};

}  // namespace detail

// Green's function of the drift-diffusion flow: N(x; -t beta, t Sigma)
inline double greens_eval(const Tensor& beta, const Tensor& sigma, double t, const Tensor& x) {
  const std::size_t d = beta.numel();
  check_shape(sigma.rank() == 2 && sigma.dim(0) == d && x.numel() == d, "greens_eval shapes");
  Tensor cov = sigma;
  for (std::size_t i = 0; i < cov.numel(); ++i) cov[i] *= t;
  detail::GaussDens dens(cov, "greens_eval: det(t Sigma) below 1e-300");
  std::vector<double> mean(d);
  for (std::size_t i = 0; i < d; ++i) mean[i] = -t * beta[i];
  return dens(x.data(), mean.data(), d);
}

// (e^{tD_k} k_RBF)(x, xi) = a N(x; xi - t beta, l^2 I + t Sigma)
inline double conv_cross_cov(const RbfHyper& hy, const Tensor& beta, const Tensor& sigma,
                             double t, const Tensor& x, const Tensor& xi) {
  const std::size_t d = hy.d;
  Tensor cov = sigma;
  for (std::size_t i = 0; i < cov.numel(); ++i) cov[i] *= t;
  const double l2 = hy.l() * hy.l();
  for (std::size_t i = 0; i < d; ++i) cov(i, i) += l2;
  detail::GaussDens dens(cov, "conv_cross_cov: degenerate covariance");
  std::vector<double> mean(d);
  for (std::size_t i = 0; i < d; ++i) mean[i] = xi[i] - t * beta[i];
  return hy.a() * dens(x.data(), mean.data(), d);
}

inline double conv_cross_cov(const RbfHyper& hy, const DiffusionOp& op, std::size_t k,
                             const Tensor& x, const Tensor& xi) {
  Tensor b{{op.d()}};
  for (std::size_t i = 0; i < op.d(); ++i) b(i) = op.beta(k, i);
  return conv_cross_cov(hy, b, op.sigma(k), op.t, x, xi);
}

// (e^{tD_1} k_RBF e^{tD_2'})(x, x') = a N(x; x' - t(b1-b2), l^2 I + t S1 + t S2)
inline double conv_prior_pair(const RbfHyper& hy, const Tensor& b1, const Tensor& s1,
                              const Tensor& b2, const Tensor& s2, double t, const Tensor& x,
                              const Tensor& xp) {
  const std::size_t d = hy.d;
  Tensor beta{{d}};
  for (std::size_t i = 0; i < d; ++i) beta(i) = b1[i] - b2[i];
  Tensor sigma{{d, d}};
  for (std::size_t i = 0; i < sigma.numel(); ++i) sigma[i] = s1[i] + s2[i];
  return conv_cross_cov(hy, beta, sigma, t, x, xp);
}

inline double conv_prior_pair(const RbfHyper& hy, const DiffusionOp& op, std::size_t k1,
                              std::size_t k2, const Tensor& x, const Tensor& xp) {
  const std::size_t d = op.d();
  Tensor b1{{d}}, b2{{d}};
  for (std::size_t i = 0; i < d; ++i) {
    b1(i) = op.beta(k1, i);
    b2(i) = op.beta(k2, i);
  }
  return conv_prior_pair(hy, b1, op.sigma(k1), b2, op.sigma(k2), op.t, x, xp);
}

namespace detail {

// u_k over all (query, observation) pairs, M x N
inline Tensor cross_cov_matrix(const RbfHyper& hy, const DiffusionOp& op, std::size_t k,
                               const Tensor& q, const Tensor& x) {
  const std::size_t m = q.dim(0), n = x.dim(0), d = hy.d;
  Tensor cov = op.sigma(k);
  for (std::size_t i = 0; i < cov.numel(); ++i) cov[i] *= op.t;
  const double l2 = hy.l() * hy.l();
  for (std::size_t i = 0; i < d; ++i) cov(i, i) += l2;
  GaussDens dens(cov, "conv_cross_cov: degenerate covariance");
  Tensor out{{m, n}};
  std::vector<double> mean(d);
  const double a = hy.a();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t r = 0; r < d; ++r) mean[r] = x(j, r) - op.t * op.beta(k, r);
      out(i, j) = a * dens(q.data() + i * d, mean.data(), d);
    }
  return out;
}

// pair term over all query pairs, M x M
inline Tensor pair_matrix(const RbfHyper& hy, const DiffusionOp& op, std::size_t k1,
                          std::size_t k2, const Tensor& q) {
  const std::size_t m = q.dim(0), d = hy.d;
  Tensor cov = op.sigma(k1);
  const Tensor s2 = op.sigma(k2);
  for (std::size_t i = 0; i < cov.numel(); ++i) cov[i] = op.t * (cov[i] + s2[i]);
  const double l2 = hy.l() * hy.l();
  for (std::size_t i = 0; i < d; ++i) cov(i, i) += l2;
  GaussDens dens(cov, "conv_prior_pair: degenerate covariance");
  Tensor out{{m, m}};
  std::vector<double> mean(d);
  const double a = hy.a();
  for (std::size_t j = 0; j < m; ++j) {
    for (std::size_t r = 0; r < d; ++r)
      mean[r] = q(j, r) - op.t * (op.beta(k1, r) - op.beta(k2, r));
    for (std::size_t i = 0; i < m; ++i) out(i, j) = a * dens(q.data() + i * d, mean.data(), d);
  }
  return out;
}

// prior pair value at coincident points; independent of the point by stationarity
inline Tensor prior_pair_table(const RbfHyper& hy, const DiffusionOp& op) {
  const std::size_t kk = op.k();
  Tensor z{{hy.d}};
  Tensor pp{{kk, kk}};
  for (std::size_t k1 = 0; k1 < kk; ++k1)
    for (std::size_t k2 = k1; k2 < kk; ++k2) {
      pp(k1, k2) = conv_prior_pair(hy, op, k1, k2, z, z);
      pp(k2, k1) = pp(k1, k2);
    }
  return pp;
}

}  // namespace detail

// (A mu_p)(x) per output channel, M x c_out
inline Tensor conv_mean(const ConvolvedGpView& view, const Tensor& q) {
  const RbfGp& gp = *view.source;
  const DiffusionOp& op = *view.op;
  const std::size_t m = q.dim(0), co = op.c_out();
  check_shape(op.c_in() == gp.c() || gp.n() == 0, "conv_mean channel mismatch");
  Tensor out{{m, co}};
  if (gp.n() > 0) {
    for (std::size_t k = 0; k < op.k(); ++k) {
      const Tensor u = detail::cross_cov_matrix(gp.hyper, op, k, q, gp.X);
      const Tensor t = matmul(u, gp.alpha);  // M x c_in
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t a = 0; a < co; ++a) {
          double acc = 0.0;
          for (std::size_t b = 0; b < op.c_in(); ++b) acc += op.W(k, a, b) * t(i, b);
          out(i, a) += acc;
        }
    }
  }
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t a = 0; a < co; ++a) out(i, a) += op.bias(a);
  return out;
}

// diag of (A k_p A') per output channel, M x c_out
inline Tensor conv_var_diag(const ConvolvedGpView& view, const Tensor& q) {
  const RbfGp& gp = *view.source;
  const DiffusionOp& op = *view.op;
  const std::size_t m = q.dim(0), co = op.c_out(), ci = op.c_in(), kk = op.k();
  const std::size_t n = gp.n();
  const Tensor pp = detail::prior_pair_table(gp.hyper, op);

  // N_{kk'}(x) per group; prior-only branch keeps the pp table alone
  const std::size_t groups = n == 0 ? 1 : gp.chol.size();
  std::vector<Tensor> nkk(groups, Tensor{{kk, kk, m}});
  if (n > 0) {
    std::vector<Tensor> u(kk);
    for (std::size_t k = 0; k < kk; ++k)
      u[k] = detail::cross_cov_matrix(gp.hyper, op, k, q, gp.X);
    for (std::size_t g = 0; g < groups; ++g) {
      // half solves: N_{kk'} diag needs only L^{-1} U_k' per k
      std::vector<Tensor> half(kk);
      for (std::size_t k = 0; k < kk; ++k)
        half[k] = trisolve(gp.chol[g], transpose(u[k]), true, false);
      for (std::size_t k1 = 0; k1 < kk; ++k1)
        for (std::size_t k2 = k1; k2 < kk; ++k2) {
          for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            for (std::size_t r = 0; r < n; ++r) acc += half[k1](r, i) * half[k2](r, i);
            nkk[g](k1, k2, i) = acc;
            nkk[g](k2, k1, i) = acc;
          }
        }
    }
  } else {
    for (auto& t : nkk) t.fill(0.0);
  }

  Tensor out{{m, co}};
  for (std::size_t a = 0; a < co; ++a)
    for (std::size_t b = 0; b < ci; ++b) {
      const Tensor& nb = nkk[n == 0 ? 0 : gp.group_of[b]];
      for (std::size_t k1 = 0; k1 < kk; ++k1)
        for (std::size_t k2 = 0; k2 < kk; ++k2) {
          const double w = op.W(k1, a, b) * op.W(k2, a, b);
          if (w == 0.0) continue;
          for (std::size_t i = 0; i < m; ++i)
            out(i, a) += w * (pp(k1, k2) - nb(k1, k2, i));
        }
    }
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = std::max(out[i], 0.0);
  return out;
}

// implicit action of the full M*c_out output covariance, for the stochastic
// diagonal path; the dense matrix never materializes
inline std::function<Tensor(const Tensor&)> conv_cov_matvec(const ConvolvedGpView& view,
                                                            const Tensor& q) {
  const RbfGp& gp = *view.source;
  const DiffusionOp& op = *view.op;
  const std::size_t m = q.dim(0), co = op.c_out(), ci = op.c_in(), kk = op.k();
  const std::size_t n = gp.n();
  check_shape(ci == gp.c() || n == 0, "conv_cov_matvec channel mismatch");

  struct Pre {
    std::vector<Tensor> w;                  // K slices, co x ci
    std::vector<Tensor> g;                  // upper wedge of pair matrices, M x M
    std::vector<Tensor> u;                  // K cross matrices, M x N
    std::vector<std::vector<Tensor>> sol;   // per group, per k: (K+S)^-1 U_k', N x M
    std::vector<std::size_t> group_of;
  };
  auto pre = std::make_shared<Pre>();
  pre->w.resize(kk, Tensor{{co, ci}});
  for (std::size_t k = 0; k < kk; ++k)
    for (std::size_t a = 0; a < co; ++a)
      for (std::size_t b = 0; b < ci; ++b) pre->w[k](a, b) = op.W(k, a, b);
  pre->g.resize(kk * kk);
  for (std::size_t k1 = 0; k1 < kk; ++k1)
    for (std::size_t k2 = k1; k2 < kk; ++k2)
      pre->g[k1 * kk + k2] = detail::pair_matrix(gp.hyper, op, k1, k2, q);
  if (n > 0) {
    pre->group_of = gp.group_of;
    pre->u.resize(kk);
    for (std::size_t k = 0; k < kk; ++k)
      pre->u[k] = detail::cross_cov_matrix(gp.hyper, op, k, q, gp.X);
    pre->sol.resize(gp.chol.size());
    for (std::size_t g = 0; g < gp.chol.size(); ++g) {
      pre->sol[g].resize(kk);
      for (std::size_t k = 0; k < kk; ++k)
        pre->sol[g][k] = solve_chol(gp.chol[g], transpose(pre->u[k]));
    }
  }

  return [pre, m, co, ci, kk, n](const Tensor& zflat) {
    check_shape(zflat.numel() == m * co, "conv_cov_matvec wants an M*c_out vector");
    const Tensor z = zflat.reshaped({m, co});
    std::vector<Tensor> t(kk);
    for (std::size_t k = 0; k < kk; ++k) t[k] = matmul(z, pre->w[k]);  // M x ci

    Tensor wsum{{n, ci}};
    if (n > 0)
      for (std::size_t k2 = 0; k2 < kk; ++k2)
        for (std::size_t b = 0; b < ci; ++b) {
          const Tensor& s = pre->sol[pre->group_of[b]][k2];
          for (std::size_t r = 0; r < n; ++r) {
            double v = 0.0;
            for (std::size_t j = 0; j < m; ++j) v += s(r, j) * t[k2](j, b);
            wsum(r, b) += v;
          }
        }

    Tensor acc{{m, ci}};
    Tensor out{{m, co}};
    for (std::size_t k1 = 0; k1 < kk; ++k1) {
      acc.fill(0.0);
      for (std::size_t k2 = 0; k2 < kk; ++k2) {
        const Tensor& gm = pre->g[k1 <= k2 ? k1 * kk + k2 : k2 * kk + k1];
        // pair matrices satisfy G_{k1 k2} = G_{k2 k1}'
        const Tensor part = k1 <= k2 ? matmul(gm, t[k2]) : matmul(gm, t[k2], true, false);
        for (std::size_t i = 0; i < part.numel(); ++i) acc[i] += part[i];
      }
      if (n > 0) {
        const Tensor dat = matmul(pre->u[k1], wsum);
        for (std::size_t i = 0; i < dat.numel(); ++i) acc[i] -= dat[i];
      }
      const Tensor contrib = matmul(acc, pre->w[k1], false, true);
      for (std::size_t i = 0; i < contrib.numel(); ++i) out[i] += contrib[i];
    }
    return out.reshaped({m * co});
  };
}

// max deviation of the grid-drift operator from a zero-padded discrete
// convolution out(p) = sum_k W_k y(p + beta_k)
struct DiscreteLimitReport {
  double max_abs = 0.0;
  double max_discrete = 0.0;
  double rel() const { return max_discrete > 0.0 ? max_abs / max_discrete : 0.0; }
};

inline DiscreteLimitReport discrete_limit_check(const DiffusionOp& op, const RbfHyper& hy,
                                                const Tensor& image) {
  const std::size_t h = image.dim(0), w = image.dim(1);
  check_shape(op.c_in() == 1 && op.c_out() == 1 && op.d() == 2, "discrete_limit_check wants a scalar 2-d op");
  ObservedField obs;
  obs.X = Tensor{{h * w, 2}};
  obs.Y = Tensor{{h * w, 1}};
  obs.V = Tensor{{h * w, 1}};
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      obs.X(r * w + c, 0) = static_cast<double>(r);
      obs.X(r * w + c, 1) = static_cast<double>(c);
      obs.Y(r * w + c, 0) = image(r, c);
    }
  const RbfGp gp = fit(hy, obs);
  const ConvolvedGpView view{&gp, &op};
  const Tensor mean = conv_mean(view, obs.X);

  DiscreteLimitReport rep;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c) {
      double want = op.bias(0);
      for (std::size_t k = 0; k < op.k(); ++k) {
        const long rr = static_cast<long>(r) + std::lround(op.beta(k, 0));
        const long cc = static_cast<long>(c) + std::lround(op.beta(k, 1));
        if (rr < 0 || cc < 0 || rr >= static_cast<long>(h) || cc >= static_cast<long>(w)) continue;
        want += op.W(k, 0, 0) * image(static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
      }
      rep.max_abs = std::max(rep.max_abs, std::fabs(mean(r * w + c, 0) - want));
      rep.max_discrete = std::max(rep.max_discrete, std::fabs(want));
    }
  return rep;
}

// ---- tape version, used by the training path ----

struct ConvGraph {
  ad::Var mean;  // M x c_out
  ad::Var var;   // M x c_out, unset unless requested
};

namespace detail {

// per-term tape pieces shared by the conv graphs
struct ConvTapeParts {
  ad::Var l2, ident;
  std::vector<ad::Var> covs, precs, scales, u;
};

inline ConvTapeParts conv_tape_parts(ad::Tape& tp, ad::Var log_a, ad::Var log_l, std::size_t d,
                                     const std::shared_ptr<const Tensor>& offsets, ad::Var beta,
                                     ad::Var sigma_chol, double t, std::size_t kk) {
  // lower-triangle mask keeps the factor parametrization unconstrained
  Tensor ltri{{d, d}};
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j) ltri(i, j) = 1.0;
  const ad::Var lmask = tp.constant(std::move(ltri));

  ConvTapeParts p;
  p.ident = tp.constant(eye(d));
  p.l2 = tp.vexp(tp.scale(log_l, 2.0));
  const double logtwopi = std::log(kTwoPi);
  p.covs.resize(kk);
  p.precs.resize(kk);
  p.scales.resize(kk);
  p.u.resize(kk);
  for (std::size_t k = 0; k < kk; ++k) {
    const ad::Var lk =
        tp.mul(tp.reshape(tp.row(tp.reshape(sigma_chol, {kk, d * d}), k), {d, d}), lmask);
    const ad::Var sig = tp.matmul(lk, lk, false, true);
    // cov = l^2 I + t Sigma
    p.covs[k] = tp.add(tp.mul(p.ident, p.l2), tp.scale(sig, t));
    p.precs[k] = tp.spd_inverse(p.covs[k]);
    const ad::Var ld = tp.scale(tp.sum(tp.vlog(tp.diag_part(tp.cholesky(p.covs[k])))), 2.0);
    // a (2pi)^{-d/2} det^{-1/2}
    p.scales[k] = tp.vexp(tp.sub(tp.shift(log_a, -0.5 * d * logtwopi), tp.scale(ld, 0.5)));
    p.u[k] = tp.gaussian_matrix(offsets, tp.scale(tp.row(beta, k), t), p.precs[k], p.scales[k]);
  }
  return p;
}

// a N(offset; -t(b_k1 - b_k2), cov_k1 + cov_k2 - l^2 I) over an offset table
inline ad::Var pair_gaussian_graph(ad::Tape& tp, const ConvTapeParts& p, ad::Var log_a,
                                   std::size_t d, ad::Var beta, double t,
                                   const std::shared_ptr<const Tensor>& off, std::size_t k1,
                                   std::size_t k2) {
  const double logtwopi = std::log(kTwoPi);
  const ad::Var cov12 = tp.sub(tp.add(p.covs[k1], p.covs[k2]), tp.mul(p.ident, p.l2));
  const ad::Var prec12 = tp.spd_inverse(cov12);
  const ad::Var ld12 = tp.scale(tp.sum(tp.vlog(tp.diag_part(tp.cholesky(cov12)))), 2.0);
  const ad::Var s12 = tp.vexp(tp.sub(tp.shift(log_a, -0.5 * d * logtwopi), tp.scale(ld12, 0.5)));
  const ad::Var b12 = tp.scale(tp.sub(tp.row(beta, k1), tp.row(beta, k2)), t);
  return tp.gaussian_matrix(off, b12, prec12, s12);
}

}  // namespace detail

// Builds conv mean (and optionally the variance diagonal) on the tape.
// offsets holds x_m - x_i for the query/observation pairing; gp supplies
// alpha, the factor inverses and the shared-mode noise deltas.
inline ConvGraph conv_graph(ad::Tape& tp, const GpGraph& gp, ad::Var log_a, ad::Var log_l,
                            std::size_t d, const std::shared_ptr<const Tensor>& offsets,
                            ad::Var w, ad::Var beta, ad::Var sigma_chol, ad::Var bias,
                            double t, bool want_var) {
  const std::size_t kk = tp.val(w).dim(0), ci = tp.val(w).dim(2);
  const std::size_t m = offsets->dim(0);
  check_shape(tp.val(beta).dim(0) == kk && tp.val(beta).dim(1) == d, "conv_graph beta shape");
  check_shape(tp.val(gp.alpha).dim(1) == ci, "conv_graph channel mismatch");

  const detail::ConvTapeParts parts =
      detail::conv_tape_parts(tp, log_a, log_l, d, offsets, beta, sigma_chol, t, kk);
  const std::vector<ad::Var>& u = parts.u;

  ConvGraph out;
  ad::Var acc{-1};
  for (std::size_t k = 0; k < kk; ++k) {
    const ad::Var tk = tp.matmul(u[k], gp.alpha);  // M x ci
    const ad::Var wk = tp.reshape(tp.row(tp.reshape(w, {kk, tp.val(w).dim(1) * ci}), k),
                                  {tp.val(w).dim(1), ci});
    const ad::Var mk = tp.matmul(tk, wk, false, true);  // M x co
    acc = k == 0 ? mk : tp.add(acc, mk);
  }
  out.mean = tp.add_rowvec(acc, bias);

  if (!want_var) return out;

  // prior pair table pp(k1,k2) = a N(0; -t(b1-b2), l^2 I + t S1 + t S2),
  // assembled from the same gaussian machinery with a 1x1 zero offset;
  // symmetric, so only the upper wedge is materialized
  auto zoff = std::make_shared<const Tensor>(Tensor{{1, 1, d}});
  std::vector<ad::Var> ppent(kk * kk, ad::Var{-1});
  for (std::size_t k1 = 0; k1 < kk; ++k1)
    for (std::size_t k2 = k1; k2 < kk; ++k2) {
      const ad::Var e = tp.reshape(
          detail::pair_gaussian_graph(tp, parts, log_a, d, beta, t, zoff, k1, k2), {1});
      ppent[k1 * kk + k2] = e;
      ppent[k2 * kk + k1] = e;
    }
  ad::Var pp = tp.reshape(tp.stack_slabs(ppent), {kk, kk});

  const std::size_t groups = gp.chol.size();
  // per group half solves V_k = U_k L^{-T}; n_{kk'}(m) = rowdot(V_k, V_k')
  std::vector<std::vector<ad::Var>> vt(groups, std::vector<ad::Var>(kk));
  for (std::size_t g = 0; g < groups; ++g)
    for (std::size_t k = 0; k < kk; ++k)
      vt[g][k] = tp.tri_right_solve(gp.chol[g], u[k], true);
  // the shared-mode per-channel correction needs the full P_k = U_k Ainv
  std::vector<ad::Var> pfull;
  if (gp.shared && ci > 1) {
    pfull.resize(kk);
    for (std::size_t k = 0; k < kk; ++k)
      pfull[k] = tp.tri_right_solve(gp.chol[0], vt[0][k], false);
  }

  // base pair rows per group, shared across the channels that reuse them
  std::vector<std::vector<ad::Var>> rows_of(groups);
  auto base_rows = [&](std::size_t g) -> const std::vector<ad::Var>& {
    std::vector<ad::Var>& rows = rows_of[g];
    if (rows.empty()) {
      rows.assign(kk * kk, ad::Var{-1});
      for (std::size_t k1 = 0; k1 < kk; ++k1)
        for (std::size_t k2 = k1; k2 < kk; ++k2) {
          const ad::Var nk = tp.rowdot(vt[g][k1], vt[g][k2]);
          rows[k1 * kk + k2] = nk;
          rows[k2 * kk + k1] = nk;
        }
    }
    return rows;
  };

  std::vector<ad::Var> gparts(ci);
  std::vector<ad::Var> base_n(groups, ad::Var{-1});
  for (std::size_t b = 0; b < ci; ++b) {
    const std::size_t g = gp.group_of[b];
    if (!(gp.shared && b > 0)) {
      ad::Var& cached = base_n[g];
      if (!cached.ok())
        cached = tp.sub_broadcast_last(
            pp, tp.reshape(tp.stack_slabs(base_rows(g)), {kk, kk, m}));
      gparts[b] = cached;
      continue;
    }
    const std::vector<ad::Var>& base = base_rows(0);
    std::vector<ad::Var> rows(kk * kk, ad::Var{-1});
    for (std::size_t k1 = 0; k1 < kk; ++k1)
      for (std::size_t k2 = k1; k2 < kk; ++k2) {
        const ad::Var corr =
            tp.rowdot(tp.scale_cols(pfull[k1], gp.vdelta[b]), pfull[k2]);
        const ad::Var nk = tp.sub(base[k1 * kk + k2], corr);
        rows[k1 * kk + k2] = nk;
        rows[k2 * kk + k1] = nk;
      }
    gparts[b] = tp.sub_broadcast_last(pp, tp.reshape(tp.stack_slabs(rows), {kk, kk, m}));
  }
  out.var = tp.vmax_scalar(tp.var_quadform(w, gparts), tp.constant(0.0));
  return out;
}

// Stochastic diagonal of the conv output covariance on the tape. The probes
// are fixed standard normal draws, so the estimate is a deterministic
// differentiable function of the parameters and unbiased over the probe
// distribution. Used when the observation grids differ per channel and the
// exact diagonal would need one dense pass per channel.
inline ad::Var conv_var_stoch_graph(ad::Tape& tp, const GpGraph& gp, ad::Var log_a,
                                    ad::Var log_l, std::size_t d,
                                    const std::shared_ptr<const Tensor>& offsets_qx,
                                    const std::shared_ptr<const Tensor>& offsets_qq,
                                    ad::Var w, ad::Var beta, ad::Var sigma_chol, double t,
                                    const std::vector<Tensor>& probes) {
  const std::size_t kk = tp.val(w).dim(0), co = tp.val(w).dim(1), ci = tp.val(w).dim(2);
  const std::size_t m = offsets_qq->dim(0), n = offsets_qx->dim(1);
  check_shape(!probes.empty(), "conv_var_stoch_graph wants probes");
  check_shape(offsets_qx->dim(0) == m, "conv_var_stoch_graph offset tables disagree");
  check_shape(tp.val(gp.alpha).dim(1) == ci, "conv_var_stoch_graph channel mismatch");
  for (const Tensor& z : probes)
    check_shape(z.rank() == 2 && z.dim(0) == m && z.dim(1) == co,
                "conv_var_stoch_graph probe shape");

  const detail::ConvTapeParts parts =
      detail::conv_tape_parts(tp, log_a, log_l, d, offsets_qx, beta, sigma_chol, t, kk);
  // pair matrices over query pairs, upper wedge only; G_{k1 k2} = G_{k2 k1}'
  std::vector<ad::Var> g(kk * kk, ad::Var{-1});
  for (std::size_t k1 = 0; k1 < kk; ++k1)
    for (std::size_t k2 = k1; k2 < kk; ++k2)
      g[k1 * kk + k2] =
          detail::pair_gaussian_graph(tp, parts, log_a, d, beta, t, offsets_qq, k1, k2);

  std::vector<ad::Var> wk(kk);
  for (std::size_t k = 0; k < kk; ++k)
    wk[k] = tp.reshape(tp.row(tp.reshape(w, {kk, co * ci}), k), {co, ci});

  ad::Var est{-1};
  for (std::size_t p = 0; p < probes.size(); ++p) {
    const ad::Var z = tp.constant(probes[p]);
    std::vector<ad::Var> tk(kk);
    for (std::size_t k = 0; k < kk; ++k) tk[k] = tp.matmul(z, wk[k]);  // M x ci

    // data-term solves, shared across the outer term index
    ad::Var rsum{-1};
    for (std::size_t k = 0; k < kk; ++k) {
      const ad::Var rk = tp.matmul(parts.u[k], tk[k], true, false);  // N x ci
      rsum = k == 0 ? rk : tp.add(rsum, rk);
    }
    std::vector<ad::Var> scols(ci);
    for (std::size_t b = 0; b < ci; ++b) {
      const ad::Var rb = tp.reshape(tp.col(rsum, b), {n, 1});
      ad::Var sb = tp.matmul(gp.ainv[gp.group_of[b]], rb);
      if (gp.shared && b > 0)
        sb = tp.sub(sb, tp.matmul(gp.ainv[0],
                                  tp.reshape(tp.mul(gp.vdelta[b], tp.reshape(sb, {n})), {n, 1})));
      scols[b] = tp.reshape(sb, {n});
    }
    const ad::Var s = ci == 1 ? tp.reshape(scols[0], {n, 1}) : tp.hstack_cols(scols);

    ad::Var outp{-1};
    for (std::size_t k1 = 0; k1 < kk; ++k1) {
      ad::Var acc{-1};
      for (std::size_t k2 = 0; k2 < kk; ++k2) {
        const ad::Var& gm = g[k1 <= k2 ? k1 * kk + k2 : k2 * kk + k1];
        const ad::Var part = tp.matmul(gm, tk[k2], k1 > k2, false);
        acc = k2 == 0 ? part : tp.add(acc, part);
      }
      acc = tp.sub(acc, tp.matmul(parts.u[k1], s));
      const ad::Var ck = tp.matmul(acc, wk[k1], false, true);  // M x co
      outp = k1 == 0 ? ck : tp.add(outp, ck);
    }
    const ad::Var term = tp.mul(z, outp);
    est = p == 0 ? term : tp.add(est, term);
  }
  est = tp.scale(est, 1.0 / static_cast<double>(probes.size()));
  return tp.vmax_scalar(est, tp.constant(0.0));
}

}  // namespace pncnn
