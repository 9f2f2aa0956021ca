#pragma once
#include <cmath>
#include <cstddef>
#include <memory>
#include <utility>
#include <vector>

#include "autodiff.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "special.hpp"
#include "tensor.hpp"

namespace pncnn {

// Kernel k(x,x') = a * N(x; x', l^2 I); a and l live in log space for training.
struct RbfHyper {
  double log_a = 0.0;
  double log_l = 0.0;
  std::size_t d = 1;

  double a() const { return std::exp(log_a); }
  double l() const { return std::exp(log_l); }
  // k(x,x) = a (2 pi l^2)^{-d/2}
  double prior_var() const {
    return a() * std::pow(kTwoPi * l() * l(), -0.5 * static_cast<double>(d));
  }
  static RbfHyper from_al(double a, double l, std::size_t d) {
    return RbfHyper{std::log(a), std::log(l), d};
  }
};

struct ObservedField {
  Tensor X;  // N x d locations
  Tensor Y;  // N x C values
  Tensor V;  // N x C noise variances

  std::size_t n() const { return X.rank() == 2 ? X.dim(0) : 0; }
  std::size_t d() const { return X.rank() == 2 ? X.dim(1) : 0; }
  std::size_t c() const { return Y.rank() == 2 ? Y.dim(1) : 0; }
};

inline double kernel_eval(const RbfHyper& hy, const double* x, const double* xp) {
  double q = 0.0;
  for (std::size_t i = 0; i < hy.d; ++i) {
    const double t = x[i] - xp[i];
    q += t * t;
  }
  const double l2 = hy.l() * hy.l();
  return hy.a() * std::pow(kTwoPi * l2, -0.5 * static_cast<double>(hy.d)) *
         std::exp(-q / (2.0 * l2));
}

inline double kernel_eval(const RbfHyper& hy, const Tensor& x, const Tensor& xp) {
  check_shape(x.numel() == hy.d && xp.numel() == hy.d, "kernel_eval wants d-vectors");
  return kernel_eval(hy, x.data(), xp.data());
}

// squared distances between row sets, M x N
inline Tensor pairwise_sqdist(const Tensor& a, const Tensor& b) {
  check_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
              "pairwise_sqdist wants matching point sets");
  const std::size_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
  Tensor out{{m, n}};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double q = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double t = a(i, k) - b(j, k);
        q += t * t;
      }
      out(i, j) = q;
    }
  return out;
}

// offsets a_i - b_j, M x N x d
inline Tensor pairwise_offset(const Tensor& a, const Tensor& b) {
  check_shape(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(1),
              "pairwise_offset wants matching point sets");
  const std::size_t m = a.dim(0), n = b.dim(0), d = a.dim(1);
  Tensor out{{m, n, d}};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < d; ++k) out(i, j, k) = a(i, k) - b(j, k);
  return out;
}

inline Tensor kernel_matrix(const RbfHyper& hy, const Tensor& a, const Tensor& b) {
  Tensor k = pairwise_sqdist(a, b);
  const double l2 = hy.l() * hy.l();
  const double s = hy.a() * std::pow(kTwoPi * l2, -0.5 * static_cast<double>(hy.d));
  for (std::size_t i = 0; i < k.numel(); ++i) k[i] = s * std::exp(-k[i] / (2.0 * l2));
  return k;
}

constexpr double kVarFloorFactor = 1e-6;      // noise floor, relative to a
constexpr double kSharedGridTol = 1e-12;      // V columns equal within this -> one factor

struct RbfGp {
  RbfHyper hyper;
  Tensor X;                            // N x d
  bool shared = true;
  std::vector<Tensor> chol;            // factor(s) of K + diag(v), one per group
  std::vector<std::size_t> group_of;   // channel -> index into chol
  Tensor alpha;                        // N x C solves
  std::vector<double> jitter;          // applied per group

  std::size_t n() const { return X.rank() == 2 ? X.dim(0) : 0; }
  std::size_t c() const { return group_of.size(); }
};

namespace detail {

// clamp and decide the shared-grid dispatch in one pass
inline bool floor_variances(Tensor& v, double a) {
  const double lo = kVarFloorFactor * a;
  const std::size_t n = v.dim(0), c = v.dim(1);
  bool shared = true;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      double& x = v(i, j);
      x = std::max(x, lo);
      if (std::abs(x - v(i, 0)) > kSharedGridTol) shared = false;
    }
  return shared;
}

}  // namespace detail

inline RbfGp fit(const RbfHyper& hy, const ObservedField& obs) {
  RbfGp gp;
  gp.hyper = hy;
  gp.X = obs.X;
  const std::size_t n = obs.n(), c = obs.c();
  gp.group_of.assign(c, 0);
  if (n == 0) {
    gp.alpha = Tensor{{0, c}};
    return gp;
  }
  check_shape(obs.Y.rank() == 2 && obs.Y.dim(0) == n && obs.V.same_shape(obs.Y),
              "fit wants Y, V of shape N x C");
  Tensor v = obs.V;
  gp.shared = detail::floor_variances(v, hy.a());
  const Tensor k = kernel_matrix(hy, obs.X, obs.X);
  const std::size_t groups = gp.shared ? 1 : c;
  gp.chol.resize(groups);
  gp.jitter.resize(groups);
  for (std::size_t g = 0; g < groups; ++g) {
    Tensor a = k;
    for (std::size_t i = 0; i < n; ++i) a(i, i) += v(i, g);
    gp.chol[g] = cholesky_jittered(a, &gp.jitter[g]);
  }
  if (!gp.shared)
    for (std::size_t j = 0; j < c; ++j) gp.group_of[j] = j;
  gp.alpha = Tensor{{n, c}};
  for (std::size_t j = 0; j < c; ++j) {
    Tensor y{{n, 1}};
    for (std::size_t i = 0; i < n; ++i) y(i, 0) = obs.Y(i, j);
    Tensor a = solve_chol(gp.chol[gp.group_of[j]], y);
    for (std::size_t i = 0; i < n; ++i) gp.alpha(i, j) = a(i, 0);
  }
  return gp;
}

inline Tensor posterior_mean(const RbfGp& gp, const Tensor& q) {
  const std::size_t m = q.dim(0), c = gp.c();
  if (gp.n() == 0) return Tensor{{m, c}};
  return matmul(kernel_matrix(gp.hyper, q, gp.X), gp.alpha);
}

// covariance between query sets for one channel
inline Tensor posterior_cov(const RbfGp& gp, const Tensor& q1, const Tensor& q2,
                            std::size_t channel = 0) {
  Tensor k12 = kernel_matrix(gp.hyper, q1, q2);
  if (gp.n() == 0) return k12;
  const Tensor k1x = kernel_matrix(gp.hyper, q1, gp.X);
  const Tensor kx2 = kernel_matrix(gp.hyper, gp.X, q2);
  const Tensor w = solve_chol(gp.chol[gp.group_of.at(channel)], kx2);
  const Tensor cross = matmul(k1x, w);
  return sub(k12, cross);
}

// per-point posterior variance for every channel, M x C
inline Tensor posterior_var_diag(const RbfGp& gp, const Tensor& q) {
  const std::size_t m = q.dim(0), c = gp.c();
  const double pv = gp.hyper.prior_var();
  Tensor out{{m, c}};
  if (gp.n() == 0) {
    out.fill(pv);
    return out;
  }
  const Tensor kqx = kernel_matrix(gp.hyper, q, gp.X);
  const std::size_t n = gp.n();
  for (std::size_t g = 0; g < gp.chol.size(); ++g) {
    const Tensor w = solve_chol(gp.chol[g], transpose(kqx));  // N x M
    for (std::size_t i = 0; i < m; ++i) {
      double s = pv;
      for (std::size_t r = 0; r < n; ++r) s -= kqx(i, r) * w(r, i);
      for (std::size_t j = 0; j < c; ++j)
        if (gp.group_of[j] == g) out(i, j) = s;
    }
  }
  return out;
}

// 1/2 sum_c [y' (K+S)^{-1} y + log det(K+S) + N log 2pi]
inline double nll(const RbfHyper& hy, const ObservedField& obs) {
  const RbfGp gp = fit(hy, obs);
  const std::size_t n = obs.n(), c = obs.c();
  double acc = 0.0;
  for (std::size_t j = 0; j < c; ++j) {
    double q = 0.0;
    for (std::size_t i = 0; i < n; ++i) q += obs.Y(i, j) * gp.alpha(i, j);
    acc += q + logdet_from_chol(gp.chol[gp.group_of[j]]) +
           static_cast<double>(n) * std::log(kTwoPi);
  }
  return 0.5 * acc;
}

// ---- tape versions, used by the training path ----

// Fitted GP on the tape. In shared mode there is one factor, built from noise
// column 0; the other channels' noise enters through zero-valued deltas
// (first-order exact, so values match the shared factor while gradients route
// to the right channel). Consumers of ainv must subtract the delta correction
// u' Ainv diag(vdelta[c]) Ainv u for channels c > 0; alpha and nll already
// carry it.
struct GpGraph {
  bool shared = true;
  ad::Var alpha;                      // N x C
  std::vector<ad::Var> chol;          // lower factor of K + diag v, one per group
  std::vector<ad::Var> ainv;          // (K + diag v)^{-1}; empty unless requested or shared
  std::vector<std::size_t> group_of;  // channel -> index into chol
  std::vector<ad::Var> vdelta;        // shared mode: v_c - v_0 per channel, [0] unused
  ad::Var nll;                        // scalar
};

// scale s with k(x,x') = s * exp(-|x-x'|^2 / (2 l^2))
inline ad::Var kernel_scale_graph(ad::Tape& tp, ad::Var log_a, ad::Var log_l, std::size_t d) {
  const double dd = static_cast<double>(d);
  return tp.vexp(tp.shift(tp.add(log_a, tp.scale(log_l, -dd)), -0.5 * dd * std::log(kTwoPi)));
}

inline GpGraph fit_graph(ad::Tape& tp, ad::Var log_a, ad::Var log_l, std::size_t d,
                         const std::shared_ptr<const Tensor>& xsqd, ad::Var y, ad::Var v,
                         bool want_ainv = true) {
  const std::size_t n = tp.val(y).dim(0), c = tp.val(y).dim(1);
  check_shape(n >= 1 && xsqd->rank() == 2 && xsqd->dim(0) == n && xsqd->dim(1) == n,
              "fit_graph wants N x N squared distances");
  GpGraph out;
  const ad::Var c1 = tp.vexp(tp.scale(log_l, -2.0));  // 1 / l^2
  const ad::Var kmat = tp.mul(tp.exp_quad(xsqd, c1), kernel_scale_graph(tp, log_a, log_l, d));
  const ad::Var floor = tp.scale(tp.vexp(log_a), kVarFloorFactor);
  const ad::Var vf = tp.vmax_scalar(v, floor);

  const Tensor& vv = tp.val(vf);
  out.shared = true;
  for (std::size_t i = 0; i < n && out.shared; ++i)
    for (std::size_t j = 1; j < c; ++j)
      if (std::abs(vv(i, j) - vv(i, 0)) > kSharedGridTol) {
        out.shared = false;
        break;
      }

  out.group_of.assign(c, 0);
  const std::size_t groups = out.shared ? 1 : c;
  std::vector<ad::Var> logdets;
  for (std::size_t g = 0; g < groups; ++g) {
    if (!out.shared) out.group_of[g] = g;
    ad::Var a = tp.add_diag(kmat, tp.col(vf, g));
    double jit = 0.0;
    cholesky_jittered(tp.val(a), &jit);
    if (jit > 0.0) {
      Tensor j{{n}};
      j.fill(jit);
      a = tp.add_diag(a, tp.constant(std::move(j)));
    }
    const ad::Var lfac = tp.cholesky(a);
    out.chol.push_back(lfac);
    // the shared-mode delta corrections need the explicit inverse
    if (out.shared || want_ainv) out.ainv.push_back(tp.spd_inverse(a));
    logdets.push_back(tp.scale(tp.sum(tp.vlog(tp.diag_part(lfac))), 2.0));
  }

  ad::Var ld{-1}, quad{-1};
  if (out.shared) {
    // one factor; other channels differ from column 0 only through the
    // zero-valued deltas below
    const ad::Var at = tp.matmul(out.ainv[0], y);
    const ad::Var adiag = tp.diag_part(out.ainv[0]);
    out.vdelta.resize(c, ad::Var{-1});
    std::vector<ad::Var> cols{tp.col(at, 0)};
    ld = tp.scale(logdets[0], static_cast<double>(c));
    const ad::Var v0 = tp.col(vf, 0);
    for (std::size_t j = 1; j < c; ++j) {
      const ad::Var dj = tp.sub(tp.col(vf, j), v0);
      out.vdelta[j] = dj;
      const ad::Var aj = tp.col(at, j);
      const ad::Var corr = tp.reshape(
          tp.matmul(out.ainv[0], tp.reshape(tp.mul(dj, aj), {n, 1})), {n});
      cols.push_back(tp.sub(aj, corr));
      ld = tp.add(ld, tp.dotv(dj, adiag));
    }
    out.alpha = c == 1 ? at : tp.hstack_cols(cols);
  } else {
    std::vector<ad::Var> cols;
    cols.reserve(c);
    for (std::size_t j = 0; j < c; ++j) {
      if (want_ainv) {
        cols.push_back(tp.reshape(
            tp.matmul(out.ainv[j], tp.reshape(tp.col(y, j), {n, 1})), {n}));
      } else {
        const ad::Var yrow = tp.reshape(tp.col(y, j), {1, n});
        const ad::Var half = tp.tri_right_solve(out.chol[j], yrow, true);
        cols.push_back(tp.reshape(tp.tri_right_solve(out.chol[j], half, false), {n}));
      }
    }
    out.alpha = tp.hstack_cols(cols);
    ld = logdets[0];
    for (std::size_t g = 1; g < logdets.size(); ++g) ld = tp.add(ld, logdets[g]);
  }

  quad = tp.sum(tp.mul(y, out.alpha));
  out.nll = tp.shift(tp.scale(tp.add(quad, ld), 0.5),
                     0.5 * static_cast<double>(c) * static_cast<double>(n) * std::log(kTwoPi));
  return out;
}

}  // namespace pncnn
