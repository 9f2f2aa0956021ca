#pragma once
#include <algorithm>
#include <cmath>
#include <utility>

#include <lapacke.h>

#include "tensor.hpp"

namespace pncnn {

// Lower Cholesky factor of SPD A. Throws NotPositiveDefinite on failure.
inline Tensor cholesky(const Tensor& a) {
  check_shape(a.rank() == 2 && a.dim(0) == a.dim(1), "cholesky wants square matrix");
  const std::size_t n = a.dim(0);
  Tensor l = a;
  int info = LAPACKE_dpotrf(LAPACK_ROW_MAJOR, 'L', (int)n, l.data(), (int)n);
  if (info != 0) throw NotPositiveDefinite("dpotrf failed, leading minor " + std::to_string(info));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) l(i, j) = 0.0;
  return l;
}

// Retry Cholesky with escalating diagonal jitter: 1e-8..1e-2 of mean(diag).
// Reports the jitter actually applied through *jitter_out when non-null.
inline Tensor cholesky_jittered(const Tensor& a, double* jitter_out = nullptr) {
  const std::size_t n = a.dim(0);
  double md = 0.0;
  for (std::size_t i = 0; i < n; ++i) md += a(i, i);
  md = (n > 0) ? md / (double)n : 1.0;
  if (md <= 0.0) md = 1.0;
  double jit = 0.0;
  for (int tries = 0; tries < 8; ++tries) {
    try {
      Tensor aj = a;
      for (std::size_t i = 0; i < n; ++i) aj(i, i) += jit;
      Tensor l = cholesky(aj);
      if (jitter_out) *jitter_out = jit;
      return l;
    } catch (const NotPositiveDefinite&) {
      jit = (jit == 0.0) ? 1e-8 * md : jit * 10.0;
      if (jit > 1e-2 * md) break;
    }
  }
  throw NotPositiveDefinite("matrix stayed indefinite through jitter 1e-2*mean(diag)");
}

// Solve op(T) X = B for triangular T (left side). lower: T lower-triangular.
inline Tensor trisolve(const Tensor& t, const Tensor& b, bool lower, bool trans) {
  check_shape(t.rank() == 2 && t.dim(0) == t.dim(1), "trisolve wants square T");
  check_shape(b.rank() == 2 && b.dim(0) == t.dim(0), "trisolve rhs rows mismatch");
  Tensor x = b;
  if (b.numel() == 0) return x;
  cblas_dtrsm(CblasRowMajor, CblasLeft, lower ? CblasLower : CblasUpper,
              trans ? CblasTrans : CblasNoTrans, CblasNonUnit,
              (int)b.dim(0), (int)b.dim(1), 1.0, t.data(), (int)t.dim(0),
              x.data(), (int)b.dim(1));
  return x;
}

// Solve A X = B from the lower Cholesky factor L of A.
inline Tensor solve_chol(const Tensor& l, const Tensor& b) {
  Tensor z = trisolve(l, b, true, false);
  return trisolve(l, z, true, true);
}

// A^{-1} for SPD A via dpotrf+dpotri, symmetrized.
inline Tensor spd_inverse(const Tensor& a) {
  check_shape(a.rank() == 2 && a.dim(0) == a.dim(1), "spd_inverse wants square matrix");
  const std::size_t n = a.dim(0);
  Tensor c = a;
  int info = LAPACKE_dpotrf(LAPACK_ROW_MAJOR, 'L', (int)n, c.data(), (int)n);
  if (info != 0) throw NotPositiveDefinite("dpotrf failed, leading minor " + std::to_string(info));
  info = LAPACKE_dpotri(LAPACK_ROW_MAJOR, 'L', (int)n, c.data(), (int)n);
  if (info != 0) throw NotPositiveDefinite("dpotri failed");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) c(i, j) = c(j, i);
  return c;
}

inline double logdet_from_chol(const Tensor& l) {
  double s = 0.0;
  for (std::size_t i = 0; i < l.dim(0); ++i) s += std::log(l(i, i));
  return 2.0 * s;
}

// Cyclic Jacobi eigensolver for symmetric A. Returns {eigenvalues asc, eigenvectors as columns}.
// Plenty for the small matrices the equivariance solver produces.
inline std::pair<Tensor, Tensor> jacobi_eigh(const Tensor& a_in) {
  check_shape(a_in.rank() == 2 && a_in.dim(0) == a_in.dim(1), "jacobi_eigh wants square matrix");
  const std::size_t n = a_in.dim(0);
  Tensor a = a_in;
  Tensor v = eye(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
    if (off < 1e-26 * (1.0 + a.max_abs() * a.max_abs())) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::fabs(apq) < 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::fabs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  Tensor evals{{n}};
  for (std::size_t i = 0; i < n; ++i) evals(i) = a(i, i);
  // sort ascending, permute eigenvector columns along
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  std::sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return evals(x) < evals(y); });
  Tensor se{{n}};
  Tensor sv{{n, n}};
  for (std::size_t i = 0; i < n; ++i) {
    se(i) = evals(idx[i]);
    for (std::size_t k = 0; k < n; ++k) sv(k, i) = v(k, idx[i]);
  }
  return {se, sv};
}

// Nullspace basis of (possibly rectangular) A via eigendecomposition of A^T A.
// Columns of the result span {x : ||Ax|| <= tol * scale}. Also reports the
// smallest kept singular value and largest discarded one for gap checks.
struct NullspaceResult {
  Tensor basis;           // n x dim, orthonormal columns
  std::size_t dim = 0;
  double smallest_kept = 0.0;    // smallest singular value treated as nonzero
  double largest_dropped = 0.0;  // largest singular value treated as zero
};

inline NullspaceResult nullspace(const Tensor& a, double tol = 1e-9) {
  check_shape(a.rank() == 2, "nullspace wants matrix");
  const std::size_t n = a.dim(1);
  Tensor ata = matmul(a, a, true, false);
  auto [evals, evecs] = jacobi_eigh(ata);
  // singular values = sqrt(max(eval, 0))
  double smax = 0.0;
  for (std::size_t i = 0; i < n; ++i) smax = std::max(smax, std::sqrt(std::max(0.0, evals(i))));
  const double cut = tol * std::max(1.0, smax);
  NullspaceResult r;
  std::vector<std::size_t> keep;
  r.smallest_kept = 0.0;
  r.largest_dropped = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double sv = std::sqrt(std::max(0.0, evals(i)));
    if (sv <= cut) {
      keep.push_back(i);
      r.largest_dropped = std::max(r.largest_dropped, sv);
    } else if (r.smallest_kept == 0.0 || sv < r.smallest_kept) {
      r.smallest_kept = sv;
    }
  }
  r.dim = keep.size();
  r.basis = Tensor{{n, keep.size()}};
  for (std::size_t j = 0; j < keep.size(); ++j)
    for (std::size_t i = 0; i < n; ++i) r.basis(i, j) = evecs(i, keep[j]);
  return r;
}

}  // namespace pncnn
