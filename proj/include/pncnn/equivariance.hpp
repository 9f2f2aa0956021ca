#pragma once
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "diffusion.hpp"
#include "errors.hpp"
#include "linalg.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pncnn {

enum class GroupId { kTranslations, kSo2, kCyclic };

struct GroupSample {
  GroupId group = GroupId::kSo2;
  std::vector<Tensor> elements;  // 2x2 rotation parts, identity for translations
};

inline Tensor rotation2(double theta) {
  Tensor g{{2, 2}};
  g(0, 0) = std::cos(theta);
  g(0, 1) = -std::sin(theta);
  g(1, 0) = std::sin(theta);
  g(1, 1) = std::cos(theta);
  return g;
}

inline GroupSample sample_group(GroupId id, std::size_t count, Rng& rng,
                                std::size_t cyclic_order = 4) {
  GroupSample gs;
  gs.group = id;
  for (std::size_t i = 0; i < count; ++i) {
    switch (id) {
      case GroupId::kTranslations:
        gs.elements.push_back(eye(2));
        break;
      case GroupId::kSo2:
        gs.elements.push_back(rotation2(kTwoPi * rng.uniform()));
        break;
      case GroupId::kCyclic:
        gs.elements.push_back(
            rotation2(kTwoPi * static_cast<double>(i % cyclic_order) /
                      static_cast<double>(cyclic_order)));
        break;
    }
  }
  return gs;
}

// direct sum of tensor ranks; a plain rank is a one-term sum
struct Rep {
  std::vector<std::pair<std::size_t, std::size_t>> terms;  // (covariant, contravariant)

  static Rep scalar() { return Rep{{{0, 0}}}; }
  static Rep tensor(std::size_t p, std::size_t q) { return Rep{{{p, q}}}; }

  std::size_t dim(std::size_t d = 2) const {
    std::size_t n = 0;
    for (const auto& [p, q] : terms) {
      std::size_t k = 1;
      for (std::size_t i = 0; i < p + q; ++i) k *= d;
      n += k;
    }
    return n;
  }
};

inline Tensor kron(const Tensor& a, const Tensor& b) {
  const std::size_t ra = a.dim(0), ca = a.dim(1), rb = b.dim(0), cb = b.dim(1);
  Tensor out{{ra * rb, ca * cb}};
  for (std::size_t i = 0; i < ra; ++i)
    for (std::size_t j = 0; j < ca; ++j)
      for (std::size_t k = 0; k < rb; ++k)
        for (std::size_t l = 0; l < cb; ++l) out(i * rb + k, j * cb + l) = a(i, j) * b(k, l);
  return out;
}

inline Tensor inv_transpose2(const Tensor& g) {
  check_shape(g.rank() == 2 && g.dim(0) == 2 && g.dim(1) == 2, "inv_transpose2 wants 2x2");
  const double det = g(0, 0) * g(1, 1) - g(0, 1) * g(1, 0);
  check_shape(std::abs(det) > 1e-300, "inv_transpose2 singular element");
  Tensor h{{2, 2}};
  h(0, 0) = g(1, 1) / det;
  h(0, 1) = -g(1, 0) / det;
  h(1, 0) = -g(0, 1) / det;
  h(1, 1) = g(0, 0) / det;
  return h;
}

inline Tensor blockdiag(const std::vector<Tensor>& blocks) {
  std::size_t n = 0;
  for (const Tensor& b : blocks) n += b.dim(0);
  Tensor out{{n, n}};
  std::size_t at = 0;
  for (const Tensor& b : blocks) {
    for (std::size_t i = 0; i < b.dim(0); ++i)
      for (std::size_t j = 0; j < b.dim(1); ++j) out(at + i, at + j) = b(i, j);
    at += b.dim(0);
  }
  return out;
}

// rho(g) = g^{(x)p} (x) (g^{-T})^{(x)q}, block diagonal over the direct sum
inline Tensor rep_matrix(const Rep& rep, const Tensor& g) {
  const Tensor ginvt = inv_transpose2(g);
  std::vector<Tensor> blocks;
  for (const auto& [p, q] : rep.terms) {
    Tensor m = eye(1);
    for (std::size_t i = 0; i < p; ++i) m = kron(m, g);
    for (std::size_t i = 0; i < q; ++i) m = kron(m, ginvt);
    blocks.push_back(std::move(m));
  }
  return blockdiag(blocks);
}

// derivative of rho(e^{theta j}) at theta = 0: one j insertion per factor,
// contravariant factors pick up -j^T
inline Tensor rep_generator(const Rep& rep, const Tensor& j) {
  const std::size_t d = j.dim(0);
  Tensor mjt{{d, d}};
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) mjt(a, b) = -j(b, a);
  std::vector<Tensor> blocks;
  for (const auto& [p, q] : rep.terms) {
    const std::size_t slots = p + q;
    std::size_t dim = 1;
    for (std::size_t i = 0; i < slots; ++i) dim *= d;
    Tensor acc{{dim, dim}};
    for (std::size_t s = 0; s < slots; ++s) {
      Tensor m = eye(1);
      for (std::size_t i = 0; i < slots; ++i)
        m = kron(m, i == s ? (i < p ? j : mjt) : eye(d));
      for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += m[i];
    }
    blocks.push_back(std::move(acc));
  }
  return blockdiag(blocks);
}

// rotation2(theta) = e^{theta j}
inline Tensor so2_generator() {
  Tensor j{{2, 2}};
  j(0, 1) = -1.0;
  j(1, 0) = 1.0;
  return j;
}

namespace detail {

inline void paste_rows(Tensor& dst, std::size_t row0, const Tensor& src) {
  for (std::size_t i = 0; i < src.dim(0); ++i)
    for (std::size_t j = 0; j < src.dim(1); ++j) dst(row0 + i, j) = src(i, j);
}

}  // namespace detail

// Stacked [rho_out(g) (x) rho_in(g^{-T}) (x) g^{(x)rank}] - I blocks over the
// sampled elements; SO(2) additionally contributes the Lie-algebra rows so the
// nullspace is the full continuous-group invariant space, with the finite
// angles acting as checks. Rank-2 spatial indices are symmetrized by default
// because they contract with symmetric second derivatives; this excludes the
// antisymmetric invariant by construction.
inline Tensor build_constraint_matrix(const Rep& rep_out, const Rep& rep_in, int spatial_rank,
                                      const GroupSample& gs, bool symmetrize = true) {
  check_shape(spatial_rank == 1 || spatial_rank == 2, "spatial rank must be 1 or 2");
  check_shape(gs.group == GroupId::kSo2 || gs.elements.size() >= 8,
              "discrete groups want at least 8 samples");
  check_shape(!gs.elements.empty(), "empty group sample");
  const std::size_t d = 2;
  const Rep spatial = Rep::tensor(static_cast<std::size_t>(spatial_rank), 0);
  const std::size_t dout = rep_out.dim(d), din = rep_in.dim(d), dsp = spatial.dim(d);
  const std::size_t dim = dout * din * dsp;

  const bool sym_rows = symmetrize && spatial_rank == 2;
  const bool lie_rows = gs.group == GroupId::kSo2;
  const std::size_t rows =
      dim * (gs.elements.size() + (sym_rows ? 1 : 0) + (lie_rows ? 1 : 0));
  Tensor c{{rows, dim}};
  std::size_t at = 0;
  for (const Tensor& g : gs.elements) {
    Tensor block = kron(kron(rep_matrix(rep_out, g), rep_matrix(rep_in, inv_transpose2(g))),
                        rep_matrix(spatial, g));
    for (std::size_t i = 0; i < dim; ++i) block(i, i) -= 1.0;
    detail::paste_rows(c, at, block);
    at += dim;
  }
  if (lie_rows) {
    const Tensor j = so2_generator();
    // the middle factor g^{-T} equals g on SO(2), so every slot contributes j
    const Tensor lo = rep_generator(rep_out, j);
    const Tensor li = rep_generator(rep_in, j);
    const Tensor ls = rep_generator(spatial, j);
    Tensor gen = kron(kron(lo, eye(din)), eye(dsp));
    const Tensor mid = kron(kron(eye(dout), li), eye(dsp));
    const Tensor sp = kron(eye(dout * din), ls);
    for (std::size_t i = 0; i < gen.numel(); ++i) gen[i] += mid[i] + sp[i];
    detail::paste_rows(c, at, gen);
    at += dim;
  }
  if (sym_rows) {
    Tensor swap{{dim, dim}};
    for (std::size_t f = 0; f < dout * din; ++f)
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j2 = 0; j2 < d; ++j2)
          swap(f * d * d + i * d + j2, f * d * d + j2 * d + i) = 1.0;
    for (std::size_t i = 0; i < dim; ++i) swap(i, i) -= 1.0;  // P_swap - I rows
    detail::paste_rows(c, at, swap);
  }
  return c;
}

struct InvariantBasis {
  Tensor basis;  // dim x count, orthonormal columns
  std::size_t dim = 0;
  double smallest_kept = 0.0;
  double largest_dropped = 0.0;
};

inline InvariantBasis solve_invariant_basis(const Tensor& constraint, double tol = 1e-8) {
  const NullspaceResult ns = nullspace(constraint, tol);
  return InvariantBasis{ns.basis, ns.dim, ns.smallest_kept, ns.largest_dropped};
}

// max over sampled (x, theta) of |K(g^{-1}x) - K(x)| for the scalar operator
// kernel K(x) = sum_k W_k G_k(x); rotation equivariance of a scalar-channel
// conv is exactly this identity
inline double rotated_kernel_residual(const DiffusionOp& op, std::size_t trials, Rng& rng) {
  check_shape(op.c_in() == 1 && op.c_out() == 1 && op.d() == 2,
              "rotated_kernel_residual wants a scalar 2-d operator");
  const auto kernel = [&](const Tensor& x) {
    double acc = 0.0;
    for (std::size_t k = 0; k < op.k(); ++k) {
      Tensor beta{{2}};
      beta(0) = op.beta(k, 0);
      beta(1) = op.beta(k, 1);
      acc += op.W(k, 0, 0) * greens_eval(beta, op.sigma(k), op.t, x);
    }
    return acc;
  };
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    Tensor x{{2}};
    x(0) = 4.0 * rng.uniform() - 2.0;
    x(1) = 4.0 * rng.uniform() - 2.0;
    const Tensor g = rotation2(kTwoPi * rng.uniform());
    Tensor gx{{2}};  // g^{-1} x = g^T x for rotations
    gx(0) = g(0, 0) * x(0) + g(1, 0) * x(1);
    gx(1) = g(0, 1) * x(0) + g(1, 1) * x(1);
    worst = std::max(worst, std::abs(kernel(gx) - kernel(x)));
  }
  return worst;
}

struct TrivialityReport {
  double trivial_residual = 0.0;
  std::vector<double> nontrivial_residuals;
  bool confirmed = false;
};

// isotropic driftless terms pass the rotated-kernel identity, any sampled
// drift or anisotropy breaks it by a wide margin
inline TrivialityReport check_scalar_diffusion_triviality(std::size_t k_ops, std::size_t trials,
                                                          Rng& rng) {
  const auto scalar_op = [](double w, const Tensor& beta, double c00, double c10, double c11) {
    DiffusionOp op;
    op.W = Tensor{{1, 1, 1}};
    op.W(0, 0, 0) = w;
    op.beta = Tensor{{1, 2}};
    op.beta(0, 0) = beta(0);
    op.beta(0, 1) = beta(1);
    op.sigma_chol = Tensor{{1, 2, 2}};
    op.sigma_chol(0, 0, 0) = c00;
    op.sigma_chol(0, 1, 0) = c10;
    op.sigma_chol(0, 1, 1) = c11;
    op.bias = Tensor{{1}};
    return op;
  };

  TrivialityReport rep;
  {
    DiffusionOp op;
    const std::size_t terms = 2;
    op.W = Tensor{{terms, 1, 1}};
    op.beta = Tensor{{terms, 2}};
    op.sigma_chol = Tensor{{terms, 2, 2}};
    op.bias = Tensor{{1}};
    for (std::size_t k = 0; k < terms; ++k) {
      op.W(k, 0, 0) = 2.0 * rng.uniform() - 1.0;
      const double c = std::sqrt(0.5 + 1.5 * rng.uniform());  // Sigma = c^2 I
      op.sigma_chol(k, 0, 0) = c;
      op.sigma_chol(k, 1, 1) = c;
    }
    rep.trivial_residual = rotated_kernel_residual(op, trials, rng);
  }
  for (std::size_t i = 0; i < k_ops; ++i) {
    Tensor beta{{2}};
    double c00 = 1.0, c10 = 0.0, c11 = 1.0;
    if (i % 2 == 0) {
      const double ang = kTwoPi * rng.uniform(), len = 0.5 + rng.uniform();
      beta(0) = len * std::cos(ang);
      beta(1) = len * std::sin(ang);
    } else {
      c00 = std::sqrt(0.5 + 0.5 * rng.uniform());
      c11 = std::sqrt(1.5 + 1.5 * rng.uniform());  // axis ratio at least 1.5
      c10 = 0.4 * rng.uniform();
    }
    const DiffusionOp op = scalar_op(0.5 + rng.uniform(), beta, c00, c10, c11);
    rep.nontrivial_residuals.push_back(rotated_kernel_residual(op, trials, rng));
  }
  rep.confirmed = rep.trivial_residual < 1e-10;
  for (double r : rep.nontrivial_residuals)
    if (!(r > 1e-3)) rep.confirmed = false;
  return rep;
}

}  // namespace pncnn
