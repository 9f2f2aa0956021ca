#include <catch2/catch_amalgamated.hpp>
#include <cmath>

#include "pncnn/diffusion.hpp"
#include "pncnn/gp.hpp"
#include "pncnn/rng.hpp"
#include "pncnn/stochdiag.hpp"
#include "support.hpp"

using namespace pncnn;

namespace {

double unif(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

DiffusionOp random_op(Rng& rng, std::size_t k, std::size_t co, std::size_t ci, std::size_t d) {
  DiffusionOp op;
  op.W = Tensor{{k, co, ci}};
  op.beta = Tensor{{k, d}};
  op.sigma_chol = Tensor{{k, d, d}};
  op.bias = Tensor{{co}};
  for (std::size_t i = 0; i < op.W.numel(); ++i) op.W[i] = unif(rng, -1.0, 1.0);
  for (std::size_t i = 0; i < op.beta.numel(); ++i) op.beta[i] = unif(rng, -0.3, 0.3);
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c <= r; ++c)
        op.sigma_chol(kk, r, c) = r == c ? unif(rng, 0.15, 0.5) : unif(rng, -0.2, 0.2);
  for (std::size_t i = 0; i < co; ++i) op.bias(i) = unif(rng, -0.5, 0.5);
  return op;
}

ObservedField random_field(Rng& rng, std::size_t n, std::size_t c, bool shared_noise) {
  ObservedField f;
  f.X = Tensor{{n, 1}};
  f.Y = Tensor{{n, c}};
  f.V = Tensor{{n, c}};
  for (std::size_t i = 0; i < n; ++i) {
    f.X(i, 0) = unif(rng, 0.0, 2.0);
    const double base = unif(rng, 0.05, 0.25);
    for (std::size_t j = 0; j < c; ++j) {
      f.Y(i, j) = unif(rng, -1.0, 1.0);
      f.V(i, j) = shared_noise ? base : unif(rng, 0.05, 0.25);
    }
  }
  return f;
}

}  // namespace

TEST_CASE("stochastic_diag is unbiased on a fixed diagonal") {
  Rng rng(501);
  Tensor b{{2}};
  b(0) = 2.0;
  b(1) = 3.0;
  const auto apply = [&](const Tensor& z) {
    Tensor out{{2}};
    out(0) = b(0) * z(0);
    out(1) = b(1) * z(1);
    return out;
  };
  const std::size_t probes = 10000;
  const Tensor est = stochastic_diag(apply, 2, probes, rng);
  // each probe contributes b_ii z_i^2, so the standard error is b_ii sqrt(2/P)
  for (std::size_t i = 0; i < 2; ++i) {
    const double se = b(i) * std::sqrt(2.0 / static_cast<double>(probes));
    CHECK(std::fabs(est(i) - b(i)) <= 3.0 * se);
  }
}

TEST_CASE("stochastic_diag recovers the identity within five percent") {
  Rng rng(502);
  const std::size_t n = 32;
  const auto apply = [](const Tensor& z) { return z; };
  const Tensor est = stochastic_diag(apply, n, 10000, rng);
  for (std::size_t i = 0; i < n; ++i) CHECK(std::fabs(est(i) - 1.0) <= 0.05);
}

TEST_CASE("stochastic_diag rejects zero probes") {
  const auto apply = [](const Tensor& z) { return z; };
  Rng rng(503);
  CHECK_THROWS_AS(stochastic_diag(apply, 4, 0, rng), ShapeMismatch);
}

TEST_CASE("conv_cov_matvec assembles the exact covariance") {
  Rng rng(504);
  for (bool shared_noise : {true, false}) {
    const RbfHyper hy = RbfHyper::from_al(1.2, 0.3, 1);
    const ObservedField f = random_field(rng, 8, 2, shared_noise);
    const RbfGp gp = fit(hy, f);
    REQUIRE(gp.shared == shared_noise);
    const DiffusionOp op = random_op(rng, 3, 2, 2, 1);
    const ConvolvedGpView view{&gp, &op};
    Tensor q{{5, 1}};
    for (std::size_t i = 0; i < 5; ++i) q(i, 0) = unif(rng, 0.0, 2.0);

    const auto apply = conv_cov_matvec(view, q);
    const std::size_t dim = 5 * 2;
    Tensor dense{{dim, dim}};
    for (std::size_t j = 0; j < dim; ++j) {
      Tensor e{{dim}};
      e(j) = 1.0;
      const Tensor col = apply(e);
      for (std::size_t i = 0; i < dim; ++i) dense(i, j) = col(i);
    }
    for (std::size_t i = 0; i < dim; ++i)
      for (std::size_t j = 0; j < dim; ++j)
        CHECK(dense(i, j) == Catch::Approx(dense(j, i)).margin(1e-10));
    const Tensor exact = conv_var_diag(view, q);  // 5 x 2
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t a = 0; a < 2; ++a)
        CHECK(dense(i * 2 + a, i * 2 + a) == Catch::Approx(exact(i, a)).margin(1e-10));
  }
}

TEST_CASE("conv_cov_matvec handles the prior-only field") {
  Rng rng(505);
  const RbfHyper hy = RbfHyper::from_al(0.9, 0.25, 1);
  ObservedField f;
  f.X = Tensor{{0, 1}};
  f.Y = Tensor{{0, 2}};
  f.V = Tensor{{0, 2}};
  const RbfGp gp = fit(hy, f);
  const DiffusionOp op = random_op(rng, 2, 2, 2, 1);
  const ConvolvedGpView view{&gp, &op};
  Tensor q{{3, 1}};
  for (std::size_t i = 0; i < 3; ++i) q(i, 0) = unif(rng, 0.0, 1.0);
  const auto apply = conv_cov_matvec(view, q);
  const Tensor exact = conv_var_diag(view, q);
  for (std::size_t j = 0; j < 6; ++j) {
    Tensor e{{6}};
    e(j) = 1.0;
    CHECK(apply(e)(j) == Catch::Approx(exact(j / 2, j % 2)).margin(1e-12));
  }
}

TEST_CASE("stochastic estimate tracks exact conv variances within five percent") {
  Rng rng(506);
  const RbfHyper hy = RbfHyper::from_al(1.1, 0.25, 1);
  const ObservedField f = random_field(rng, 8, 2, true);
  const RbfGp gp = fit(hy, f);
  const DiffusionOp op = random_op(rng, 3, 2, 2, 1);
  const ConvolvedGpView view{&gp, &op};
  Tensor q{{6, 1}};
  for (std::size_t i = 0; i < 6; ++i) q(i, 0) = 0.1 + 0.36 * static_cast<double>(i);
  const Tensor exact = conv_var_diag(view, q);
  const Tensor est = stochastic_diag(conv_cov_matvec(view, q), 12, 10000, rng);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t a = 0; a < 2; ++a)
      CHECK(std::fabs(est(i * 2 + a) - exact(i, a)) <= 0.05 * exact(i, a));
}
