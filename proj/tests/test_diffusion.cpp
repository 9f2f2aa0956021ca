#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <functional>
#include <memory>
#include <vector>

#include "pncnn/diffusion.hpp"
#include "pncnn/gp.hpp"
#include "pncnn/linalg.hpp"
#include "pncnn/rng.hpp"
#include "pncnn/special.hpp"
#include "support.hpp"

using namespace pncnn;
using testsup::check_grad;
using testsup::gj_inverse;
using testsup::random_tensor;

namespace {

// GL20 panel quadrature over [lo, hi]
double gl_integrate(const std::function<double(double)>& f, double lo, double hi,
                    int panels = 48) {
  double acc = 0.0;
  const double w = (hi - lo) / panels;
  for (int p = 0; p < panels; ++p) {
    const double c = lo + (p + 0.5) * w, h = 0.5 * w;
    for (int i = 0; i < 10; ++i)
      for (int sign = -1; sign <= 1; sign += 2)
        acc += detail::kGl20W[(std::size_t)i] * h *
               f(c + sign * h * detail::kGl20X[(std::size_t)i]);
  }
  return acc;
}

DiffusionOp identity_op(std::size_t c, std::size_t d) {
  DiffusionOp op;
  op.W = Tensor{{1, c, c}};
  for (std::size_t i = 0; i < c; ++i) op.W(0, i, i) = 1.0;
  op.beta = Tensor{{1, d}};
  op.sigma_chol = Tensor{{1, d, d}};
  op.bias = Tensor{{c}};
  return op;
}

DiffusionOp random_op(Rng& rng, std::size_t k, std::size_t co, std::size_t ci, std::size_t d) {
  DiffusionOp op;
  op.W = random_tensor({k, co, ci}, rng);
  op.beta = random_tensor({k, d}, rng, -0.3, 0.3);
  op.sigma_chol = Tensor{{k, d, d}};
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < i; ++j) op.sigma_chol(kk, i, j) = -0.2 + 0.4 * rng.uniform();
      op.sigma_chol(kk, i, i) = 0.15 + 0.35 * rng.uniform();
    }
  op.bias = random_tensor({co}, rng, -0.5, 0.5);
  return op;
}

ObservedField random_field(Rng& rng, std::size_t n, std::size_t c, std::size_t d,
                           bool shared_noise) {
  ObservedField obs;
  obs.X = random_tensor({n, d}, rng, 0.0, 1.0);
  obs.Y = random_tensor({n, c}, rng);
  obs.V = random_tensor({n, c}, rng, 0.05, 0.3);
  if (shared_noise)
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 1; j < c; ++j) obs.V(i, j) = obs.V(i, 0);
  return obs;
}

// 3x3 integer stencil with isotropic diffusion sigma^2 I per term
DiffusionOp stencil_op(double sigma, const Tensor& w9) {
  DiffusionOp op;
  op.W = Tensor{{9, 1, 1}};
  op.beta = Tensor{{9, 2}};
  op.sigma_chol = Tensor{{9, 2, 2}};
  op.bias = Tensor{{1}};
  std::size_t k = 0;
  for (int dr = -1; dr <= 1; ++dr)
    for (int dc = -1; dc <= 1; ++dc, ++k) {
      op.beta(k, 0) = dr;
      op.beta(k, 1) = dc;
      op.sigma_chol(k, 0, 0) = sigma;
      op.sigma_chol(k, 1, 1) = sigma;
      op.W(k, 0, 0) = w9[k];
    }
  return op;
}

}  // namespace

TEST_CASE("greens_eval evaluates the heat kernel density") {
  Tensor b2{{2}}, x2{{2}};
  REQUIRE(greens_eval(b2, eye(2), 1.0, x2) ==
          Catch::Approx(0.15915494309189535).margin(1e-12));

  Tensor b1 = Tensor::vec({1.0}), s1 = Tensor::mat(1, 1, {1.0});
  REQUIRE(greens_eval(b1, s1, 1.0, Tensor::vec({-1.0})) ==
          Catch::Approx(0.3989422804014327).margin(1e-12));

  // general d=1 case against the plain density helper
  const double beta = 0.5, sig = 0.75, t = 2.0, x = 0.3;
  REQUIRE(greens_eval(Tensor::vec({beta}), Tensor::mat(1, 1, {sig}), t, Tensor::vec({x})) ==
          Catch::Approx(normal_pdf(x + t * beta, t * sig)).epsilon(1e-12));
}

TEST_CASE("greens_eval rejects a degenerate diffusion") {
  Tensor b = Tensor::vec({0.0}), x = Tensor::vec({0.0});
  REQUIRE_THROWS_AS(greens_eval(b, Tensor::mat(1, 1, {0.0}), 1.0, x), SingularSigma);
  REQUIRE_THROWS_AS(greens_eval(b, Tensor::mat(1, 1, {1e-310}), 1.0, x), SingularSigma);

  Tensor b2{{2}}, x2{{2}};
  Tensor s2 = eye(2);
  s2(1, 1) = 1e-320;
  REQUIRE_THROWS_AS(greens_eval(b2, s2, 1.0, x2), SingularSigma);

  REQUIRE(greens_eval(b, Tensor::mat(1, 1, {1e-100}), 1.0, x) > 0.0);
}

TEST_CASE("greens_eval solves the drift-diffusion flow") {
  // explicit Euler for dg/dt = beta g_x + sig/2 g_xx starting from the exact
  // narrow profile at t0, marched to t=2 on h=0.01, dt=1e-5
  const double beta = 0.5, sig = 0.75, t1 = 2.0, t0 = 0.05;
  const double h = 0.01, dt = 1e-5, lo = -8.0, hi = 6.0;
  const std::size_t n = static_cast<std::size_t>(std::lround((hi - lo) / h)) + 1;
  std::vector<double> g(n), gn(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) g[i] = normal_pdf(lo + i * h + t0 * beta, t0 * sig);

  const double adv = beta * dt / (2.0 * h), dif = 0.5 * sig * dt / (h * h);
  const long steps = std::lround((t1 - t0) / dt);
  for (long s = 0; s < steps; ++s) {
    for (std::size_t i = 1; i + 1 < n; ++i)
      gn[i] = g[i] + adv * (g[i + 1] - g[i - 1]) + dif * (g[i + 1] - 2.0 * g[i] + g[i - 1]);
    gn[0] = gn[n - 1] = 0.0;
    std::swap(g, gn);
  }

  const Tensor bt = Tensor::vec({beta}), st = Tensor::mat(1, 1, {sig});
  for (double x : {0.3, -1.0, -2.5, 1.5}) {
    const std::size_t i = static_cast<std::size_t>(std::lround((x - lo) / h));
    REQUIRE(greens_eval(bt, st, t1, Tensor::vec({x})) == Catch::Approx(g[i]).margin(1e-3));
  }
}

TEST_CASE("conv_cross_cov reduces to the kernel for the identity term") {
  Rng rng(41);
  for (std::size_t d : {std::size_t{1}, std::size_t{2}}) {
    RbfHyper hy = RbfHyper::from_al(0.8, 0.45, d);
    Tensor zb{{d}}, zs{{d, d}};
    for (int rep = 0; rep < 3; ++rep) {
      Tensor x = random_tensor({d}, rng), xi = random_tensor({d}, rng);
      REQUIRE(conv_cross_cov(hy, zb, zs, 1.0, x, xi) ==
              Catch::Approx(kernel_eval(hy, x, xi)).epsilon(1e-12));
    }
  }
}

TEST_CASE("conv_cross_cov closed form and quadrature agree") {
  RbfHyper hy = RbfHyper::from_al(1.0, 1.0, 1);
  const Tensor z = Tensor::vec({0.0});
  // a N(0; -0.5, 1 + 0.75); the quadrature oracle below pins the same value
  REQUIRE(conv_cross_cov(hy, Tensor::vec({0.5}), Tensor::mat(1, 1, {0.75}), 1.0, z, z) ==
          Catch::Approx(0.280782480937).margin(1e-9));

  Rng rng(42);
  for (int rep = 0; rep < 4; ++rep) {
    RbfHyper h2 = RbfHyper::from_al(0.3 + rng.uniform(), 0.2 + 0.6 * rng.uniform(), 1);
    const double beta = -0.8 + 1.6 * rng.uniform();
    const double sig = 0.2 + 0.8 * rng.uniform();
    const double t = 0.5 + rng.uniform();
    const double x = -0.5 + rng.uniform(), xi = -0.5 + rng.uniform();
    const double sd = std::sqrt(t * sig) + h2.l();
    // smoothing form of the Green's convolution: the flow shifts the argument
    // by +t beta, i.e. int N(s; t beta, t Sigma) k(x+s, xi) ds
    const auto f = [&](double s) {
      return normal_pdf(s - t * beta, t * sig) *
             kernel_eval(h2, Tensor::vec({x + s}), Tensor::vec({xi}));
    };
    const double want = gl_integrate(f, t * beta - 12.0 * sd, t * beta + 12.0 * sd, 64);
    REQUIRE(conv_cross_cov(h2, Tensor::vec({beta}), Tensor::mat(1, 1, {sig}), t,
                           Tensor::vec({x}), Tensor::vec({xi})) ==
            Catch::Approx(want).epsilon(1e-9));
  }
}

TEST_CASE("conv_cross_cov is translation invariant") {
  RbfHyper hy = RbfHyper::from_al(0.7, 0.3, 2);
  Rng rng(43);
  DiffusionOp op = random_op(rng, 2, 1, 1, 2);
  Tensor x = random_tensor({2}, rng), xi = random_tensor({2}, rng);
  const double base = conv_cross_cov(hy, op, 1, x, xi);
  for (double shift : {0.37, -2.5}) {
    Tensor xs = x, xis = xi;
    for (std::size_t i = 0; i < 2; ++i) {
      xs[i] += shift;
      xis[i] += shift;
    }
    REQUIRE(conv_cross_cov(hy, op, 1, xs, xis) == Catch::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("prior pair covariance reductions") {
  RbfHyper hy = RbfHyper::from_al(0.9, 0.55, 1);
  Rng rng(44);
  Tensor x = Tensor::vec({0.4}), xp = Tensor::vec({-0.2});

  DiffusionOp id = identity_op(1, 1);
  REQUIRE(conv_prior_pair(hy, id, 0, 0, x, xp) ==
          Catch::Approx(kernel_eval(hy, x, xp)).epsilon(1e-12));

  // equal drifts cancel, diffusions add
  const Tensor b = Tensor::vec({0.7}), s = Tensor::mat(1, 1, {0.4});
  Tensor s2 = s;
  s2[0] *= 2.0;
  REQUIRE(conv_prior_pair(hy, b, s, b, s, 1.0, x, xp) ==
          Catch::Approx(conv_cross_cov(hy, Tensor::vec({0.0}), s2, 1.0, x, xp)).epsilon(1e-12));

  // semigroup: one flow by (b1+b2, s1+s2) equals opposing flows on both slots
  for (int rep = 0; rep < 3; ++rep) {
    const double b1 = -0.6 + 1.2 * rng.uniform(), b2 = -0.6 + 1.2 * rng.uniform();
    const double v1 = 0.2 + 0.5 * rng.uniform(), v2 = 0.2 + 0.5 * rng.uniform();
    const double lhs =
        conv_prior_pair(hy, Tensor::vec({b1 + b2}), Tensor::mat(1, 1, {v1 + v2}),
                        Tensor::vec({0.0}), Tensor::mat(1, 1, {0.0}), 1.0, x, xp);
    const double rhs = conv_prior_pair(hy, Tensor::vec({b1}), Tensor::mat(1, 1, {v1}),
                                       Tensor::vec({-b2}), Tensor::mat(1, 1, {v2}), 1.0, x, xp);
    REQUIRE(lhs == Catch::Approx(rhs).margin(1e-10));
  }
}

TEST_CASE("prior pair covariance matches nested quadrature") {
  Rng rng(45);
  for (int rep = 0; rep < 2; ++rep) {
    RbfHyper hy = RbfHyper::from_al(0.4 + rng.uniform(), 0.25 + 0.5 * rng.uniform(), 1);
    const double b1 = -0.5 + rng.uniform(), b2 = -0.5 + rng.uniform();
    const double v1 = 0.2 + 0.6 * rng.uniform(), v2 = 0.2 + 0.6 * rng.uniform();
    const double t = 1.0;
    const double x = 0.3, xp = -0.1;
    const double sd1 = std::sqrt(t * v1), sd2 = std::sqrt(t * v2);
    const auto inner = [&](double s) {
      return gl_integrate(
          [&](double r) {
            return normal_pdf(r - t * b2, t * v2) *
                   kernel_eval(hy, Tensor::vec({x + s}), Tensor::vec({xp + r}));
          },
          t * b2 - 12.0 * sd2, t * b2 + 12.0 * sd2, 40);
    };
    const double want =
        gl_integrate([&](double s) { return normal_pdf(s - t * b1, t * v1) * inner(s); },
                     t * b1 - 12.0 * sd1, t * b1 + 12.0 * sd1, 40);
    const double got =
        conv_prior_pair(hy, Tensor::vec({b1}), Tensor::mat(1, 1, {v1}), Tensor::vec({b2}),
                        Tensor::mat(1, 1, {v2}), t, Tensor::vec({x}), Tensor::vec({xp}));
    REQUIRE(got == Catch::Approx(want).margin(1e-8));
  }
}

TEST_CASE("conv_mean reduces to the posterior mean under the identity operator") {
  Rng rng(46);
  RbfHyper hy = RbfHyper::from_al(1.1, 0.3, 1);
  ObservedField obs = random_field(rng, 5, 2, 1, false);
  RbfGp gp = fit(hy, obs);
  Tensor q = random_tensor({4, 1}, rng, 0.0, 1.0);

  DiffusionOp id = identity_op(2, 1);
  ConvolvedGpView view{&gp, &id};
  REQUIRE(sub(conv_mean(view, q), posterior_mean(gp, q)).max_abs() <= 1e-12);

  DiffusionOp biased = identity_op(2, 1);
  biased.W.fill(0.0);
  biased.bias = Tensor::vec({0.3, -0.7});
  ConvolvedGpView bview{&gp, &biased};
  const Tensor bm = conv_mean(bview, q);
  for (std::size_t i = 0; i < q.dim(0); ++i)
    for (std::size_t a = 0; a < 2; ++a) REQUIRE(bm(i, a) == biased.bias(a));
}

TEST_CASE("conv_mean matches smoothing the posterior mean") {
  Rng rng(47);
  RbfHyper hy = RbfHyper::from_al(0.9, 0.35, 1);
  ObservedField obs = random_field(rng, 6, 2, 1, false);
  RbfGp gp = fit(hy, obs);
  DiffusionOp op = random_op(rng, 2, 2, 2, 1);
  ConvolvedGpView view{&gp, &op};
  Tensor q = random_tensor({3, 1}, rng, 0.0, 1.0);
  const Tensor got = conv_mean(view, q);

  for (std::size_t i = 0; i < q.dim(0); ++i)
    for (std::size_t a = 0; a < op.c_out(); ++a) {
      double want = op.bias(a);
      for (std::size_t k = 0; k < op.k(); ++k) {
        const double tb = op.t * op.beta(k, 0);
        const double tv = op.t * op.sigma(k)(0, 0);
        const double sd = std::sqrt(tv);
        for (std::size_t b = 0; b < op.c_in(); ++b) {
          const double smoothed = gl_integrate(
              [&](double s) {
                const Tensor mu = posterior_mean(gp, Tensor::mat(1, 1, {q(i, 0) + s}));
                return normal_pdf(s - tb, tv) * mu(0, b);
              },
              tb - 12.0 * sd, tb + 12.0 * sd, 48);
          want += op.W(k, a, b) * smoothed;
        }
      }
      REQUIRE(got(i, a) == Catch::Approx(want).margin(1e-9));
    }
}

TEST_CASE("identity operator preserves the posterior variance") {
  Rng rng(48);
  RbfHyper hy = RbfHyper::from_al(1.1, 0.3, 1);
  ObservedField obs = random_field(rng, 5, 2, 1, false);
  RbfGp gp = fit(hy, obs);
  Tensor q = random_tensor({4, 1}, rng, 0.0, 1.0);
  DiffusionOp id = identity_op(2, 1);
  ConvolvedGpView view{&gp, &id};
  REQUIRE(sub(conv_var_diag(view, q), posterior_var_diag(gp, q)).max_abs() <= 1e-12);

  // noiseless observed points collapse to (floored) zero variance
  RbfHyper tiny = RbfHyper::from_al(0.004, 0.3, 1);
  ObservedField nobs;
  nobs.X = Tensor::mat(3, 1, {0.1, 0.5, 0.85});
  nobs.Y = Tensor::mat(3, 1, {1.0, -0.4, 0.2});
  nobs.V = Tensor{{3, 1}};
  RbfGp ngp = fit(tiny, nobs);
  DiffusionOp nid = identity_op(1, 1);
  ConvolvedGpView nview{&ngp, &nid};
  REQUIRE(conv_var_diag(nview, nobs.X).max_abs() <= 1e-8);
}

TEST_CASE("conv_var_diag matches a dense covariance oracle") {
  Rng rng(49);
  RbfHyper hy = RbfHyper::from_al(0.8, 0.4, 1);
  const Tensor zero = Tensor::vec({0.0});
  for (bool shared : {true, false}) {
    ObservedField obs = random_field(rng, 6, 2, 1, shared);
    RbfGp gp = fit(hy, obs);
    REQUIRE(gp.shared == shared);
    DiffusionOp op = random_op(rng, 2, 2, 2, 1);
    ConvolvedGpView view{&gp, &op};
    Tensor q = random_tensor({3, 1}, rng, 0.0, 1.0);
    const Tensor got = conv_var_diag(view, q);

    const std::size_t n = obs.X.dim(0), kk = op.k();
    Tensor pp{{kk, kk}};
    for (std::size_t k1 = 0; k1 < kk; ++k1)
      for (std::size_t k2 = 0; k2 < kk; ++k2)
        pp(k1, k2) = conv_prior_pair(hy, op, k1, k2, zero, zero);

    const Tensor kxx = kernel_matrix(hy, obs.X, obs.X);
    for (std::size_t m = 0; m < q.dim(0); ++m) {
      Tensor qm = Tensor::vec({q(m, 0)});
      std::vector<Tensor> u(kk, Tensor{{n}});
      for (std::size_t k = 0; k < kk; ++k)
        for (std::size_t r = 0; r < n; ++r)
          u[k](r) = conv_cross_cov(hy, op, k, qm, Tensor::vec({obs.X(r, 0)}));
      for (std::size_t alpha = 0; alpha < op.c_out(); ++alpha) {
        double want = 0.0;
        for (std::size_t b = 0; b < 2; ++b) {
          Tensor a = kxx;
          for (std::size_t i = 0; i < n; ++i)
            a(i, i) += std::max(obs.V(i, b), kVarFloorFactor * hy.a());
          const Tensor ainv = gj_inverse(a);
          for (std::size_t k1 = 0; k1 < kk; ++k1)
            for (std::size_t k2 = 0; k2 < kk; ++k2) {
              double quad = 0.0;
              for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < n; ++c) quad += u[k1](r) * ainv(r, c) * u[k2](c);
              want += op.W(k1, alpha, b) * op.W(k2, alpha, b) * (pp(k1, k2) - quad);
            }
        }
        REQUIRE(got(m, alpha) == Catch::Approx(std::max(want, 0.0)).margin(1e-10));
      }
    }
  }
}

TEST_CASE("conv_var_diag prior branch sums the pair table") {
  Rng rng(50);
  RbfHyper hy = RbfHyper::from_al(0.9, 0.5, 1);
  ObservedField empty;
  empty.X = Tensor{{0, 1}};
  empty.Y = Tensor{{0, 2}};
  empty.V = Tensor{{0, 2}};
  RbfGp gp = fit(hy, empty);
  DiffusionOp op = random_op(rng, 2, 2, 2, 1);
  ConvolvedGpView view{&gp, &op};
  Tensor q = random_tensor({3, 1}, rng);
  const Tensor got = conv_var_diag(view, q);
  const Tensor mean = conv_mean(view, q);

  const Tensor zero = Tensor::vec({0.0});
  for (std::size_t m = 0; m < q.dim(0); ++m)
    for (std::size_t a = 0; a < op.c_out(); ++a) {
      REQUIRE(mean(m, a) == op.bias(a));
      double want = 0.0;
      for (std::size_t b = 0; b < op.c_in(); ++b)
        for (std::size_t k1 = 0; k1 < op.k(); ++k1)
          for (std::size_t k2 = 0; k2 < op.k(); ++k2)
            want += op.W(k1, a, b) * op.W(k2, a, b) *
                    conv_prior_pair(hy, op, k1, k2, zero, zero);
      REQUIRE(got(m, a) == Catch::Approx(want).margin(1e-12));
    }
}

TEST_CASE("grid stencils reduce to discrete convolution") {
  Rng rng(51);

  SECTION("constant image, equal weights") {
    Tensor w{{9}};
    w.fill(1.0 / 9.0);
    DiffusionOp op = stencil_op(1e-6, w);
    RbfHyper hy = RbfHyper::from_al(1.0, 0.02, 2);
    Tensor image{{8, 8}};
    image.fill(1.0);
    REQUIRE(discrete_limit_check(op, hy, image).max_abs < 1e-6);
  }

  SECTION("random image and weights, then a halved-scale sweep") {
    Tensor w = random_tensor({9}, rng);
    Tensor image = random_tensor({8, 8}, rng, -1.0, 1.0);

    DiffusionOp op = stencil_op(1e-3, w);
    RbfHyper hy = RbfHyper::from_al(1.0, 0.05, 2);
    const DiscreteLimitReport full = discrete_limit_check(op, hy, image);
    REQUIRE(full.rel() < 1e-3);

    DiffusionOp oph = stencil_op(5e-4, w);
    RbfHyper hyh = RbfHyper::from_al(1.0, 0.025, 2);
    const DiscreteLimitReport half = discrete_limit_check(oph, hyh, image);
    REQUIRE(half.rel() < full.rel());
  }
}

TEST_CASE("convolution outputs are translation invariant") {
  Rng rng(52);
  RbfHyper hy = RbfHyper::from_al(0.8, 0.4, 2);
  ObservedField obs = random_field(rng, 5, 1, 2, true);
  DiffusionOp op = random_op(rng, 2, 2, 1, 2);
  Tensor q = random_tensor({3, 2}, rng, 0.0, 1.0);

  RbfGp gp = fit(hy, obs);
  ConvolvedGpView view{&gp, &op};
  const Tensor mean = conv_mean(view, q);
  const Tensor var = conv_var_diag(view, q);

  ObservedField shifted = obs;
  Tensor qs = q;
  const double delta[2] = {0.37, -1.4};
  for (std::size_t i = 0; i < obs.X.dim(0); ++i)
    for (std::size_t j = 0; j < 2; ++j) shifted.X(i, j) += delta[j];
  for (std::size_t i = 0; i < q.dim(0); ++i)
    for (std::size_t j = 0; j < 2; ++j) qs(i, j) += delta[j];
  RbfGp gps = fit(hy, shifted);
  ConvolvedGpView views{&gps, &op};
  REQUIRE(sub(conv_mean(views, qs), mean).max_abs() <= 1e-10);
  REQUIRE(sub(conv_var_diag(views, qs), var).max_abs() <= 1e-10);
}

TEST_CASE("conv_mean is linear in the observations") {
  Rng rng(53);
  RbfHyper hy = RbfHyper::from_al(1.0, 0.35, 1);
  ObservedField obs = random_field(rng, 5, 2, 1, false);
  DiffusionOp op = random_op(rng, 2, 2, 2, 1);
  op.bias.fill(0.0);
  Tensor q = random_tensor({3, 1}, rng, 0.0, 1.0);

  RbfGp gp = fit(hy, obs);
  ConvolvedGpView view{&gp, &op};
  const Tensor mean = conv_mean(view, q);

  ObservedField scaled = obs;
  for (std::size_t i = 0; i < scaled.Y.numel(); ++i) scaled.Y[i] *= -2.0;
  RbfGp gp2 = fit(hy, scaled);
  ConvolvedGpView view2{&gp2, &op};
  const Tensor mean2 = conv_mean(view2, q);
  for (std::size_t i = 0; i < mean.numel(); ++i) REQUIRE(mean2[i] == -2.0 * mean[i]);
}

TEST_CASE("conv graph values agree with the direct evaluation") {
  Rng rng(54);
  RbfHyper hy = RbfHyper::from_al(1.05, 0.4, 1);
  for (bool shared : {true, false}) {
    ObservedField obs = random_field(rng, 5, 2, 1, shared);
    DiffusionOp op = random_op(rng, 2, 2, 2, 1);
    Tensor q = random_tensor({3, 1}, rng, 0.0, 1.0);
    RbfGp gp = fit(hy, obs);
    ConvolvedGpView view{&gp, &op};
    const Tensor mean = conv_mean(view, q);
    const Tensor var = conv_var_diag(view, q);

    ad::Tape tp;
    const ad::Var la = tp.leaf(Tensor::scalar(hy.log_a), true);
    const ad::Var ll = tp.leaf(Tensor::scalar(hy.log_l), true);
    auto d2 = std::make_shared<const Tensor>(pairwise_sqdist(obs.X, obs.X));
    auto offs = std::make_shared<const Tensor>(pairwise_offset(q, obs.X));
    GpGraph g = fit_graph(tp, la, ll, 1, d2, tp.leaf(obs.Y, true), tp.leaf(obs.V, true));
    REQUIRE(g.shared == shared);
    ConvGraph cg = conv_graph(tp, g, la, ll, 1, offs, tp.leaf(op.W, true),
                              tp.leaf(op.beta, true), tp.leaf(op.sigma_chol, true),
                              tp.leaf(op.bias, true), op.t, true);
    REQUIRE(sub(tp.val(cg.mean), mean).max_abs() <= 1e-9);
    REQUIRE(sub(tp.val(cg.var), var).max_abs() <= 1e-9);
  }
}

TEST_CASE("conv graph gradients match finite differences") {
  Rng rng(55);

  for (bool shared : {true, false}) {
    ObservedField obs = random_field(rng, 4, 2, 1, shared);
    DiffusionOp op = random_op(rng, 2, 2, 2, 1);
    Tensor q = random_tensor({2, 1}, rng, 0.0, 1.0);
    auto d2 = std::make_shared<const Tensor>(pairwise_sqdist(obs.X, obs.X));
    auto offs = std::make_shared<const Tensor>(pairwise_offset(q, obs.X));
    std::vector<Tensor> inputs = {Tensor::scalar(0.1), Tensor::scalar(-0.9), obs.Y, obs.V,
                                  op.W,                op.beta,              op.sigma_chol,
                                  op.bias};
    check_grad(inputs, [d2, offs](ad::Tape& t, const std::vector<ad::Var>& v) {
      GpGraph g = fit_graph(t, v[0], v[1], 1, d2, v[2], v[3]);
      ConvGraph cg = conv_graph(t, g, v[0], v[1], 1, offs, v[4], v[5], v[6], v[7], 1.0, true);
      return t.add(testsup::weighted(t, cg.mean, 11), testsup::weighted(t, cg.var, 12));
    });
  }

  // d=2 exercises the off-diagonal factor entries
  ObservedField obs = random_field(rng, 4, 1, 2, true);
  DiffusionOp op = random_op(rng, 2, 2, 1, 2);
  Tensor q = random_tensor({2, 2}, rng, 0.0, 1.0);
  auto d2 = std::make_shared<const Tensor>(pairwise_sqdist(obs.X, obs.X));
  auto offs = std::make_shared<const Tensor>(pairwise_offset(q, obs.X));
  std::vector<Tensor> inputs = {Tensor::scalar(0.05), Tensor::scalar(-0.8), obs.Y, obs.V,
                                op.W,                 op.beta,              op.sigma_chol,
                                op.bias};
  check_grad(inputs, [d2, offs](ad::Tape& t, const std::vector<ad::Var>& v) {
    GpGraph g = fit_graph(t, v[0], v[1], 2, d2, v[2], v[3]);
    ConvGraph cg = conv_graph(t, g, v[0], v[1], 2, offs, v[4], v[5], v[6], v[7], 1.0, true);
    return t.add(testsup::weighted(t, cg.mean, 13), testsup::weighted(t, cg.var, 14));
  });
}
