#include <catch2/catch_amalgamated.hpp>
#include <cmath>
#include <vector>

#include "pncnn/linalg.hpp"
#include "pncnn/rectified.hpp"
#include "pncnn/rng.hpp"
#include "pncnn/special.hpp"
#include "support.hpp"

using namespace pncnn;
using testsup::random_spd;
using testsup::random_tensor;

namespace {

BivariateGaussian random_bg(Rng& rng, double mu_span = 2.0, double vlo = 0.2, double vhi = 2.5,
                            double rho_max = 0.95) {
  const double m1 = -mu_span + 2.0 * mu_span * rng.uniform();
  const double m2 = -mu_span + 2.0 * mu_span * rng.uniform();
  const double v1 = vlo + (vhi - vlo) * rng.uniform();
  const double v2 = vlo + (vhi - vlo) * rng.uniform();
  const double rho = -rho_max + 2.0 * rho_max * rng.uniform();
  return BivariateGaussian::make(m1, m2, v1, rho * std::sqrt(v1 * v2), v2);
}

}  // namespace

TEST_CASE("bivariate gaussian construction guards") {
  REQUIRE_NOTHROW(BivariateGaussian::make(0.1, -0.4, 1.0, 0.5, 2.0));
  REQUIRE_NOTHROW(BivariateGaussian::make(0.0, 0.0, 1.0, 1.0 + 1e-13, 1.0));
  REQUIRE_THROWS_AS(BivariateGaussian::make(0.0, 0.0, 1.0, 1.5, 1.0), NotPositiveDefinite);
  REQUIRE_THROWS_AS(BivariateGaussian::make(0.0, 0.0, -0.1, 0.0, 1.0), NotPositiveDefinite);
}

TEST_CASE("independent rectified channels factorize") {
  const BivariateGaussian iso = BivariateGaussian::make(0.0, 0.0, 1.0, 0.0, 1.0);
  REQUIRE(relu_cross_moment(iso) == Catch::Approx(0.15915494309189535).margin(1e-10));

  const BivariateGaussian bg = BivariateGaussian::make(-0.3, 0.7, 1.3, 0.0, 0.6);
  const ReluMoments a = relu_mean_var(-0.3, 1.3), b = relu_mean_var(0.7, 0.6);
  REQUIRE(relu_cross_moment(bg) == Catch::Approx(a.mean * b.mean).margin(1e-9));
}

TEST_CASE("comonotone correlation approaches the same-point second moment") {
  const BivariateGaussian bg = BivariateGaussian::make(0.0, 0.0, 1.0, 0.99, 1.0);
  REQUIRE(relu_cross_moment(bg) == Catch::Approx(0.5).margin(0.01));
}

TEST_CASE("cross moment matches Monte Carlo across random instances") {
  Rng rng(901);
  for (int rep = 0; rep < 100; ++rep) {
    const BivariateGaussian bg = random_bg(rng);
    const double cross = relu_cross_moment(bg);
    const RectifiedSample mc = mc_rectified_oracle(bg, 200000, 7000 + (std::uint64_t)rep);
    INFO("rep " << rep << " mu=(" << bg.mu1 << "," << bg.mu2 << ") s=(" << bg.s11 << ","
                << bg.s12 << "," << bg.s22 << ")");
    // the 1e-9 absolute guard covers instances where no joint-positive draw
    // occurs at all, leaving a zero plug-in standard error
    REQUIRE(std::fabs(cross - mc.e12) <= 4.0 * mc.se12 + 1e-9);
    REQUIRE(std::fabs(relu_mean_var(bg.mu1, bg.s11).mean - mc.e1) <= 4.0 * mc.se1 + 1e-9);
    REQUIRE(std::fabs(relu_mean_var(bg.mu2, bg.s22).mean - mc.e2) <= 4.0 * mc.se2 + 1e-9);
  }
}

TEST_CASE("cross moment reaches absolute tolerance on heavy runs") {
  Rng rng(902);
  for (int rep = 0; rep < 3; ++rep) {
    const BivariateGaussian bg = random_bg(rng, 1.0, 0.3, 1.0, 0.9);
    const RectifiedSample mc = mc_rectified_oracle(bg, 10000000, 7100 + (std::uint64_t)rep);
    REQUIRE(relu_cross_moment(bg) == Catch::Approx(mc.e12).margin(1e-3));
  }
}

TEST_CASE("oracle self-check and reproducibility") {
  const BivariateGaussian iso = BivariateGaussian::make(0.0, 0.0, 1.0, 0.0, 1.0);
  const RectifiedSample a = mc_rectified_oracle(iso, 1000000, 55);
  REQUIRE(std::fabs(a.e1 - 0.3989423) <= 3.0 * a.se1);
  REQUIRE(std::fabs(a.e2 - 0.3989423) <= 3.0 * a.se2);

  const RectifiedSample b = mc_rectified_oracle(iso, 1000000, 55);
  REQUIRE(a.e1 == b.e1);
  REQUIRE(a.e2 == b.e2);
  REQUIRE(a.e12 == b.e12);
  REQUIRE(a.se12 == b.se12);
  const RectifiedSample c = mc_rectified_oracle(iso, 1000000, 56);
  REQUIRE(a.e12 != c.e12);

  REQUIRE_THROWS_AS(mc_rectified_oracle(iso, 100, 1), ShapeMismatch);
}

TEST_CASE("rectified moments satisfy Cauchy-Schwarz") {
  Rng rng(903);
  for (int rep = 0; rep < 50; ++rep) {
    const BivariateGaussian bg = random_bg(rng);
    const ReluMoments a = relu_mean_var(bg.mu1, bg.s11), b = relu_mean_var(bg.mu2, bg.s22);
    const double m2a = a.var + a.mean * a.mean, m2b = b.var + b.mean * b.mean;
    const double cross = relu_cross_moment(bg);
    REQUIRE(cross * cross <= m2a * m2b + 1e-9);
  }
}

TEST_CASE("three-point rectified covariance stays PSD") {
  Rng rng(904);
  for (int rep = 0; rep < 20; ++rep) {
    const Tensor k = random_spd(3, rng);
    const Tensor mu = random_tensor({3}, rng, -1.5, 1.5);
    Tensor cov{{3, 3}};
    std::vector<double> means(3);
    for (std::size_t i = 0; i < 3; ++i) {
      const ReluMoments m = relu_mean_var(mu[i], k(i, i));
      means[i] = m.mean;
      cov(i, i) = m.var;
    }
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = i + 1; j < 3; ++j) {
        const BivariateGaussian bg =
            BivariateGaussian::make(mu[i], mu[j], k(i, i), k(i, j), k(j, j));
        cov(i, j) = cov(j, i) = relu_cross_moment(bg) - means[i] * means[j];
      }
    const auto [evals, evecs] = jacobi_eigh(cov);
    for (std::size_t i = 0; i < 3; ++i) REQUIRE(evals(i) >= -1e-8);
  }
}

TEST_CASE("rectified mean is monotone") {
  double prev = -1.0;
  for (double mu = -3.0; mu <= 3.0; mu += 0.25) {
    const double m = relu_mean_var(mu, 0.64).mean;
    REQUIRE(m >= prev);
    prev = m;
  }
  prev = 0.0;
  for (double sd = 0.1; sd <= 2.0; sd += 0.1) {
    const double m = relu_mean_var(-0.7, sd * sd).mean;
    REQUIRE(m >= prev);
    prev = m;
  }
}

TEST_CASE("rectified moment derivatives match finite differences") {
  // the analytic forms used on the training path
  const double h = 1e-6;
  for (auto [mu, var] : {std::pair{0.4, 0.9}, {-1.1, 0.5}, {0.0, 1.7}, {2.2, 0.3}}) {
    const double sd = std::sqrt(var);
    const double t = mu / sd;
    const ReluMoments m0 = relu_mean_var(mu, var);

    const double dmean_dmu = normal_cdf(t);
    const double dmean_dvar = normal_pdf(t) / (2.0 * sd);
    const double dvar_dmu = 2.0 * m0.mean * (1.0 - normal_cdf(t));
    const double dvar_dvar = normal_cdf(t) - m0.mean * normal_pdf(t) / sd;

    const ReluMoments mup = relu_mean_var(mu + h, var), mum = relu_mean_var(mu - h, var);
    const ReluMoments vup = relu_mean_var(mu, var + h), vdn = relu_mean_var(mu, var - h);
    REQUIRE((mup.mean - mum.mean) / (2 * h) ==
            Catch::Approx(dmean_dmu).epsilon(1e-4).margin(1e-6));
    REQUIRE((vup.mean - vdn.mean) / (2 * h) ==
            Catch::Approx(dmean_dvar).epsilon(1e-4).margin(1e-6));
    REQUIRE((mup.var - mum.var) / (2 * h) == Catch::Approx(dvar_dmu).epsilon(1e-4).margin(1e-6));
    REQUIRE((vup.var - vdn.var) / (2 * h) == Catch::Approx(dvar_dvar).epsilon(1e-4).margin(1e-6));
  }
}

TEST_CASE("degenerate covariances are refused") {
  REQUIRE_THROWS_AS(relu_cross_moment(BivariateGaussian::make(0.3, 0.3, 1.0, 1.0, 1.0)),
                    DegenerateSigma);
  REQUIRE_THROWS_AS(relu_cross_moment(BivariateGaussian::make(0.0, 0.0, 0.0, 0.0, 1.0)),
                    DegenerateSigma);
  REQUIRE_THROWS_AS(relu_cross_moment(BivariateGaussian::make(0.0, 0.0, 1.0, -1.0, 1.0)),
                    DegenerateSigma);
}
