#include <cmath>

#include "aevb/errors.hpp"
#include "aevb/evalkit.hpp"
#include "aevb/objective.hpp"
#include "aevb/samplers.hpp"
#include "doctest.h"
#include "model_helpers.hpp"
#include "stat_helpers.hpp"

using namespace aevb;

namespace {

LogDensityFn standard_normal_target() {
  return [](std::span<const double> z, std::span<double> g) {
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      s += z[i] * z[i];
      g[i] = -z[i];
    }
    return -0.5 * s;
  };
}

// Standard error from non-overlapping batch means; robust to autocorrelation.
double batch_means_se(std::span<const double> v, std::size_t batches = 50) {
  const std::size_t len = v.size() / batches;
  Vector means(batches);
  for (std::size_t b = 0; b < batches; ++b) means[b] = aevb::testing::mean(v.subspan(b * len, len));
  return std::sqrt(aevb::testing::sample_variance(means) / static_cast<double>(batches));
}

LinearGaussian random_linear_decoder(std::size_t latent, std::size_t data, Rng& rng,
                                     double noise_var) {
  auto dec = LinearGaussian::zeros(latent, data);
  for (double& v : dec.w.flat()) v = rng.standard_normal();
  for (double& v : dec.b) v = 0.5 * rng.standard_normal();
  dec.log_noise_var[0] = std::log(noise_var);
  return dec;
}

}  // namespace

TEST_CASE("leapfrog is reversible") {
  const auto target = [](std::span<const double> z, std::span<double> g) {
    // A smooth non-Gaussian density: -sum(z^4)/4 - sum(z^2)/2.
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      s += 0.25 * std::pow(z[i], 4) + 0.5 * z[i] * z[i];
      g[i] = -std::pow(z[i], 3) - z[i];
    }
    return -s;
  };
  Rng rng(1);
  Vector z = rng.normal_vector(3), p = rng.normal_vector(3), g(3);
  const Vector z0 = z;
  target(z, g);
  leapfrog(target, z, p, g, 0.05, 25);
  for (double& v : p) v = -v;
  leapfrog(target, z, p, g, 0.05, 25);
  for (std::size_t i = 0; i < 3; ++i) CHECK(std::abs(z[i] - z0[i]) < 1e-8);
}

TEST_CASE("HMC on a 3-D standard normal reproduces its moments") {
  HmcConfig cfg;
  cfg.leapfrog_steps = 10;
  cfg.burn_in = 200;
  Rng rng(42);
  const auto res = hmc_sample(standard_normal_target(), Vector(3, 0.5), cfg, 10000, rng);
  for (std::size_t j = 0; j < 3; ++j) {
    Vector col(10000), sq(10000);
    for (std::size_t r = 0; r < 10000; ++r) {
      col[r] = res.samples(r, j);
      sq[r] = col[r] * col[r];
    }
    CHECK(std::abs(aevb::testing::mean(col)) < 4 * batch_means_se(col));
    CHECK(std::abs(aevb::testing::mean(sq) - 1.0) < 4 * batch_means_se(sq));
  }
}

TEST_CASE("HMC acceptance tends to one as the stepsize vanishes") {
  HmcConfig cfg;
  cfg.adapt = false;
  cfg.stepsize = 1e-4;
  cfg.burn_in = 10;
  Rng rng(3);
  const auto res = hmc_sample(standard_normal_target(), Vector{0.3, -1.0}, cfg, 2000, rng);
  CHECK(res.acceptance_rate >= 0.999);
}

TEST_CASE("stepsize tuner reaches the target acceptance within 200 iterations") {
  for (std::size_t dim : {1u, 5u, 20u}) {
    CAPTURE(dim);
    HmcConfig cfg;
    cfg.leapfrog_steps = 10;
    cfg.burn_in = 200;
    cfg.stepsize = 0.01;
    Rng rng(100 + dim);
    const auto res = hmc_sample(standard_normal_target(), Vector(dim, 0.0), cfg, 4000, rng);
    CHECK(res.acceptance_rate >= 0.85);
    CHECK(res.acceptance_rate <= 0.95);
  }
}

TEST_CASE("HMC binned samples pass a chi-squared test against the normal CDF") {
  HmcConfig cfg;
  cfg.thinning = 2;
  Rng rng(2024);
  const std::size_t n = 100000;
  const auto res = hmc_sample(standard_normal_target(), Vector{0.0}, cfg, n, rng);
  const int bins = 20;
  std::vector<double> counts(bins, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const int b = std::min(bins - 1, static_cast<int>(normal_cdf(res.samples(r, 0)) * bins));
    counts[b] += 1.0;
  }
  double chi2 = 0.0;
  const double expected = static_cast<double>(n) / bins;
  for (double c : counts) chi2 += (c - expected) * (c - expected) / expected;
  // 0.1% critical value of chi-squared with 19 degrees of freedom.
  CHECK(chi2 < 43.82);
}

TEST_CASE("HMC rejects a non-finite start and bad configurations") {
  const auto bad = [](std::span<const double>, std::span<double> g) {
    g[0] = 0.0;
    return std::numeric_limits<double>::quiet_NaN();
  };
  Rng rng(1);
  CHECK_THROWS_AS(hmc_sample(bad, Vector{0.0}, HmcConfig{}, 10, rng), NumericError);
  HmcConfig cfg;
  cfg.leapfrog_steps = 0;
  CHECK_THROWS_AS(hmc_sample(standard_normal_target(), Vector{0.0}, cfg, 10, rng), ParameterError);
}

TEST_CASE("fit_density") {
  SUBCASE("identical samples give a jittered but finite density") {
    Matrix s(6, 2, 1.5);
    const auto fd = fit_density(s);
    CHECK(std::isfinite(fd.log_density(Vector{1.5, 1.5})));
    CHECK(fd.covariance(0, 0) == doctest::Approx(kDensityJitter));
  }
  SUBCASE("too few samples") { CHECK_THROWS_AS(fit_density(Matrix(3, 2)), ContractError); }
  SUBCASE("recovers the mean of a correlated Gaussian") {
    Rng rng(5);
    const Vector mu{1.0, -2.0, 0.5};
    const Matrix l{{1.0, 0.0, 0.0}, {0.5, 0.8, 0.0}, {-0.3, 0.2, 0.4}};
    const std::size_t n = 100000;
    Matrix s(n, 3);
    for (std::size_t r = 0; r < n; ++r) {
      const Vector e = rng.normal_vector(3), v = matvec(l, e);
      for (std::size_t j = 0; j < 3; ++j) s(r, j) = mu[j] + v[j];
    }
    const auto fd = fit_density(s);
    const Matrix cov = matmul_bt(l, l);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(std::abs(fd.mean[j] - mu[j]) < 4 * std::sqrt(cov(j, j) / n));
      CHECK(fd.covariance(j, j) == doctest::Approx(cov(j, j) + kDensityJitter).epsilon(0.02));
    }
  }
  SUBCASE("log density at the mean") {
    Rng rng(6);
    const Matrix s = rng.normal_matrix(50, 3);
    const auto fd = fit_density(s);
    CHECK(fd.log_density(fd.mean) == doctest::Approx(-0.5 * (3 * kLog2Pi + fd.log_det)).epsilon(1e-14));
  }
}

TEST_CASE("ppca_loglik") {
  const Vector x{0.3, -1.2};
  CHECK(ppca_loglik(Matrix(2, 1), 1.0, x) ==
        doctest::Approx(gaussian_loglik(x, {Vector{0, 0}, Vector{0, 0}})).epsilon(1e-14));
  CHECK(ppca_loglik(Matrix{{1.0}}, 1.0, Vector{0.0}) == doctest::Approx(-0.5 * std::log(2 * M_PI * 2)).epsilon(1e-14));
  CHECK(ppca_loglik(Matrix{{1.0}}, 1.0, Vector{0.0}) == doctest::Approx(-1.265512123484645).epsilon(1e-12));
  CHECK_THROWS_AS(ppca_loglik(Matrix{{1.0}}, 0.0, Vector{0.0}), ParameterError);

  // Quadrature over a 2-D latent grid.
  Rng rng(8);
  const Matrix w = rng.normal_matrix(3, 2);
  const double nv = 0.7;
  for (int t = 0; t < 3; ++t) {
    const Vector xt = rng.normal_vector(3);
    const int n = 801;
    const double lo = -8.0, step = 16.0 / (n - 1);
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      for (int j = 0; j < n; ++j) {
        const double z0 = lo + i * step, z1 = lo + j * step;
        double lp = -kLog2Pi - 0.5 * (z0 * z0 + z1 * z1);
        for (int d = 0; d < 3; ++d) {
          const double m = w(d, 0) * z0 + w(d, 1) * z1;
          lp += -0.5 * std::log(2 * M_PI * nv) - (xt[d] - m) * (xt[d] - m) / (2 * nv);
        }
        const double wt = (i == 0 || i == n - 1 ? 0.5 : 1.0) * (j == 0 || j == n - 1 ? 0.5 : 1.0);
        acc += wt * std::exp(lp);
      }
    }
    CHECK(std::abs(ppca_loglik(w, nv, xt) - std::log(acc * step * step)) < 1e-3);
  }
}

TEST_CASE("posterior log density gradient matches finite differences") {
  Rng rng(9);
  const VaeModel m = aevb::testing::random_model({6, 4, 5, 3, DecoderFamily::Bernoulli, false}, rng);
  const Vector x = aevb::testing::random_datapoint(DecoderFamily::Bernoulli, 6, rng);
  const auto f = posterior_log_density(m.decoder, x);
  const Vector z = rng.normal_vector(3);
  Vector g(3), scratch(3);
  f(z, g);
  const Vector fd = finite_diff_grad([&](std::span<const double> v) { return f(v, scratch); }, z, 1e-5);
  for (std::size_t j = 0; j < 3; ++j) CHECK(aevb::testing::relative_error(g[j], fd[j]) < 1e-6);
}

TEST_CASE("marginal likelihood: decoder constant in z") {
  auto dec = LinearGaussian::zeros(2, 3);
  dec.b = {0.2, -0.1, 0.4};
  const Decoder d = dec;
  const Vector x{0.5, 0.0, -0.3};
  const double exact = gaussian_loglik(x, {dec.b, Vector(3, 0.0)});
  HmcConfig cfg;
  cfg.leapfrog_steps = 4;
  Rng rng(10);
  // The inverse-weighted mean is exact only when the fitted q equals the
  // prior; the residual shrinks like 1/L.
  const auto est = marginal_loglik_estimate(d, x, 200000, cfg, rng);
  CHECK(std::abs(est.log_marginal - exact) < 1e-4);
  CHECK(!est.warning);
}

TEST_CASE("marginal likelihood on a 2-latent linear-Gaussian decoder") {
  Rng rng(11);
  const auto lin = random_linear_decoder(2, 10, rng, 0.5);
  const Decoder d = lin;
  const HmcConfig cfg = mll_hmc_defaults();
  int close = 0;
  const int points = 20;
  for (int i = 0; i < points; ++i) {
    const Vector z = rng.normal_vector(2);
    Vector x = matvec(lin.w, z);
    for (std::size_t k = 0; k < x.size(); ++k) x[k] += lin.b[k] + std::sqrt(0.5) * rng.standard_normal();
    const double exact = ppca_loglik(lin.w, 0.5, lin.b, x);
    const auto est = marginal_loglik_estimate(d, x, 50, cfg, rng);
    if (std::abs(est.log_marginal - exact) < 0.1) ++close;
  }
  CHECK(close >= 18);
}

TEST_CASE("marginal likelihood: degenerate sample counts and large latent spaces") {
  Rng rng(12);
  const auto lin = random_linear_decoder(2, 4, rng, 0.5);
  HmcConfig cfg;
  cfg.leapfrog_steps = 4;
  const Vector x{0.1, 0.2, -0.3, 0.4};
  const auto one = marginal_loglik_estimate(lin, x, 1, cfg, rng, 200);
  CHECK(std::isfinite(one.log_marginal));
  CHECK_THROWS_AS(marginal_loglik_estimate(lin, x, 0, cfg, rng), ContractError);

  const auto wide = random_linear_decoder(6, 4, rng, 0.5);
  const auto est = marginal_loglik_estimate(wide, x, 20, cfg, rng);
  CHECK(est.warning.has_value());
  CHECK(std::isfinite(est.log_marginal));
}

TEST_CASE("the estimator B bound stays below the exact log-likelihood") {
  Rng rng(13);
  VaeModel m = aevb::testing::random_model({5, 6, 0, 2, DecoderFamily::LinearGaussian, false}, rng, 0.4);
  auto& lin = std::get<LinearGaussian>(m.decoder);
  lin.log_noise_var[0] = std::log(0.3);
  for (int t = 0; t < 5; ++t) {
    const Vector x = rng.normal_vector(5);
    const auto est = sgvb_b(m, x, rng.normal_matrix(10000, 2));
    const double se = aevb::testing::standard_error(est.per_sample_values);
    CHECK(est.value <= ppca_loglik(lin.w, lin.noise_var(), lin.b, x) + 3 * se);
  }
}

TEST_CASE("marginal likelihood does not depend on the burn-in length") {
  Rng rng(14);
  const auto lin = random_linear_decoder(2, 6, rng, 0.5);
  const Vector x = rng.normal_vector(6);
  HmcConfig cfg = mll_hmc_defaults();
  Vector base(30), doubled(30);
  for (std::size_t r = 0; r < 30; ++r) base[r] = marginal_loglik_estimate(lin, x, 50, cfg, rng).log_marginal;
  cfg.burn_in *= 2;
  for (std::size_t r = 0; r < 30; ++r) doubled[r] = marginal_loglik_estimate(lin, x, 50, cfg, rng).log_marginal;
  const double se = std::hypot(aevb::testing::standard_error(base), aevb::testing::standard_error(doubled));
  CHECK(std::abs(aevb::testing::mean(base) - aevb::testing::mean(doubled)) < 3 * se);
}
