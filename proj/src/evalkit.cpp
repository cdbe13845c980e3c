#include "aevb/evalkit.hpp"

#include <cmath>
#include <memory>

#include "aevb/errors.hpp"

namespace aevb {

void HmcConfig::validate() const {
  if (leapfrog_steps == 0 || thinning == 0) {
    throw ParameterError("HmcConfig: leapfrog_steps and thinning must be positive");
  }
  if (!(stepsize > 0)) throw ParameterError("HmcConfig: stepsize must be positive");
  if (!(stepsize_jitter >= 0 && stepsize_jitter < 1)) {
    throw ParameterError("HmcConfig: stepsize_jitter must lie in [0, 1)");
  }
  if (!(target_acceptance > 0 && target_acceptance < 1)) {
    throw ParameterError("HmcConfig: target_acceptance must lie in (0, 1)");
  }
}

double leapfrog(const LogDensityFn& log_density, std::span<double> z, std::span<double> p,
                std::span<double> grad, double stepsize, std::size_t steps) {
  double log_p = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) p[i] += 0.5 * stepsize * grad[i];
  for (std::size_t s = 0; s < steps; ++s) {
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += stepsize * p[i];
    log_p = log_density(z, grad);
    const double scale = (s + 1 == steps) ? 0.5 * stepsize : stepsize;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] += scale * grad[i];
  }
  return log_p;
}

HmcTransition hmc_transition(const LogDensityFn& log_density, Vector& z, double& log_p,
                             Vector& grad, double stepsize, std::size_t steps, Rng& rng) {
  Vector p = rng.normal_vector(z.size());
  const double h0 = -log_p + 0.5 * squared_norm(p);
  Vector z1 = z, g1 = grad;
  double lp1 = NAN;
  try {
    lp1 = leapfrog(log_density, z1, p, g1, stepsize, steps);
  } catch (const NumericError&) {
    // a trajectory that leaves the finite region is just a rejected proposal
  }
  const double h1 = -lp1 + 0.5 * squared_norm(p);
  const double u = rng.uniform();

  HmcTransition t;
  bool grads_finite = true;
  for (double g : g1) grads_finite = grads_finite && std::isfinite(g);
  if (!std::isfinite(h1) || !grads_finite) {
    t.finite = false;
    return t;
  }
  t.accept_prob = std::min(1.0, std::exp(h0 - h1));
  if (u < t.accept_prob) {
    t.accepted = true;
    z = std::move(z1);
    grad = std::move(g1);
    log_p = lp1;
  }
  return t;
}

void StepsizeTuner::update(double accept_prob) {
  stepsize_ *= std::exp(rate_ * (accept_prob - target_));
}

double initial_stepsize(const LogDensityFn& log_density, std::span<const double> z, double start,
                        double target, std::size_t steps, Rng& rng) {
  constexpr int kTrials = 4;
  Vector grad(z.size());
  const double lp0 = log_density(z, grad);
  const auto mean_accept = [&](double eps) {
    double acc = 0.0;
    for (int t = 0; t < kTrials; ++t) {
      Vector zc(z.begin(), z.end()), g = grad;
      double lp = lp0;
      acc += hmc_transition(log_density, zc, lp, g, eps, steps, rng).accept_prob;
    }
    return acc / kTrials;
  };
  double eps = start;
  const bool grow = mean_accept(eps) > target;
  for (int i = 0; i < 50; ++i) {
    const double next = grow ? 2.0 * eps : 0.5 * eps;
    const double a = mean_accept(next);
    if (grow && a < target) break;  // keep the last stepsize that met the target
    eps = next;
    if (!grow && a > target) break;
  }
  return eps;
}

HmcResult hmc_sample(const LogDensityFn& log_density, std::span<const double> z0,
                     const HmcConfig& cfg, std::size_t n, Rng& rng) {
  cfg.validate();
  Vector z(z0.begin(), z0.end());
  Vector grad(z.size());
  double log_p = log_density(z, grad);
  bool ok = std::isfinite(log_p);
  for (double g : grad) ok = ok && std::isfinite(g);
  if (!ok) throw NumericError("hmc_sample", "log density or gradient not finite at z0");

  double stepsize = cfg.stepsize;
  if (cfg.adapt) {
    stepsize = initial_stepsize(log_density, z, stepsize, cfg.target_acceptance,
                                cfg.leapfrog_steps, rng);
  }
  StepsizeTuner tuner(stepsize, cfg.target_acceptance, cfg.adapt_rate);
  std::size_t divergent = 0;
  const auto step = [&](double eps) {
    if (cfg.stepsize_jitter > 0) eps *= 1.0 + cfg.stepsize_jitter * (2.0 * rng.uniform() - 1.0);
    auto t = hmc_transition(log_density, z, log_p, grad, eps, cfg.leapfrog_steps, rng);
    divergent = t.finite ? 0 : divergent + 1;
    if (divergent >= cfg.max_divergent) {
      throw NumericError("hmc_sample", "persistent non-finite Hamiltonian");
    }
    return t;
  };

  for (std::size_t i = 0; i < cfg.burn_in; ++i) {
    const auto t = step(tuner.stepsize());
    if (cfg.adapt) tuner.update(t.accept_prob);
  }

  HmcResult res;
  res.stepsize = tuner.stepsize();
  res.samples = Matrix(n, z.size());
  std::size_t accepted = 0, total = 0;
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t t = 0; t < cfg.thinning; ++t) {
      accepted += step(res.stepsize).accepted ? 1 : 0;
      ++total;
    }
    std::copy(z.begin(), z.end(), res.samples.row(k).begin());
  }
  res.acceptance_rate = total ? static_cast<double>(accepted) / static_cast<double>(total) : 0.0;
  res.last = std::move(z);
  return res;
}

Matrix cholesky(const Matrix& a) {
  if (a.rows() != a.cols()) throw ContractError("cholesky: matrix must be square");
  const std::size_t n = a.rows();
  Matrix l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (!(d > 0) || !std::isfinite(d)) {
      throw NumericError("cholesky", "matrix not positive definite at pivot " + std::to_string(j));
    }
    l(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return l;
}

double gaussian_log_density_chol(std::span<const double> x, std::span<const double> mean,
                                 const Matrix& chol) {
  const std::size_t n = chol.rows();
  if (x.size() != n || mean.size() != n) {
    throw ContractError("gaussian log density: dimension mismatch");
  }
  // Forward substitution L y = x - mean.
  Vector y(n);
  double log_det = 0.0, quad = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = x[i] - mean[i];
    for (std::size_t k = 0; k < i; ++k) s -= chol(i, k) * y[k];
    y[i] = s / chol(i, i);
    quad += y[i] * y[i];
    log_det += 2.0 * std::log(chol(i, i));
  }
  return -0.5 * (static_cast<double>(n) * kLog2Pi + log_det + quad);
}

double FittedDensity::log_density(std::span<const double> z) const {
  return gaussian_log_density_chol(z, mean, cholesky);
}

FittedDensity fit_density(const Matrix& samples) {
  const std::size_t n = samples.rows(), d = samples.cols();
  if (d == 0) throw ContractError("fit_density: zero-dimensional samples");
  if (n < d + 2) {
    throw ContractError("fit_density: need at least " + std::to_string(d + 2) + " samples, got " +
                        std::to_string(n));
  }
  FittedDensity fd;
  fd.mean.assign(d, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) fd.mean[j] += samples(r, j);
  for (double& m : fd.mean) m /= static_cast<double>(n);
  fd.covariance = Matrix(d, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j)
        fd.covariance(i, j) += (samples(r, i) - fd.mean[i]) * (samples(r, j) - fd.mean[j]);
  for (double& c : fd.covariance.flat()) c /= static_cast<double>(n - 1);
  for (std::size_t i = 0; i < d; ++i) fd.covariance(i, i) += kDensityJitter;
  fd.cholesky = cholesky(fd.covariance);
  for (std::size_t i = 0; i < d; ++i) fd.log_det += 2.0 * std::log(fd.cholesky(i, i));
  return fd;
}

double ppca_loglik(const Matrix& w, double noise_var, std::span<const double> mean,
                   std::span<const double> x) {
  if (!(noise_var > 0)) throw ParameterError("ppca_loglik: noise variance must be positive");
  if (w.rows() != x.size() || mean.size() != x.size()) {
    throw ContractError("ppca_loglik: W has " + std::to_string(w.rows()) + " rows, x has " +
                        std::to_string(x.size()) + " entries");
  }
  Matrix cov = matmul_bt(w, w);
  for (std::size_t i = 0; i < cov.rows(); ++i) cov(i, i) += noise_var;
  Matrix chol;
  try {
    chol = cholesky(cov);
  } catch (const NumericError&) {
    throw std::logic_error("ppca_loglik: covariance not positive definite");
  }
  return gaussian_log_density_chol(x, mean, chol);
}

double ppca_loglik(const Matrix& w, double noise_var, std::span<const double> x) {
  const Vector zero(x.size(), 0.0);
  return ppca_loglik(w, noise_var, zero, x);
}

LogDensityFn posterior_log_density(const Decoder& decoder, std::span<const double> x) {
  const std::size_t d = x.size();
  if (decoder_output_dim(decoder) != d) {
    throw ContractError("posterior_log_density: datapoint size does not match decoder output");
  }
  Matrix xm(1, d, Vector(x.begin(), x.end()));
  auto dec = std::make_shared<const Decoder>(decoder);
  return [dec, xm](std::span<const double> z, std::span<double> grad) {
    Matrix zm(1, z.size(), Vector(z.begin(), z.end()));
    Matrix dz;
    const double ll = decoder_loglik(*dec, zm, xm, {}, nullptr, &dz)[0];
    double log_prior = -0.5 * static_cast<double>(z.size()) * kLog2Pi;
    for (std::size_t j = 0; j < z.size(); ++j) {
      log_prior -= 0.5 * z[j] * z[j];
      grad[j] = dz(0, j) - z[j];
    }
    return log_prior + ll;
  };
}

HmcConfig mll_hmc_defaults() {
  HmcConfig cfg;
  cfg.leapfrog_steps = 4;
  cfg.thinning = 5;
  return cfg;
}

MarginalEstimate marginal_loglik_estimate(const Decoder& decoder, std::span<const double> x,
                                          std::size_t samples, const HmcConfig& cfg, Rng& rng,
                                          std::size_t fit_samples) {
  if (samples == 0) throw ContractError("marginal_loglik_estimate: need at least one sample");
  const std::size_t dim = decoder_input_dim(decoder);
  MarginalEstimate out;
  if (dim > kMaxReliableLatentDim) {
    out.warning = "latent dimension " + std::to_string(dim) +
                  " exceeds 5; the marginal likelihood estimate is unreliable";
  }
  if (fit_samples == 0) fit_samples = std::max(samples, dim + 2);

  const auto log_post = posterior_log_density(decoder, x);
  const Vector z0(dim, 0.0);
  const HmcResult stage1 = hmc_sample(log_post, z0, cfg, fit_samples, rng);
  FittedDensity q;
  try {
    q = fit_density(stage1.samples);
  } catch (const NumericError& e) {
    throw NumericError("marginal_loglik_estimate", std::string("degenerate density fit: ") + e.what());
  }

  HmcConfig fresh = cfg;
  fresh.adapt = false;
  fresh.burn_in = 0;
  fresh.stepsize = stage1.stepsize;
  const HmcResult stage3 = hmc_sample(log_post, stage1.last, fresh, samples, rng);

  Vector terms(samples);
  Vector grad(dim);
  for (std::size_t l = 0; l < samples; ++l) {
    const auto z = stage3.samples.row(l);
    terms[l] = q.log_density(z) - log_post(z, grad);
  }
  out.log_marginal = -(log_sum_exp(terms) - std::log(static_cast<double>(samples)));
  out.acceptance_rate = stage3.acceptance_rate;
  out.stepsize = stage1.stepsize;
  return out;
}

}  // namespace aevb
