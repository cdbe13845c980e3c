#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>

#include "aevb/networks.hpp"
#include "aevb/numkit.hpp"

namespace aevb {

// Writes d log p / dz into grad and returns log p(z).
using LogDensityFn = std::function<double(std::span<const double> z, std::span<double> grad)>;

struct HmcConfig {
  std::size_t leapfrog_steps = 10;
  double stepsize = 0.1;            // starting value when adapting
  double target_acceptance = 0.90;
  std::size_t burn_in = 200;
  std::size_t thinning = 1;
  bool adapt = true;                // tune the stepsize during burn-in
  double adapt_rate = 0.05;         // kappa in stepsize *= exp(kappa * (acc - target))
  std::size_t max_divergent = 100;  // consecutive non-finite proposals before giving up
  // Each transition uses stepsize * U(1 - jitter, 1 + jitter). A fixed
  // trajectory length can sit near a half period of a Gaussian target and
  // then barely changes the radius between samples.
  double stepsize_jitter = 0.5;

  void validate() const;
};

// Leapfrog integration with unit mass. z, p and grad (d log p / dz at z) are
// updated in place; returns log p at the final position.
double leapfrog(const LogDensityFn& log_density, std::span<double> z, std::span<double> p,
                std::span<double> grad, double stepsize, std::size_t steps);

struct HmcTransition {
  double accept_prob = 0.0;  // min(1, exp(-dH)); 0 for a non-finite Hamiltonian
  bool accepted = false;
  bool finite = true;
};

// One HMC transition from z (whose log density and gradient are cached in
// log_p and grad). On acceptance z, log_p and grad are replaced.
HmcTransition hmc_transition(const LogDensityFn& log_density, Vector& z, double& log_p,
                             Vector& grad, double stepsize, std::size_t steps, Rng& rng);

// Multiplicative stepsize tuning toward a target acceptance rate.
class StepsizeTuner {
 public:
  StepsizeTuner(double stepsize, double target, double rate)
      : stepsize_(stepsize), target_(target), rate_(rate) {}

  void update(double accept_prob);
  double stepsize() const noexcept { return stepsize_; }

 private:
  double stepsize_;
  double target_;
  double rate_;
};

// Doubles or halves the stepsize from `start` until the average acceptance
// probability of a few trial trajectories from z crosses `target`.
double initial_stepsize(const LogDensityFn& log_density, std::span<const double> z, double start,
                        double target, std::size_t steps, Rng& rng);

struct HmcResult {
  Matrix samples;               // n x dim, post burn-in, thinned
  double acceptance_rate = 0.0; // fraction of accepted post-burn-in proposals
  double stepsize = 0.0;        // stepsize used after burn-in
  Vector last;                  // final chain state
};

HmcResult hmc_sample(const LogDensityFn& log_density, std::span<const double> z0,
                     const HmcConfig& cfg, std::size_t n, Rng& rng);

// Full-covariance Gaussian fitted to samples by moments.
struct FittedDensity {
  Vector mean;
  Matrix covariance;  // includes the diagonal jitter
  Matrix cholesky;    // lower triangular
  double log_det = 0.0;

  double log_density(std::span<const double> z) const;
};

inline constexpr double kDensityJitter = 1e-6;

// Requires at least dim + 2 samples (rows).
FittedDensity fit_density(const Matrix& samples);

// Lower Cholesky factor; throws NumericError if a is not positive definite.
Matrix cholesky(const Matrix& a);
// log N(x; mean, cov) for the factor L of cov.
double gaussian_log_density_chol(std::span<const double> x, std::span<const double> mean,
                                 const Matrix& chol);

// log N(x; 0, W W^T + noise_var I).
double ppca_loglik(const Matrix& w, double noise_var, std::span<const double> x);
// log N(x; mean, W W^T + noise_var I).
double ppca_loglik(const Matrix& w, double noise_var, std::span<const double> mean,
                   std::span<const double> x);

// log p(z) + log p(x|z) for the decoder with its gradient in z.
LogDensityFn posterior_log_density(const Decoder& decoder, std::span<const double> x);

struct MarginalEstimate {
  double log_marginal = 0.0;
  std::optional<std::string> warning;  // set when the latent space is too large
  double acceptance_rate = 0.0;
  double stepsize = 0.0;
};

inline constexpr std::size_t kMaxReliableLatentDim = 5;

// Sampler settings for marginal likelihood runs: 4 leapfrog steps, and every
// 5th state kept so the 50-sample estimate sees nearly independent draws.
HmcConfig mll_hmc_defaults();

// Posterior-sample / fitted-density / inverse-weighted-mean estimate of
// log p(x). Stage 1 draws fit_samples posterior samples (default: L, at
// least dim + 2) with stepsize adaptation, stage 2 fits a Gaussian, stage 3
// continues the chain without adaptation for L fresh samples.
MarginalEstimate marginal_loglik_estimate(const Decoder& decoder, std::span<const double> x,
                                          std::size_t samples, const HmcConfig& cfg, Rng& rng,
                                          std::size_t fit_samples = 0);

}  // namespace aevb
