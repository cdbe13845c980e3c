#pragma once

#include <cstddef>
#include <span>

#include "aevb/networks.hpp"
#include "aevb/numkit.hpp"

namespace aevb {

// A Monte Carlo lower-bound estimate for one datapoint.
struct BoundEstimate {
  double value = 0.0;            // nats
  Vector per_sample_values;      // one term per noise draw
  std::size_t n_samples = 0;
  double analytic_component = 0.0;  // the -KL term for estimator B, 0 for A
};

// -KL(N(mu, sigma^2) || N(0, I)) = 1/2 sum_j (1 + log sigma_j^2 - mu_j^2 - sigma_j^2).
double kl_gauss_prior(const GaussianParams& p);

// Generic estimator: mean over l of log p(z_l) + log p(x|z_l) - log q(z_l|x)
// with z_l = mu + sigma * eps_l. eps holds one noise vector per row.
BoundEstimate sgvb_a(const VaeModel& model, std::span<const double> x, const Matrix& eps);

// Analytic KL plus the mean over l of log p(x|z_l).
BoundEstimate sgvb_b(const VaeModel& model, std::span<const double> x, const Matrix& eps);

// (N / M) * sum of the M per-datapoint estimates.
double minibatch_bound(std::span<const double> per_point, std::size_t dataset_size);

}  // namespace aevb
