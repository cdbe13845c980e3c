#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "aevb/evalkit.hpp"
#include "aevb/train.hpp"

namespace aevb {

enum class Algorithm { Aevb, WakeSleep, Mcem };

std::string algorithm_name(Algorithm a);
Algorithm parse_algorithm(const std::string& s);

// ---- wake-sleep ----

struct WakeSleepDiagnostics {
  double wake_objective = 0.0;   // mean log p(x|z), z ~ q(z|x)
  double sleep_objective = 0.0;  // mean log q(z|x~), (z, x~) ~ p
};

// Wake gradient: (N / M) * sum_i d/dtheta log p(x_i|z_i) at the given z
// (one row per datapoint), plus decay when requested. Only the decoder part
// of the returned model is non-zero.
VaeModel wake_gradient(const VaeModel& model, const Matrix& x, const Matrix& z,
                       std::size_t dataset_size, bool weight_decay, double* objective = nullptr);

// Sleep gradient: (N / M) * sum_i d/dphi log q(z_i|x_i) for dreamed pairs.
// Only the encoder part is non-zero.
VaeModel sleep_gradient(const VaeModel& model, const Matrix& x_dream, const Matrix& z_dream,
                        std::size_t dataset_size, double* objective = nullptr);

// One wake phase then one sleep phase (one dream per datapoint), each
// followed by an Adagrad step with the shared accumulator.
WakeSleepDiagnostics wake_sleep_step(TrainState& state, const Matrix& batch,
                                     std::size_t dataset_size, bool weight_decay, Rng& rng);

TrainState train_wake_sleep(const Matrix& train_x, const Matrix* test_x, const VaeShape& shape,
                            const TrainConfig& cfg, const TrainHooks& hooks = {},
                            std::optional<TrainState> resume = std::nullopt);

// ---- Monte Carlo EM ----

struct McemConfig {
  HmcConfig hmc;                    // 10 leapfrog steps, 0.9 target by default
  std::size_t updates_per_sample = 5;
  std::size_t adapt_iterations = 200;  // tuner active for this many steps
  std::size_t max_retries = 10;     // stepsize halvings for a diverging chain
  double anneal_scale = 1e4;        // stepsize / sqrt(1 + t / scale)
  bool update_decoder = true;
  std::size_t eval_samples = 50;    // L for the marginal likelihood metric

  void validate() const;
};

// One HMC transition for each row of z under log p(z) + log p(x_r|z_r),
// sharing one stepsize. Rows whose trajectory turns non-finite are retried
// with fresh momentum and half the stepsize, up to max_retries times.
// Returns the mean acceptance probability.
double batch_hmc_transition(const Decoder& decoder, const Matrix& x, Matrix& z, double stepsize,
                            std::size_t leapfrog_steps, std::size_t max_retries, Rng& rng);

// Doubles or halves mcfg.hmc.stepsize until one batched transition from z
// crosses the target acceptance; z is left untouched.
double initial_batch_stepsize(const Decoder& decoder, const Matrix& x, const Matrix& z,
                              const McemConfig& mcfg, Rng& rng);

// Posterior sampling for the minibatch rows idx (persistent chains in
// state.chain), then updates_per_sample Adagrad steps on theta.
void mcem_step(TrainState& state, const Matrix& batch, std::span<const std::size_t> idx,
               std::size_t dataset_size, const McemConfig& mcfg, bool weight_decay, Rng& rng);

// Mean marginal-likelihood estimate over the rows of x.
double mean_marginal_loglik(const Decoder& decoder, const Matrix& x, std::size_t samples, Rng& rng);

TrainState train_mcem(const Matrix& train_x, const Matrix* test_x, const VaeShape& shape,
                      const TrainConfig& cfg, const McemConfig& mcfg, const TrainHooks& hooks = {},
                      std::optional<TrainState> resume = std::nullopt);

TrainState train_algorithm(Algorithm algo, const Matrix& train_x, const Matrix* test_x,
                           const VaeShape& shape, const TrainConfig& cfg, const McemConfig& mcfg,
                           const TrainHooks& hooks = {},
                           std::optional<TrainState> resume = std::nullopt);

// CSV with header algorithm,examples_seen,split,bound_per_point.
void write_compare_csv(std::ostream& out,
                       const std::vector<std::pair<Algorithm, std::vector<MetricPoint>>>& runs);

}  // namespace aevb
