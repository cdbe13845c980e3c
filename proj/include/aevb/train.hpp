#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "aevb/networks.hpp"
#include "aevb/numkit.hpp"

namespace aevb {

enum class Optimizer { Sgd, Adagrad };

std::string optimizer_name(Optimizer o);
Optimizer parse_optimizer(const std::string& s);

struct TrainConfig {
  std::size_t minibatch_size = 100;
  std::size_t samples_per_point = 1;
  Optimizer optimizer = Optimizer::Adagrad;
  double stepsize = 0.02;
  std::vector<double> stepsize_candidates{0.01, 0.02, 0.1};
  bool select_stepsize = false;  // pick stepsize from the candidates first
  std::size_t epochs = 1;
  std::size_t max_examples = 0;  // 0: epochs * N
  std::uint64_t seed = 0;
  bool weight_decay = true;
  std::size_t eval_every = 0;    // examples between evaluations; 0: once per epoch
  std::size_t eval_points = 0;   // evaluate on the first n points of each split; 0: all
  std::size_t checkpoint_every = 0;  // examples; 0: only at evaluations
  Estimator estimator = Estimator::B;

  void validate() const;
  std::size_t budget(std::size_t n) const;
};

struct AdagradState {
  Vector accum;  // squared-gradient sums, laid out like the flattened params
  double stepsize = 0.01;
  double epsilon = 1e-8;
};

inline constexpr double kAdagradEpsilon = 1e-8;

// Ascent: accum += g^2; p += stepsize * g / (sqrt(accum) + eps). The
// accumulator is sized on first use.
void adagrad_step(AdagradState& state, const ParamBlocks& params, const ConstParamBlocks& grads);
void sgd_step(double stepsize, const ParamBlocks& params, const ConstParamBlocks& grads);

// Every weight and bias drawn from N(0, 0.01^2).
inline constexpr double kInitStddev = 0.01;
VaeModel init_params(const VaeShape& shape, Rng& rng);

// Adds -theta into the decoder gradient (a N(0, I) prior on theta).
void map_prior_grad(const Decoder& theta, Decoder& grad);

// Gradient of (N / M) * sum over the batch of the per-point estimator, plus
// the weight-decay term when requested. eps is (M * L) x J.
VaeGradient minibatch_gradient(const VaeModel& model, const Matrix& batch, const Matrix& eps,
                               std::size_t samples_per_point, std::size_t dataset_size,
                               Estimator estimator, bool weight_decay);

struct MetricPoint {
  std::size_t examples_seen = 0;
  double train_bound = 0.0;  // per datapoint
  std::optional<double> test_bound;
};

// Persistent state of posterior-sampling baselines.
struct ChainState {
  Matrix z;                 // one latent sample per training point
  double stepsize = 0.0;    // 0 until initialised
  std::size_t iterations = 0;
};

struct TrainState {
  VaeModel model;
  AdagradState optimizer;
  Rng::State rng{};
  std::size_t examples_seen = 0;
  std::size_t epochs_completed = 0;
  std::vector<MetricPoint> metrics;
  std::optional<ChainState> chain;
};

// Thrown when training hits a non-finite value; carries the state at the last
// evaluation (or the initial state) and the examples_seen of the last
// checkpoint handed to the hook, if any.
class TrainingAborted : public std::runtime_error {
 public:
  TrainingAborted(const std::string& what, TrainState last_good,
                  std::optional<std::size_t> last_checkpoint)
      : std::runtime_error(what), last_good_(std::move(last_good)), last_checkpoint_(last_checkpoint) {}
  const TrainState& last_good() const noexcept { return last_good_; }
  std::optional<std::size_t> last_checkpoint() const noexcept { return last_checkpoint_; }

 private:
  TrainState last_good_;
  std::optional<std::size_t> last_checkpoint_;
};

struct TrainHooks {
  std::function<void(const TrainState&)> on_checkpoint;
  std::function<void(const MetricPoint&)> on_metric;
};

// A fresh state: initialised parameters and the generator seeded from cfg.
TrainState initial_state(const VaeShape& shape, const TrainConfig& cfg);

// One parameter update on the rows idx of the training data.
using BatchStep = std::function<void(TrainState& state, const Matrix& batch,
                                     std::span<const std::size_t> idx, Rng& rng)>;
// Bound per datapoint of the state on x.
using Evaluator = std::function<double(const TrainState& state, const Matrix& x, Rng& rng)>;

// Shuffled-epoch minibatch loop shared by all algorithms. Epoch e visits the
// training rows in an order fixed by (seed, e); minibatch noise comes from
// state.rng, evaluation noise from a separate fixed stream (the same draws at
// every evaluation), so evaluation and checkpointing never change the
// trajectory.
void run_training_loop(const Matrix& train_x, const Matrix* test_x, const TrainConfig& cfg,
                       TrainState& state, const BatchStep& step, const Evaluator& evaluate,
                       const TrainHooks& hooks = {});

// Mean estimator-B bound with L = 1 over the rows of x.
double vae_bound_per_point(const VaeModel& model, const Matrix& x, Rng& rng,
                           Estimator estimator = Estimator::B);

// AEVB (minibatch SGVB with Adagrad or SGD). Resumes from `resume` when given.
TrainState train(const Matrix& train_x, const Matrix* test_x, const VaeShape& shape,
                 const TrainConfig& cfg, const TrainHooks& hooks = {},
                 std::optional<TrainState> resume = std::nullopt);

// Runs each candidate stepsize for 10 evaluations from the same start and
// returns the one with the best final train bound.
double select_stepsize(const Matrix& train_x, const VaeShape& shape, const TrainConfig& cfg);

// CSV with header examples_seen,split,bound_per_point.
void write_metrics_csv(std::ostream& out, const std::vector<MetricPoint>& metrics);

}  // namespace aevb
