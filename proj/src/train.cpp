#include "aevb/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "aevb/errors.hpp"

namespace aevb {

namespace {

// Stream identifiers for Rng::split; the training stream is the seed itself.
// Every evaluation reuses the same noise stream, so successive bounds differ
// only through the parameters.
constexpr std::uint64_t kShuffleStream = 1ULL << 40;
constexpr std::uint64_t kEvalStream = 1ULL << 41;

bool blocks_finite(const ConstParamBlocks& blocks) {
  for (auto b : blocks)
    for (double v : b)
      if (!std::isfinite(v)) return false;
  return true;
}

Matrix leading_rows(const Matrix& x, std::size_t n) {
  if (n == 0 || n >= x.rows()) return x;
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  return gather_rows(x, idx);
}

}  // namespace

std::string optimizer_name(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "adagrad"; }

Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::Sgd;
  if (s == "adagrad") return Optimizer::Adagrad;
  throw ParameterError("unknown optimizer '" + s + "' (expected sgd or adagrad)");
}

void TrainConfig::validate() const {
  if (minibatch_size == 0) throw ParameterError("minibatch_size must be positive");
  if (samples_per_point == 0) throw ParameterError("samples_per_point must be positive");
  if (!(stepsize >= 0) || !std::isfinite(stepsize)) throw ParameterError("stepsize must be nonnegative");
  if (epochs == 0 && max_examples == 0) throw ParameterError("need epochs or max_examples");
  if (select_stepsize) {
    if (stepsize_candidates.empty()) throw ParameterError("stepsize_candidates is empty");
    for (double c : stepsize_candidates)
      if (!(c > 0)) throw ParameterError("stepsize candidates must be positive");
  }
}

std::size_t TrainConfig::budget(std::size_t n) const {
  return max_examples ? max_examples : epochs * n;
}

void adagrad_step(AdagradState& state, const ParamBlocks& params, const ConstParamBlocks& grads) {
  if (params.size() != grads.size()) throw ContractError("adagrad_step: block count mismatch");
  const std::size_t n = total_size(as_const(params));
  if (state.accum.empty()) state.accum.assign(n, 0.0);
  if (state.accum.size() != n) {
    throw ContractError("adagrad_step: accumulator has " + std::to_string(state.accum.size()) +
                        " entries, parameters have " + std::to_string(n));
  }
  std::size_t k = 0;
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size()) {
      throw ContractError("adagrad_step: block " + std::to_string(b) + " size mismatch");
    }
    for (std::size_t i = 0; i < params[b].size(); ++i, ++k) {
      const double g = grads[b][i];
      state.accum[k] += g * g;
      params[b][i] += state.stepsize * g / (std::sqrt(state.accum[k]) + state.epsilon);
    }
  }
}

void sgd_step(double stepsize, const ParamBlocks& params, const ConstParamBlocks& grads) {
  if (params.size() != grads.size()) throw ContractError("sgd_step: block count mismatch");
  for (std::size_t b = 0; b < params.size(); ++b) {
    if (params[b].size() != grads[b].size()) {
      throw ContractError("sgd_step: block " + std::to_string(b) + " size mismatch");
    }
  }
  axpy_blocks(params, grads, stepsize);
}

VaeModel init_params(const VaeShape& shape, Rng& rng) {
  shape.validate();
  VaeModel m = VaeModel::zeros(shape);
  for (auto b : m.blocks())
    for (double& v : b) v = kInitStddev * rng.standard_normal();
  return m;
}

void map_prior_grad(const Decoder& theta, Decoder& grad) {
  axpy_blocks(decoder_blocks(grad), decoder_blocks(theta), -1.0);
}

VaeGradient minibatch_gradient(const VaeModel& model, const Matrix& batch, const Matrix& eps,
                               std::size_t samples_per_point, std::size_t dataset_size,
                               Estimator estimator, bool weight_decay) {
  if (batch.rows() == 0) throw ContractError("minibatch_gradient: empty minibatch");
  if (dataset_size < batch.rows()) {
    throw ContractError("minibatch_gradient: dataset smaller than the minibatch");
  }
  VaeGradient g = vae_backward_batch(model, batch, eps, samples_per_point, estimator);
  const double scale = static_cast<double>(dataset_size) / static_cast<double>(batch.rows());
  scale_blocks(g.grad.blocks(), scale);
  g.objective *= scale;
  if (weight_decay) map_prior_grad(model.decoder, g.grad.decoder);
  return g;
}

double vae_bound_per_point(const VaeModel& model, const Matrix& x, Rng& rng, Estimator estimator) {
  if (x.rows() == 0) throw ContractError("vae_bound_per_point: no datapoints");
  constexpr std::size_t kChunk = 1000;
  double total = 0.0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < x.rows(); start += kChunk) {
    const std::size_t end = std::min(x.rows(), start + kChunk);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Matrix chunk = gather_rows(x, idx);
    const Matrix eps = rng.normal_matrix(chunk.rows(), model.latent_dim());
    total += sum(vae_objective_batch(model, chunk, eps, 1, estimator));
  }
  return total / static_cast<double>(x.rows());
}

TrainState initial_state(const VaeShape& shape, const TrainConfig& cfg) {
  Rng rng(cfg.seed);
  TrainState s;
  s.model = init_params(shape, rng);
  s.optimizer.stepsize = cfg.stepsize;
  s.optimizer.accum.assign(total_size(std::as_const(s.model).blocks()), 0.0);
  s.rng = rng.state();
  return s;
}

void run_training_loop(const Matrix& train_x, const Matrix* test_x, const TrainConfig& cfg,
                       TrainState& state, const BatchStep& step, const Evaluator& evaluate,
                       const TrainHooks& hooks) {
  cfg.validate();
  const std::size_t n = train_x.rows();
  if (n == 0) throw ContractError("training set is empty");
  if (train_x.cols() != state.model.data_dim()) {
    throw ContractError("training data has " + std::to_string(train_x.cols()) +
                        " columns, model expects " + std::to_string(state.model.data_dim()));
  }
  const bool have_test = test_x && test_x->rows() > 0;
  const Matrix train_eval = leading_rows(train_x, cfg.eval_points);
  const Matrix test_eval = have_test ? leading_rows(*test_x, cfg.eval_points) : Matrix();

  const std::size_t budget = cfg.budget(n);
  const std::size_t eval_every = cfg.eval_every ? cfg.eval_every : n;
  const std::size_t ckpt_every = cfg.checkpoint_every;
  std::size_t next_eval = (state.examples_seen / eval_every + 1) * eval_every;
  std::size_t next_ckpt = ckpt_every ? (state.examples_seen / ckpt_every + 1) * ckpt_every : 0;

  TrainState last_good = state;
  std::optional<std::size_t> last_ckpt;
  const auto abort = [&](const std::string& why) {
    throw TrainingAborted("training aborted at " + std::to_string(state.examples_seen) +
                              " examples: " + why,
                          last_good, last_ckpt);
  };
  const auto checkpoint = [&] {
    if (hooks.on_checkpoint) {
      hooks.on_checkpoint(state);
      last_ckpt = state.examples_seen;
    }
  };
  const auto log_metrics = [&] {
    Rng eval_rng = Rng::split(cfg.seed, kEvalStream);
    MetricPoint mp;
    mp.examples_seen = state.examples_seen;
    try {
      mp.train_bound = evaluate(state, train_eval, eval_rng);
      if (have_test) mp.test_bound = evaluate(state, test_eval, eval_rng);
    } catch (const NumericError& e) {
      abort(std::string("evaluation: ") + e.what());
    }
    if (!std::isfinite(mp.train_bound) || (mp.test_bound && !std::isfinite(*mp.test_bound))) {
      abort("non-finite bound");
    }
    state.metrics.push_back(mp);
    if (hooks.on_metric) hooks.on_metric(mp);
    last_good = state;
  };

  if (state.examples_seen == 0 && state.metrics.empty()) log_metrics();

  Rng rng(state.rng);
  std::vector<std::size_t> order;
  std::size_t order_epoch = static_cast<std::size_t>(-1);
  while (state.examples_seen < budget) {
    const std::size_t epoch = state.epochs_completed;
    if (order_epoch != epoch) {
      Rng shuffle = Rng::split(cfg.seed ^ kShuffleStream, epoch);
      order = random_permutation(shuffle, n);
      order_epoch = epoch;
    }
    const std::size_t pos = state.examples_seen - epoch * n;
    const std::size_t end =
        std::min({n, pos + cfg.minibatch_size, pos + (budget - state.examples_seen)});
    const std::span<const std::size_t> idx(order.data() + pos, end - pos);
    const Matrix batch = gather_rows(train_x, idx);
    try {
      step(state, batch, idx, rng);
    } catch (const NumericError& e) {
      state.rng = rng.state();
      abort(e.what());
    }
    state.rng = rng.state();
    state.examples_seen += end - pos;
    if (end == n) ++state.epochs_completed;
    if (!blocks_finite(std::as_const(state.model).blocks())) abort("non-finite parameters");

    const bool done = state.examples_seen >= budget;
    bool evaluated = false;
    if (state.examples_seen >= next_eval || done) {
      log_metrics();
      evaluated = true;
      while (next_eval <= state.examples_seen) next_eval += eval_every;
    }
    bool ckpt_due = done || (ckpt_every ? state.examples_seen >= next_ckpt : evaluated);
    if (ckpt_every)
      while (next_ckpt <= state.examples_seen) next_ckpt += ckpt_every;
    if (ckpt_due) checkpoint();
  }
}

TrainState train(const Matrix& train_x, const Matrix* test_x, const VaeShape& shape,
                 const TrainConfig& cfg, const TrainHooks& hooks, std::optional<TrainState> resume) {
  cfg.validate();
  TrainState state;
  if (resume) {
    state = std::move(*resume);
    if (state.model.shape() != shape) throw ContractError("resume state has a different topology");
  } else {
    state = initial_state(shape, cfg);
    if (cfg.select_stepsize) state.optimizer.stepsize = select_stepsize(train_x, shape, cfg);
  }
  const std::size_t n = train_x.rows();
  const BatchStep step = [&cfg, n](TrainState& s, const Matrix& batch,
                                   std::span<const std::size_t>, Rng& rng) {
    const Matrix eps = rng.normal_matrix(batch.rows() * cfg.samples_per_point, s.model.latent_dim());
    VaeGradient g = minibatch_gradient(s.model, batch, eps, cfg.samples_per_point, n,
                                       cfg.estimator, cfg.weight_decay);
    if (cfg.optimizer == Optimizer::Adagrad) {
      adagrad_step(s.optimizer, s.model.blocks(), std::as_const(g.grad).blocks());
    } else {
      sgd_step(s.optimizer.stepsize, s.model.blocks(), std::as_const(g.grad).blocks());
    }
  };
  const Evaluator evaluate = [&cfg](const TrainState& s, const Matrix& x, Rng& rng) {
    return vae_bound_per_point(s.model, x, rng, cfg.estimator);
  };
  run_training_loop(train_x, test_x, cfg, state, step, evaluate, hooks);
  return state;
}

double select_stepsize(const Matrix& train_x, const VaeShape& shape, const TrainConfig& cfg) {
  constexpr std::size_t kEvaluations = 10;
  double best = 0.0, best_bound = -INFINITY;
  for (double candidate : cfg.stepsize_candidates) {
    TrainConfig trial = cfg;
    trial.select_stepsize = false;
    trial.stepsize = candidate;
    const std::size_t every = cfg.eval_every ? cfg.eval_every : train_x.rows();
    trial.max_examples = kEvaluations * every;
    trial.checkpoint_every = 0;
    try {
      const TrainState s = train(train_x, nullptr, shape, trial);
      const double bound = s.metrics.back().train_bound;
      if (bound > best_bound) {
        best_bound = bound;
        best = candidate;
      }
    } catch (const TrainingAborted&) {
      // a diverging candidate simply loses
    }
  }
  if (!(best > 0)) throw NumericError("select_stepsize", "every candidate stepsize diverged");
  return best;
}

void write_metrics_csv(std::ostream& out, const std::vector<MetricPoint>& metrics) {
  out << "examples_seen,split,bound_per_point\n";
  out.precision(17);
  for (const auto& m : metrics) {
    out << m.examples_seen << ",train," << m.train_bound << '\n';
    if (m.test_bound) out << m.examples_seen << ",test," << *m.test_bound << '\n';
  }
}

}  // namespace aevb
