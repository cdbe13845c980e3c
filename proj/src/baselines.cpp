#include "aevb/baselines.hpp"

#include <cmath>
#include <ostream>

#include "aevb/errors.hpp"

namespace aevb {

namespace {

Vector uniform_weights(std::size_t rows, std::size_t dataset_size) {
  return Vector(rows, static_cast<double>(dataset_size) / static_cast<double>(rows));
}

void require_batch(const Matrix& x, std::size_t dataset_size, const char* who) {
  if (x.rows() == 0) throw ContractError(std::string(who) + ": empty minibatch");
  if (dataset_size < x.rows()) throw ContractError(std::string(who) + ": dataset smaller than minibatch");
}

// log p(z) + log p(x|z) per row (up to the prior's constant) and its z
// gradient. Rows that cannot be evaluated get NaN.
void log_joint_rows(const Decoder& dec, const Matrix& x, const Matrix& z, Vector& lp, Matrix& grad) {
  const std::size_t b = z.rows(), j = z.cols();
  lp.assign(b, NAN);
  grad = Matrix(b, j, NAN);
  const auto fill = [&](const Matrix& zs, const Matrix& xs, std::size_t offset) {
    Matrix dz;
    const Vector ll = decoder_loglik(dec, zs, xs, {}, nullptr, &dz);
    for (std::size_t r = 0; r < zs.rows(); ++r) {
      double prior = 0.0;
      for (std::size_t c = 0; c < j; ++c) {
        prior -= 0.5 * zs(r, c) * zs(r, c);
        grad(offset + r, c) = dz(r, c) - zs(r, c);
      }
      lp[offset + r] = ll[r] + prior;
    }
  };
  try {
    fill(z, x, 0);
  } catch (const NumericError&) {
    for (std::size_t r = 0; r < b; ++r) {
      const std::vector<std::size_t> one{r};
      try {
        fill(gather_rows(z, one), gather_rows(x, one), r);
      } catch (const NumericError&) {
        lp[r] = NAN;
      }
    }
  }
}

}  // namespace

std::string algorithm_name(Algorithm a) {
  switch (a) {
    case Algorithm::Aevb: return "aevb";
    case Algorithm::WakeSleep: return "wake_sleep";
    case Algorithm::Mcem: return "mcem";
  }
  return "?";
}

Algorithm parse_algorithm(const std::string& s) {
  if (s == "aevb") return Algorithm::Aevb;
  if (s == "wake_sleep" || s == "wake-sleep") return Algorithm::WakeSleep;
  if (s == "mcem") return Algorithm::Mcem;
  throw ParameterError("unknown algorithm '" + s + "' (expected aevb, wake_sleep or mcem)");
}

VaeModel wake_gradient(const VaeModel& model, const Matrix& x, const Matrix& z,
                       std::size_t dataset_size, bool weight_decay, double* objective) {
  require_batch(x, dataset_size, "wake_gradient");
  VaeModel g = VaeModel::zeros(model.shape());
  const Vector w = uniform_weights(x.rows(), dataset_size);
  const Vector ll = decoder_loglik(model.decoder, z, x, w, &g.decoder);
  const double mean = sum(ll) / static_cast<double>(ll.size());
  if (!std::isfinite(mean)) throw NumericError("decoder", "non-finite wake objective");
  if (objective) *objective = mean;
  if (weight_decay) map_prior_grad(model.decoder, g.decoder);
  return g;
}

VaeModel sleep_gradient(const VaeModel& model, const Matrix& x_dream, const Matrix& z_dream,
                        std::size_t dataset_size, double* objective) {
  require_batch(x_dream, dataset_size, "sleep_gradient");
  VaeModel g = VaeModel::zeros(model.shape());
  const Vector w = uniform_weights(x_dream.rows(), dataset_size);
  const Vector lq = gaussian_mlp_loglik(model.encoder, x_dream, z_dream, w, &g.encoder);
  const double mean = sum(lq) / static_cast<double>(lq.size());
  if (!std::isfinite(mean)) throw NumericError("encoder", "non-finite sleep objective");
  if (objective) *objective = mean;
  return g;
}

WakeSleepDiagnostics wake_sleep_step(TrainState& state, const Matrix& batch,
                                     std::size_t dataset_size, bool weight_decay, Rng& rng) {
  VaeModel& m = state.model;
  const std::size_t j = m.latent_dim();
  WakeSleepDiagnostics d;

  const GaussianActivations enc = gaussian_forward_batch(m.encoder, batch);
  const Matrix eps = rng.normal_matrix(batch.rows(), j);
  Matrix z(batch.rows(), j);
  for (std::size_t r = 0; r < z.rows(); ++r)
    for (std::size_t c = 0; c < j; ++c)
      z(r, c) = enc.mean(r, c) + std::exp(0.5 * enc.log_var(r, c)) * eps(r, c);
  const VaeModel wake = wake_gradient(m, batch, z, dataset_size, weight_decay, &d.wake_objective);
  adagrad_step(state.optimizer, m.blocks(), wake.blocks());

  const Matrix z_dream = rng.normal_matrix(batch.rows(), j);
  const Matrix x_dream = decoder_sample(m.decoder, z_dream, rng);
  const VaeModel sleep = sleep_gradient(m, x_dream, z_dream, dataset_size, &d.sleep_objective);
  adagrad_step(state.optimizer, m.blocks(), sleep.blocks());
  return d;
}

TrainState train_wake_sleep(const Matrix& train_x, const Matrix* test_x, const VaeShape& shape,
                            const TrainConfig& cfg, const TrainHooks& hooks,
                            std::optional<TrainState> resume) {
  TrainState state = resume ? std::move(*resume) : initial_state(shape, cfg);
  const std::size_t n = train_x.rows();
  const BatchStep step = [&cfg, n](TrainState& s, const Matrix& batch,
                                   std::span<const std::size_t>, Rng& rng) {
    wake_sleep_step(s, batch, n, cfg.weight_decay, rng);
  };
  const Evaluator evaluate = [](const TrainState& s, const Matrix& x, Rng& rng) {
    return vae_bound_per_point(s.model, x, rng, Estimator::B);
  };
  run_training_loop(train_x, test_x, cfg, state, step, evaluate, hooks);
  return state;
}

void McemConfig::validate() const {
  hmc.validate();
  if (updates_per_sample == 0) throw ParameterError("McemConfig: updates_per_sample must be positive");
  if (!(anneal_scale > 0)) throw ParameterError("McemConfig: anneal_scale must be positive");
  if (eval_samples == 0) throw ParameterError("McemConfig: eval_samples must be positive");
}

double batch_hmc_transition(const Decoder& decoder, const Matrix& x, Matrix& z, double stepsize,
                            std::size_t leapfrog_steps, std::size_t max_retries, Rng& rng) {
  const std::size_t j = z.cols();
  std::vector<std::size_t> pending(z.rows());
  for (std::size_t r = 0; r < pending.size(); ++r) pending[r] = r;
  double accept_total = 0.0;

  for (std::size_t attempt = 0; !pending.empty(); ++attempt) {
    if (attempt > max_retries) {
      throw NumericError("mcem", "HMC diverged after " + std::to_string(max_retries) +
                                     " stepsize halvings");
    }
    const double eps = stepsize * std::ldexp(1.0, -static_cast<int>(attempt));
    const Matrix xs = gather_rows(x, pending);
    Matrix zs = gather_rows(z, pending);
    const std::size_t b = zs.rows();
    Vector lp0, lp1;
    Matrix g;
    log_joint_rows(decoder, xs, zs, lp0, g);
    Matrix p = rng.normal_matrix(b, j);
    Vector h0(b);
    for (std::size_t r = 0; r < b; ++r) {
      double k = 0.0;
      for (std::size_t c = 0; c < j; ++c) k += p(r, c) * p(r, c);
      h0[r] = -lp0[r] + 0.5 * k;
    }
    Matrix z1 = zs;
    for (std::size_t i = 0; i < p.size(); ++i) p.flat()[i] += 0.5 * eps * g.flat()[i];
    for (std::size_t s = 0; s < leapfrog_steps; ++s) {
      for (std::size_t i = 0; i < z1.size(); ++i) z1.flat()[i] += eps * p.flat()[i];
      log_joint_rows(decoder, xs, z1, lp1, g);
      const double scale = (s + 1 == leapfrog_steps) ? 0.5 * eps : eps;
      for (std::size_t i = 0; i < p.size(); ++i) p.flat()[i] += scale * g.flat()[i];
    }

    std::vector<std::size_t> still;
    for (std::size_t r = 0; r < b; ++r) {
      double k = 0.0;
      bool finite = std::isfinite(lp1[r]);
      for (std::size_t c = 0; c < j; ++c) {
        k += p(r, c) * p(r, c);
        finite = finite && std::isfinite(g(r, c));
      }
      const double h1 = -lp1[r] + 0.5 * k;
      const double u = rng.uniform();
      if (!finite || !std::isfinite(h1)) {
        still.push_back(pending[r]);
        continue;
      }
      const double a = std::min(1.0, std::exp(h0[r] - h1));
      accept_total += a;
      if (u < a)
        for (std::size_t c = 0; c < j; ++c) z(pending[r], c) = z1(r, c);
    }
    pending = std::move(still);
  }
  return accept_total / static_cast<double>(z.rows());
}

double initial_batch_stepsize(const Decoder& decoder, const Matrix& x, const Matrix& z,
                              const McemConfig& mcfg, Rng& rng) {
  const double target = mcfg.hmc.target_acceptance;
  const auto accept = [&](double eps) {
    Matrix trial = z;
    return batch_hmc_transition(decoder, x, trial, eps, mcfg.hmc.leapfrog_steps, mcfg.max_retries, rng);
  };
  double eps = mcfg.hmc.stepsize;
  const bool grow = accept(eps) > target;
  for (int i = 0; i < 50; ++i) {
    const double next = grow ? 2.0 * eps : 0.5 * eps;
    const double a = accept(next);
    if (grow && a < target) break;
    eps = next;
    if (!grow && a > target) break;
  }
  return eps;
}

void mcem_step(TrainState& state, const Matrix& batch, std::span<const std::size_t> idx,
               std::size_t dataset_size, const McemConfig& mcfg, bool weight_decay, Rng& rng) {
  require_batch(batch, dataset_size, "mcem_step");
  if (idx.size() != batch.rows()) throw ContractError("mcem_step: index count differs from batch");
  VaeModel& m = state.model;
  const std::size_t j = m.latent_dim();
  if (!state.chain) {
    ChainState c;
    c.z = rng.normal_matrix(dataset_size, j);
    c.stepsize = mcfg.adapt_iterations > 0
                     ? initial_batch_stepsize(m.decoder, batch, gather_rows(c.z, idx), mcfg, rng)
                     : mcfg.hmc.stepsize;
    state.chain = std::move(c);
  }
  ChainState& chain = *state.chain;
  if (chain.z.rows() != dataset_size || chain.z.cols() != j) {
    throw ContractError("mcem_step: chain state does not match the dataset");
  }

  Matrix z = gather_rows(chain.z, idx);
  const double jitter = mcfg.hmc.stepsize_jitter * (2.0 * rng.uniform() - 1.0);
  const double acc = batch_hmc_transition(m.decoder, batch, z, chain.stepsize * (1.0 + jitter),
                                          mcfg.hmc.leapfrog_steps, mcfg.max_retries, rng);
  for (std::size_t r = 0; r < idx.size(); ++r)
    for (std::size_t c = 0; c < j; ++c) chain.z(idx[r], c) = z(r, c);
  if (chain.iterations < mcfg.adapt_iterations) {
    chain.stepsize *= std::exp(mcfg.hmc.adapt_rate * (acc - mcfg.hmc.target_acceptance));
  }

  if (mcfg.update_decoder) {
    const double base = state.optimizer.stepsize;
    state.optimizer.stepsize =
        base / std::sqrt(1.0 + static_cast<double>(chain.iterations) / mcfg.anneal_scale);
    for (std::size_t u = 0; u < mcfg.updates_per_sample; ++u) {
      const VaeModel g = wake_gradient(m, batch, z, dataset_size, weight_decay);
      adagrad_step(state.optimizer, m.blocks(), g.blocks());
    }
    state.optimizer.stepsize = base;
  }
  ++chain.iterations;
}

double mean_marginal_loglik(const Decoder& decoder, const Matrix& x, std::size_t samples, Rng& rng) {
  if (x.rows() == 0) throw ContractError("mean_marginal_loglik: no datapoints");
  const HmcConfig cfg = mll_hmc_defaults();
  double total = 0.0;
  for (std::size_t r = 0; r < x.rows(); ++r)
    total += marginal_loglik_estimate(decoder, x.row(r), samples, cfg, rng).log_marginal;
  return total / static_cast<double>(x.rows());
}

TrainState train_mcem(const Matrix& train_x, const Matrix* test_x, const VaeShape& shape,
                      const TrainConfig& cfg, const McemConfig& mcfg, const TrainHooks& hooks,
                      std::optional<TrainState> resume) {
  mcfg.validate();
  TrainState state = resume ? std::move(*resume) : initial_state(shape, cfg);
  const std::size_t n = train_x.rows();
  const BatchStep step = [&cfg, &mcfg, n](TrainState& s, const Matrix& batch,
                                          std::span<const std::size_t> idx, Rng& rng) {
    mcem_step(s, batch, idx, n, mcfg, cfg.weight_decay, rng);
  };
  const Evaluator evaluate = [&mcfg](const TrainState& s, const Matrix& x, Rng& rng) {
    return mean_marginal_loglik(s.model.decoder, x, mcfg.eval_samples, rng);
  };
  run_training_loop(train_x, test_x, cfg, state, step, evaluate, hooks);
  return state;
}

TrainState train_algorithm(Algorithm algo, const Matrix& train_x, const Matrix* test_x,
                           const VaeShape& shape, const TrainConfig& cfg, const McemConfig& mcfg,
                           const TrainHooks& hooks, std::optional<TrainState> resume) {
  switch (algo) {
    case Algorithm::Aevb: return train(train_x, test_x, shape, cfg, hooks, std::move(resume));
    case Algorithm::WakeSleep:
      return train_wake_sleep(train_x, test_x, shape, cfg, hooks, std::move(resume));
    case Algorithm::Mcem:
      return train_mcem(train_x, test_x, shape, cfg, mcfg, hooks, std::move(resume));
  }
  throw ContractError("unknown algorithm");
}

void write_compare_csv(std::ostream& out,
                       const std::vector<std::pair<Algorithm, std::vector<MetricPoint>>>& runs) {
  out << "algorithm,examples_seen,split,bound_per_point\n";
  out.precision(17);
  for (const auto& [algo, metrics] : runs) {
    const std::string name = algorithm_name(algo);
    for (const auto& m : metrics) {
      out << name << ',' << m.examples_seen << ",train," << m.train_bound << '\n';
      if (m.test_bound) out << name << ',' << m.examples_seen << ",test," << *m.test_bound << '\n';
    }
  }
}

}  // namespace aevb
