#include <cmath>
#include <sstream>

#include "aevb/errors.hpp"
#include "aevb/train.hpp"
#include "doctest.h"
#include "model_helpers.hpp"
#include "ppca_oracle.hpp"
#include "stat_helpers.hpp"

using namespace aevb;

namespace {

VaeShape small_shape(DecoderFamily f = DecoderFamily::Bernoulli) { return {6, 5, 4, 2, f, false}; }

Matrix binary_data(std::size_t n, std::size_t d, Rng& rng) {
  Matrix x(n, d);
  for (double& v : x.flat()) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  return x;
}

double decoder_norm2(const Decoder& d) {
  double s = 0.0;
  for (auto b : decoder_blocks(d))
    for (double v : b) s += v * v;
  return s;
}

}  // namespace

TEST_CASE("adagrad closed forms") {
  Vector p{1.0, -2.0, 0.5};
  const Vector g{0.3, -4.0, 0.0};
  AdagradState st;
  st.stepsize = 0.1;
  adagrad_step(st, {std::span<double>(p)}, {std::span<const double>(g)});
  CHECK(p[0] == doctest::Approx(1.0 + 0.1 * 0.3 / (0.3 + kAdagradEpsilon)).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-2.0 - 0.1).epsilon(1e-9));
  CHECK(p[2] == 0.5);  // zero gradient, no change
  const double before = p[1];
  adagrad_step(st, {std::span<double>(p)}, {std::span<const double>(g)});
  CHECK(before - p[1] == doctest::Approx(0.1 / std::sqrt(2.0)).epsilon(1e-8));
  for (double a : st.accum) CHECK(a >= 0.0);

  Vector q(2);
  CHECK_THROWS_AS(adagrad_step(st, {std::span<double>(q)}, {std::span<const double>(g)}), ContractError);
}

TEST_CASE("adagrad accumulators never decrease") {
  Rng rng(2);
  Vector p = rng.normal_vector(20);
  AdagradState st;
  Vector prev(20, 0.0);
  for (int t = 0; t < 50; ++t) {
    const Vector g = rng.normal_vector(20);
    adagrad_step(st, {std::span<double>(p)}, {std::span<const double>(g)});
    for (std::size_t i = 0; i < 20; ++i) REQUIRE(st.accum[i] >= prev[i]);
    prev = st.accum;
  }
}

TEST_CASE("initialisation") {
  Rng a(9), b(9);
  const VaeShape shape{100, 50, 50, 10, DecoderFamily::Bernoulli, false};
  const VaeModel m = init_params(shape, a);
  const Vector flat = flatten(m.blocks());
  REQUIRE(flat.size() >= 10000);
  const double sd = std::sqrt(aevb::testing::sample_variance(flat));
  CHECK(sd >= 0.009);
  CHECK(sd <= 0.011);
  CHECK(flat == flatten(init_params(shape, b).blocks()));
  Rng c(1);
  CHECK_THROWS_AS(init_params({6, 0, 4, 2, DecoderFamily::Bernoulli, false}, c), ContractError);
  CHECK_THROWS_AS(init_params({6, 5, 4, 0, DecoderFamily::Bernoulli, false}, c), ContractError);
}

TEST_CASE("weight decay gradient") {
  Rng rng(4);
  VaeModel m = aevb::testing::random_model(small_shape(), rng);
  VaeModel zero = VaeModel::zeros(small_shape());
  Decoder g = zero.decoder;
  map_prior_grad(zero.decoder, g);
  CHECK(decoder_norm2(g) == 0.0);

  auto& w1 = std::get<BernoulliMlp>(m.decoder).w1;
  w1(0, 0) = 2.0;
  map_prior_grad(m.decoder, g);
  CHECK(std::get<BernoulliMlp>(g).w1(0, 0) == -2.0);

  // Decay alone shrinks theta at every step.
  AdagradState st;
  st.stepsize = 0.01;
  double prev = decoder_norm2(m.decoder);
  for (int t = 0; t < 100; ++t) {
    Decoder grad = VaeModel::zeros(small_shape()).decoder;
    map_prior_grad(m.decoder, grad);
    adagrad_step(st, decoder_blocks(m.decoder), decoder_blocks(std::as_const(grad)));
    const double now = decoder_norm2(m.decoder);
    REQUIRE(now < prev);
    prev = now;
  }
}

TEST_CASE("weight decay leaves the encoder gradient alone") {
  Rng rng(5);
  const VaeModel m = aevb::testing::random_model(small_shape(), rng);
  const Matrix x = binary_data(4, 6, rng), eps = rng.normal_matrix(4, 2);
  const auto with = minibatch_gradient(m, x, eps, 1, 4, Estimator::B, true);
  const auto without = minibatch_gradient(m, x, eps, 1, 4, Estimator::B, false);
  CHECK(flatten(std::as_const(with.grad.encoder).blocks()) ==
        flatten(std::as_const(without.grad.encoder).blocks()));
  const Vector a = flatten(decoder_blocks(with.grad.decoder)), b = flatten(decoder_blocks(without.grad.decoder)),
               t = flatten(decoder_blocks(m.decoder));
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i] - t[i]).epsilon(1e-14));
}

TEST_CASE("enumerated minibatch gradients average to the full-batch gradient") {
  Rng rng(6);
  const VaeModel m = aevb::testing::random_model(small_shape(), rng);
  const Matrix x = binary_data(4, 6, rng), eps = rng.normal_matrix(4, 2);
  const auto full = vae_backward_batch(m, x, eps, 1, Estimator::B);
  const Vector target = flatten(std::as_const(full.grad).blocks());
  Vector avg(target.size(), 0.0);
  int count = 0;
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = i + 1; j < 4; ++j) {
      const std::vector<std::size_t> idx{i, j};
      const auto g = minibatch_gradient(m, gather_rows(x, idx), gather_rows(eps, idx), 1, 4, Estimator::B, false);
      const Vector f = flatten(std::as_const(g.grad).blocks());
      for (std::size_t k = 0; k < f.size(); ++k) avg[k] += f[k];
      ++count;
    }
  }
  for (std::size_t k = 0; k < avg.size(); ++k) {
    CHECK(std::abs(avg[k] / count - target[k]) <= 1e-10 * std::max(1.0, std::abs(target[k])));
  }
}

TEST_CASE("zero stepsize leaves the model unchanged but logs the bound") {
  Rng rng(7);
  const Matrix x = binary_data(4, 6, rng);
  TrainConfig cfg;
  cfg.minibatch_size = 4;
  cfg.stepsize = 0.0;
  cfg.epochs = 1;
  cfg.seed = 3;
  const TrainState init = initial_state(small_shape(), cfg);
  const TrainState s = train(x, nullptr, small_shape(), cfg);
  CHECK(flatten(s.model.blocks()) == flatten(init.model.blocks()));
  REQUIRE(s.metrics.size() == 2);
  CHECK(s.metrics[1].examples_seen == 4);
  CHECK(std::isfinite(s.metrics[1].train_bound));
}

TEST_CASE("training is deterministic and the metric log is increasing") {
  Rng rng(8);
  const Matrix x = binary_data(250, 6, rng), t = binary_data(50, 6, rng);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.eval_every = 120;
  cfg.seed = 11;
  const TrainState a = train(x, &t, small_shape(), cfg), b = train(x, &t, small_shape(), cfg);
  std::ostringstream ca, cb;
  write_metrics_csv(ca, a.metrics);
  write_metrics_csv(cb, b.metrics);
  CHECK(ca.str() == cb.str());
  CHECK(ca.str().rfind("examples_seen,split,bound_per_point\n", 0) == 0);
  CHECK(flatten(a.model.blocks()) == flatten(b.model.blocks()));
  for (std::size_t i = 1; i < a.metrics.size(); ++i) CHECK(a.metrics[i].examples_seen > a.metrics[i - 1].examples_seen);
  CHECK(a.examples_seen == 750);
  CHECK(a.epochs_completed == 3);
}

TEST_CASE("resuming from an intermediate state matches an uninterrupted run") {
  Rng rng(9);
  const Matrix x = binary_data(230, 6, rng);
  TrainConfig cfg;
  cfg.epochs = 4;
  cfg.eval_every = 100;
  cfg.checkpoint_every = 300;
  cfg.seed = 5;
  std::vector<TrainState> snapshots;
  TrainHooks hooks;
  hooks.on_checkpoint = [&](const TrainState& s) { snapshots.push_back(s); };
  const TrainState full = train(x, nullptr, small_shape(), cfg, hooks);
  REQUIRE(snapshots.size() >= 2);
  const TrainState& mid = snapshots[1];
  // Minibatches of 100, 100 and 30 per epoch: the second checkpoint falls
  // after 660 examples, inside the third epoch.
  CHECK(mid.examples_seen == 660);
  CHECK(mid.epochs_completed == 2);
  const TrainState resumed = train(x, nullptr, small_shape(), cfg, {}, mid);
  CHECK(flatten(resumed.model.blocks()) == flatten(full.model.blocks()));
  CHECK(resumed.optimizer.accum == full.optimizer.accum);
  CHECK(resumed.rng == full.rng);
  REQUIRE(resumed.metrics.size() == full.metrics.size());
  for (std::size_t i = 0; i < full.metrics.size(); ++i) {
    CHECK(resumed.metrics[i].examples_seen == full.metrics[i].examples_seen);
    CHECK(resumed.metrics[i].train_bound == full.metrics[i].train_bound);
  }
}

TEST_CASE("non-finite data aborts with the last good state") {
  Rng rng(10);
  Matrix x = binary_data(20, 6, rng);
  TrainConfig cfg;
  cfg.minibatch_size = 5;
  cfg.epochs = 2;
  cfg.eval_every = 5;
  // Poison one row after the initial evaluation has used only the first rows.
  cfg.eval_points = 3;
  x(10, 2) = std::nan("");
  try {
    (void)train(x, nullptr, small_shape(), cfg);
    FAIL("expected TrainingAborted");
  } catch (const TrainingAborted& e) {
    CHECK(std::string(e.what()).find("aborted") != std::string::npos);
    CHECK(e.last_good().examples_seen < 20);
    CHECK(!e.last_good().metrics.empty());
  }
}

TEST_CASE("smoothed train bound rises at stepsize 0.01") {
  Rng rng(12);
  const Matrix w = rng.normal_matrix(10, 2);
  const Vector b = rng.normal_vector(10);
  const Matrix x = aevb::testing::linear_gaussian_data(w, b, 0.5, 500, rng);
  TrainConfig cfg;
  cfg.stepsize = 0.01;
  cfg.epochs = 200;
  cfg.eval_every = 500;
  cfg.seed = 2;
  const TrainState s = train(x, nullptr, {10, 20, 0, 2, DecoderFamily::LinearGaussian, false}, cfg);
  const std::size_t window = 10;
  double prev = -INFINITY;
  for (std::size_t i = 0; i + window <= s.metrics.size(); i += window) {
    double m = 0.0;
    for (std::size_t k = i; k < i + window; ++k) m += s.metrics[k].train_bound;
    m /= window;
    CHECK(m >= prev);
    prev = m;
  }
}

TEST_CASE("AEVB reaches the maximum-likelihood pPCA log-likelihood on held-out data") {
  Rng rng(123);
  const Matrix w = rng.normal_matrix(10, 2);
  const Vector b = rng.normal_vector(10);
  const Matrix train_x = aevb::testing::linear_gaussian_data(w, b, 0.5, 1000, rng);
  const Matrix test_x = aevb::testing::linear_gaussian_data(w, b, 0.5, 1000, rng);
  const auto fit = aevb::testing::fit_ppca_ml(train_x, 2);
  double oracle = 0.0;
  for (std::size_t i = 0; i < test_x.rows(); ++i) oracle += aevb::testing::ppca_loglik_eigen(fit, test_x.row(i));
  oracle /= static_cast<double>(test_x.rows());

  TrainConfig cfg;
  cfg.stepsize = 0.1;
  cfg.epochs = 1000;
  cfg.eval_every = 100000;
  cfg.seed = 1;
  const TrainState s = train(train_x, &test_x, {10, 20, 0, 2, DecoderFamily::LinearGaussian, false}, cfg);
  Rng eval_rng(77);
  double bound = 0.0;
  for (int r = 0; r < 20; ++r) bound += vae_bound_per_point(s.model, test_x, eval_rng);
  bound /= 20;
  CHECK(std::abs(oracle - bound) < 0.1);

  // Trained pPCA noise variance close to the ML value.
  CHECK(std::get<LinearGaussian>(s.model.decoder).noise_var() == doctest::Approx(fit.noise_var).epsilon(0.05));
}

TEST_CASE("stepsize selection picks one of the candidates") {
  Rng rng(13);
  const Matrix x = binary_data(200, 6, rng);
  TrainConfig cfg;
  cfg.eval_every = 100;
  cfg.seed = 4;
  const double eta = select_stepsize(x, small_shape(), cfg);
  CHECK((eta == 0.01 || eta == 0.02 || eta == 0.1));
  cfg.select_stepsize = true;
  cfg.epochs = 1;
  const TrainState s = train(x, nullptr, small_shape(), cfg);
  CHECK(s.optimizer.stepsize == eta);
}

TEST_CASE("config validation") {
  TrainConfig cfg;
  cfg.minibatch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = TrainConfig{};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  CHECK(parse_optimizer("sgd") == Optimizer::Sgd);
  CHECK_THROWS_AS(parse_optimizer("adam"), ParameterError);
}
