#include "aevb/fullvb.hpp"

#include <algorithm>
#include <cmath>

#include "aevb/errors.hpp"
#include "aevb/train.hpp"

namespace aevb {

namespace {

double clamp_log_var(double lv) { return std::clamp(lv, kLogVarMin, kLogVarMax); }
bool clamped(double lv) { return lv < kLogVarMin || lv > kLogVarMax; }

double log_std_normal(std::span<const double> v) {
  return -0.5 * (static_cast<double>(v.size()) * kLog2Pi + squared_norm(v));
}

double log_diag_normal(std::span<const double> v, std::span<const double> mean,
                       std::span<const double> log_var) {
  double s = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double lv = clamp_log_var(log_var[i]), d = v[i] - mean[i];
    s += -0.5 * (kLog2Pi + lv + d * d * std::exp(-lv));
  }
  return s;
}

void check_shapes(const FlatLikelihood& model, std::span<const double> x, std::span<const double> z,
                  std::span<const double> theta) {
  if (x.size() != model.data_dim() || z.size() != model.latent_dim() ||
      theta.size() != model.num_params()) {
    throw ContractError("fullvb: x, z or theta size does not match the model (" +
                        std::to_string(x.size()) + "/" + std::to_string(model.data_dim()) + ", " +
                        std::to_string(z.size()) + "/" + std::to_string(model.latent_dim()) + ", " +
                        std::to_string(theta.size()) + "/" + std::to_string(model.num_params()) + ")");
  }
}

}  // namespace

std::size_t DecoderLikelihood::num_params() const {
  return total_size(decoder_blocks(shape_));
}

double DecoderLikelihood::loglik(std::span<const double> theta, std::span<const double> x,
                                 std::span<const double> z, std::span<double> d_theta,
                                 std::span<double> d_z) const {
  Decoder dec = shape_;
  unflatten(theta, decoder_blocks(dec));
  const Matrix zm(1, z.size(), Vector(z.begin(), z.end()));
  const Matrix xm(1, x.size(), Vector(x.begin(), x.end()));
  Decoder grad = shape_;
  zero_blocks(decoder_blocks(grad));
  Matrix dz;
  const bool want = !d_theta.empty() || !d_z.empty();
  const double ll = decoder_loglik(dec, zm, xm, {}, want ? &grad : nullptr, want ? &dz : nullptr)[0];
  if (!d_theta.empty()) {
    const Vector g = flatten(decoder_blocks(std::as_const(grad)));
    for (std::size_t i = 0; i < g.size(); ++i) d_theta[i] += g[i];
  }
  if (!d_z.empty())
    for (std::size_t j = 0; j < z.size(); ++j) d_z[j] += dz(0, j);
  return ll;
}

double UnknownMeanLikelihood::loglik(std::span<const double> theta, std::span<const double> x,
                                     std::span<const double>, std::span<double> d_theta,
                                     std::span<double>) const {
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - theta[i];
    s += -0.5 * (kLog2Pi + d * d);
    if (!d_theta.empty()) d_theta[i] += d;
  }
  return s;
}

ParamPosterior ParamPosterior::standard(std::size_t n) {
  return {Vector(n, 0.0), Vector(n, 0.0)};
}

void ParamPosterior::validate() const {
  if (mean.size() != log_var.size()) throw ContractError("ParamPosterior: mean/log_var size mismatch");
}

double f_phi(const FlatLikelihood& model, std::span<const double> x, std::span<const double> z,
             std::span<const double> theta, std::size_t dataset_size, const GaussianParams& q_z,
             const ParamPosterior& q_theta) {
  check_shapes(model, x, z, theta);
  q_theta.validate();
  if (q_theta.size() != theta.size() || q_z.mean.size() != z.size()) {
    throw ContractError("f_phi: posterior sizes do not match theta or z");
  }
  const double n = static_cast<double>(dataset_size);
  const double point = model.loglik(theta, x, z, {}, {}) + log_std_normal(z) -
                       log_diag_normal(z, q_z.mean, q_z.log_var);
  return n * point + log_std_normal(theta) - log_diag_normal(theta, q_theta.mean, q_theta.log_var);
}

double neg_kl_params(const ParamPosterior& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < q.size(); ++i) {
    const double lv = clamp_log_var(q.log_var[i]);
    s += 0.5 * (1.0 + lv - q.mean[i] * q.mean[i] - std::exp(lv));
  }
  return s;
}

FullVbGradient fullvb_draw(const FlatLikelihood& model, const GaussianMlp& encoder,
                           const ParamPosterior& q_theta, std::span<const double> x,
                           std::span<const double> eps, std::span<const double> zeta,
                           std::size_t dataset_size, bool analytic_kl) {
  q_theta.validate();
  const std::size_t p = model.num_params(), j = model.latent_dim();
  if (q_theta.size() != p || zeta.size() != p || eps.size() != j || encoder.output_dim() != j) {
    throw ContractError("fullvb_draw: noise or posterior sizes do not match the model");
  }
  const double n = static_cast<double>(dataset_size);

  const Matrix xm(1, x.size(), Vector(x.begin(), x.end()));
  const GaussianActivations act = gaussian_forward_batch(encoder, xm);
  Vector sz(j), z(j);
  for (std::size_t k = 0; k < j; ++k) {
    sz[k] = std::exp(0.5 * act.log_var(0, k));
    z[k] = act.mean(0, k) + sz[k] * eps[k];
  }
  Vector st(p), theta(p);
  for (std::size_t i = 0; i < p; ++i) {
    st[i] = std::exp(0.5 * clamp_log_var(q_theta.log_var[i]));
    theta[i] = q_theta.mean[i] + st[i] * zeta[i];
  }

  Vector dl_theta(p, 0.0), dl_z(j, 0.0);
  const double ll = model.loglik(theta, x, z, dl_theta, dl_z);

  FullVbGradient out;
  out.d_mean.assign(p, 0.0);
  out.d_log_var.assign(p, 0.0);
  Matrix d_mu_z(1, j), d_lv_z(1, j);
  if (analytic_kl) {
    double neg_kl_z = 0.0;
    for (std::size_t k = 0; k < j; ++k) {
      const double mu = act.mean(0, k), lv = act.log_var(0, k);
      neg_kl_z += 0.5 * (1.0 + lv - mu * mu - std::exp(lv));
      const double dz = n * dl_z[k];
      d_mu_z(0, k) = dz - n * mu;
      d_lv_z(0, k) = dz * eps[k] * sz[k] * 0.5 + n * 0.5 * (1.0 - std::exp(lv));
    }
    out.estimate = n * (neg_kl_z + ll) + neg_kl_params(q_theta);
    for (std::size_t i = 0; i < p; ++i) {
      const double dt = n * dl_theta[i];
      out.d_mean[i] = dt - q_theta.mean[i];
      const double lv = clamp_log_var(q_theta.log_var[i]);
      out.d_log_var[i] = clamped(q_theta.log_var[i]) ? 0.0 : dt * zeta[i] * st[i] * 0.5 + 0.5 * (1.0 - std::exp(lv));
    }
  } else {
    // Pathwise: log q(z) = -1/2 sum(log 2pi + lv + eps^2) depends on lv only.
    double log_q_z = 0.0;
    for (std::size_t k = 0; k < j; ++k) {
      log_q_z += -0.5 * (kLog2Pi + act.log_var(0, k) + eps[k] * eps[k]);
      const double dz = n * (dl_z[k] - z[k]);
      d_mu_z(0, k) = dz;
      d_lv_z(0, k) = dz * eps[k] * sz[k] * 0.5 + n * 0.5;
    }
    double log_q_t = 0.0;
    for (std::size_t i = 0; i < p; ++i) {
      log_q_t += -0.5 * (kLog2Pi + clamp_log_var(q_theta.log_var[i]) + zeta[i] * zeta[i]);
      const double dt = n * dl_theta[i] - theta[i];
      out.d_mean[i] = dt;
      out.d_log_var[i] = clamped(q_theta.log_var[i]) ? 0.0 : dt * zeta[i] * st[i] * 0.5 + 0.5;
    }
    out.estimate = n * (ll + log_std_normal(z) - log_q_z) + log_std_normal(theta) - log_q_t;
  }
  if (!std::isfinite(out.estimate)) throw NumericError("fullvb", "non-finite objective");

  out.d_encoder = encoder;
  zero_blocks(out.d_encoder.blocks());
  gaussian_backward(encoder, xm, act, d_mu_z, d_lv_z, &out.d_encoder, false);
  return out;
}

namespace {

FullVbGradient average_draws(const FlatLikelihood& model, const Matrix& data,
                             const ParamPosterior& q_theta, const GaussianMlp& encoder,
                             std::size_t samples, Rng& rng, bool analytic_kl) {
  if (data.rows() == 0) throw ContractError("fullvb: empty dataset");
  if (samples == 0) throw ContractError("fullvb: need at least one sample");
  const std::size_t p = model.num_params(), j = model.latent_dim();
  FullVbGradient acc;
  acc.d_mean.assign(p, 0.0);
  acc.d_log_var.assign(p, 0.0);
  acc.d_encoder = encoder;
  zero_blocks(acc.d_encoder.blocks());
  const double w = 1.0 / static_cast<double>(samples);
  Vector eps(j), zeta(p);
  for (std::size_t l = 0; l < samples; ++l) {
    const std::size_t i = rng.below(data.rows());
    rng.fill_normal(eps);
    rng.fill_normal(zeta);
    const FullVbGradient g =
        fullvb_draw(model, encoder, q_theta, data.row(i), eps, zeta, data.rows(), analytic_kl);
    acc.estimate += w * g.estimate;
    for (std::size_t k = 0; k < p; ++k) {
      acc.d_mean[k] += w * g.d_mean[k];
      acc.d_log_var[k] += w * g.d_log_var[k];
    }
    axpy_blocks(acc.d_encoder.blocks(), g.d_encoder.blocks(), w);
  }
  return acc;
}

}  // namespace

FullVbGradient fullvb_gradient(const FlatLikelihood& model, const Matrix& data,
                               const ParamPosterior& q_theta, const GaussianMlp& encoder,
                               std::size_t samples, Rng& rng) {
  return average_draws(model, data, q_theta, encoder, samples, rng, false);
}

FullVbGradient fullvb_gaussian_gradient(const FlatLikelihood& model, const Matrix& data,
                                        const ParamPosterior& q_theta, const GaussianMlp& encoder,
                                        std::size_t samples, Rng& rng) {
  return average_draws(model, data, q_theta, encoder, samples, rng, true);
}

double fullvb_gaussian_estimate(const FlatLikelihood& model, const Matrix& data,
                                const ParamPosterior& q_theta, const GaussianMlp& encoder,
                                std::size_t samples, Rng& rng) {
  return fullvb_gaussian_gradient(model, data, q_theta, encoder, samples, rng).estimate;
}

FullVbFit fit_fullvb(const FlatLikelihood& model, const Matrix& data, std::size_t encoder_hidden,
                     const FullVbFitConfig& cfg) {
  Rng rng(cfg.seed);
  FullVbFit fit;
  fit.q_theta = ParamPosterior::standard(model.num_params());
  fit.encoder = GaussianMlp::zeros(model.data_dim(), encoder_hidden, model.latent_dim(), false);
  for (auto b : fit.encoder.blocks())
    for (double& v : b) v = kInitStddev * rng.standard_normal();

  AdagradState opt;
  opt.stepsize = cfg.stepsize;
  // q(theta) is reported as the average of the iterates over the second half.
  const std::size_t avg_from = cfg.iterations / 2;
  ParamPosterior avg{Vector(model.num_params(), 0.0), Vector(model.num_params(), 0.0)};
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    FullVbGradient g = fullvb_gaussian_gradient(model, data, fit.q_theta, fit.encoder, cfg.samples, rng);
    ParamBlocks params = fit.encoder.blocks();
    params.push_back(fit.q_theta.mean);
    params.push_back(fit.q_theta.log_var);
    ConstParamBlocks grads = std::as_const(g.d_encoder).blocks();
    grads.push_back(g.d_mean);
    grads.push_back(g.d_log_var);
    adagrad_step(opt, params, grads);
    fit.final_estimate = g.estimate;
    if (t >= avg_from) {
      const double w = 1.0 / static_cast<double>(t - avg_from + 1);
      for (std::size_t i = 0; i < avg.size(); ++i) {
        avg.mean[i] += w * (fit.q_theta.mean[i] - avg.mean[i]);
        avg.log_var[i] += w * (fit.q_theta.log_var[i] - avg.log_var[i]);
      }
    }
  }
  if (cfg.iterations > 0) fit.q_theta = std::move(avg);
  return fit;
}

}  // namespace aevb
