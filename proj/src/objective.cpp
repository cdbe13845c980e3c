#include "aevb/objective.hpp"

#include <cmath>

#include "aevb/errors.hpp"
#include "aevb/samplers.hpp"

namespace aevb {

double kl_gauss_prior(const GaussianParams& p) {
  if (p.mean.size() != p.log_var.size()) throw ContractError("kl_gauss_prior: length mismatch");
  double s = 0.0;
  for (std::size_t j = 0; j < p.mean.size(); ++j)
    s += 1.0 + p.log_var[j] - p.mean[j] * p.mean[j] - std::exp(p.log_var[j]);
  return 0.5 * s;
}

namespace {

struct Draws {
  GaussianParams q;
  Matrix z;
  Vector loglik;  // log p(x|z_l)
};

Draws draw(const VaeModel& model, std::span<const double> x, const Matrix& eps) {
  model.validate();
  const std::size_t J = model.latent_dim();
  if (eps.cols() != J || eps.rows() == 0) {
    throw ContractError("sgvb: noise matrix " + eps.shape_string() + " must have " +
                        std::to_string(J) + " columns and at least one row");
  }
  Draws d;
  d.q = gaussian_forward(model.encoder, x);
  Vector sigma(J);
  for (std::size_t j = 0; j < J; ++j) sigma[j] = std::exp(0.5 * d.q.log_var[j]);
  d.z = Matrix(eps.rows(), J);
  Matrix xrep(eps.rows(), x.size());
  for (std::size_t l = 0; l < eps.rows(); ++l) {
    auto zl = sample_loc_scale(d.q.mean, sigma, eps.row(l));
    std::copy(zl.begin(), zl.end(), d.z.row(l).begin());
    std::copy(x.begin(), x.end(), xrep.row(l).begin());
  }
  d.loglik = decoder_loglik(model.decoder, d.z, xrep);
  return d;
}

}  // namespace

BoundEstimate sgvb_a(const VaeModel& model, std::span<const double> x, const Matrix& eps) {
  auto d = draw(model, x, eps);
  const std::size_t L = eps.rows(), J = model.latent_dim();
  BoundEstimate est;
  est.n_samples = L;
  est.per_sample_values.resize(L);
  const GaussianParams prior{Vector(J, 0.0), Vector(J, 0.0)};
  for (std::size_t l = 0; l < L; ++l) {
    const auto zl = d.z.row(l);
    const double log_p = gaussian_loglik(zl, prior) + d.loglik[l];
    const double log_q = gaussian_loglik(zl, d.q);
    est.per_sample_values[l] = log_p - log_q;
  }
  est.value = sum(est.per_sample_values) / static_cast<double>(L);
  return est;
}

BoundEstimate sgvb_b(const VaeModel& model, std::span<const double> x, const Matrix& eps) {
  auto d = draw(model, x, eps);
  BoundEstimate est;
  est.n_samples = eps.rows();
  est.analytic_component = kl_gauss_prior(d.q);
  est.per_sample_values = std::move(d.loglik);
  est.value = est.analytic_component +
              sum(est.per_sample_values) / static_cast<double>(est.n_samples);
  return est;
}

double minibatch_bound(std::span<const double> per_point, std::size_t dataset_size) {
  if (per_point.empty()) throw ContractError("minibatch_bound: empty minibatch");
  if (dataset_size < per_point.size()) {
    throw ContractError("minibatch_bound: dataset size smaller than minibatch");
  }
  return static_cast<double>(dataset_size) / static_cast<double>(per_point.size()) *
         sum(per_point);
}

}  // namespace aevb
