#pragma once

#include <cstddef>
#include <memory>
#include <span>

#include "aevb/networks.hpp"
#include "aevb/numkit.hpp"

namespace aevb {

// A generative model p_theta(x|z) with a flat parameter vector theta.
class FlatLikelihood {
 public:
  virtual ~FlatLikelihood() = default;
  virtual std::size_t num_params() const = 0;
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t data_dim() const = 0;
  // log p_theta(x|z). Gradients are added into d_theta and d_z when non-empty.
  virtual double loglik(std::span<const double> theta, std::span<const double> x,
                        std::span<const double> z, std::span<double> d_theta,
                        std::span<double> d_z) const = 0;
};

// Any networks decoder, its parameters flattened in block order.
class DecoderLikelihood final : public FlatLikelihood {
 public:
  explicit DecoderLikelihood(Decoder shape) : shape_(std::move(shape)) {}
  std::size_t num_params() const override;
  std::size_t latent_dim() const override { return decoder_input_dim(shape_); }
  std::size_t data_dim() const override { return decoder_output_dim(shape_); }
  double loglik(std::span<const double> theta, std::span<const double> x, std::span<const double> z,
                std::span<double> d_theta, std::span<double> d_z) const override;

 private:
  Decoder shape_;
};

// x ~ N(theta, I) with theta the same size as x; z is ignored.
class UnknownMeanLikelihood final : public FlatLikelihood {
 public:
  UnknownMeanLikelihood(std::size_t data_dim, std::size_t latent_dim)
      : data_dim_(data_dim), latent_dim_(latent_dim) {}
  std::size_t num_params() const override { return data_dim_; }
  std::size_t latent_dim() const override { return latent_dim_; }
  std::size_t data_dim() const override { return data_dim_; }
  double loglik(std::span<const double> theta, std::span<const double> x, std::span<const double> z,
                std::span<double> d_theta, std::span<double> d_z) const override;

 private:
  std::size_t data_dim_, latent_dim_;
};

// q(theta) = N(mean, diag(exp(log_var))); the hyperprior is N(0, I).
struct ParamPosterior {
  Vector mean;
  Vector log_var;  // clamped to [kLogVarMin, kLogVarMax] when used

  static ParamPosterior standard(std::size_t n);  // mean 0, variance 1
  std::size_t size() const noexcept { return mean.size(); }
  void validate() const;
};

// N (log p_theta(x|z) + log p(z) - log q(z|x)) + log p(theta) - log q(theta).
double f_phi(const FlatLikelihood& model, std::span<const double> x, std::span<const double> z,
             std::span<const double> theta, std::size_t dataset_size, const GaussianParams& q_z,
             const ParamPosterior& q_theta);

struct FullVbGradient {
  double estimate = 0.0;
  Vector d_mean;      // over q_theta.mean
  Vector d_log_var;   // over q_theta.log_var
  GaussianMlp d_encoder;
};

// One draw of the full-VB estimator at the given datapoint and noise: theta =
// mu + sigma * zeta, z = mu_z(x) + sigma_z(x) * eps. With analytic_kl the
// lower-variance form is used: N (-KL_z + log p(x|z)) - KL_theta.
FullVbGradient fullvb_draw(const FlatLikelihood& model, const GaussianMlp& encoder,
                           const ParamPosterior& q_theta, std::span<const double> x,
                           std::span<const double> eps, std::span<const double> zeta,
                           std::size_t dataset_size, bool analytic_kl);

// Average of L draws, each with a datapoint picked uniformly (with
// replacement) from the rows of data.
FullVbGradient fullvb_gradient(const FlatLikelihood& model, const Matrix& data,
                               const ParamPosterior& q_theta, const GaussianMlp& encoder,
                               std::size_t samples, Rng& rng);

// The lower-variance estimator and its gradient.
FullVbGradient fullvb_gaussian_gradient(const FlatLikelihood& model, const Matrix& data,
                                        const ParamPosterior& q_theta, const GaussianMlp& encoder,
                                        std::size_t samples, Rng& rng);

double fullvb_gaussian_estimate(const FlatLikelihood& model, const Matrix& data,
                                const ParamPosterior& q_theta, const GaussianMlp& encoder,
                                std::size_t samples, Rng& rng);

// -KL(q(theta) || N(0, I)).
double neg_kl_params(const ParamPosterior& q);

struct FullVbFitConfig {
  std::size_t iterations = 10000;
  std::size_t samples = 200;
  double stepsize = 0.1;  // Adagrad
  std::uint64_t seed = 0;
};

struct FullVbFit {
  ParamPosterior q_theta;
  GaussianMlp encoder;
  double final_estimate = 0.0;
};

// Stochastic ascent of the lower-variance estimator with Adagrad on all
// variational parameters, starting from q_theta = N(0, I). The returned
// q_theta is the iterate average over the second half of the run.
FullVbFit fit_fullvb(const FlatLikelihood& model, const Matrix& data, std::size_t encoder_hidden,
                     const FullVbFitConfig& cfg);

}  // namespace aevb
