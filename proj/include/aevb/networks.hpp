#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <variant>
#include <vector>

#include "aevb/numkit.hpp"

namespace aevb {

inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;
inline constexpr double kProbClamp = 1e-7;

using ParamBlocks = std::vector<std::span<double>>;
using ConstParamBlocks = std::vector<std::span<const double>>;

// Diagonal Gaussian: mean and log-variance.
struct GaussianParams {
  Vector mean;
  Vector log_var;
};

// p(x|z) = Bernoulli(y), y = sigmoid(W2 tanh(W1 z + b1) + b2).
struct BernoulliMlp {
  Matrix w1;  // hidden x latent
  Vector b1;
  Matrix w2;  // data x hidden
  Vector b2;

  static BernoulliMlp zeros(std::size_t in, std::size_t hidden, std::size_t out);

  std::size_t input_dim() const noexcept { return w1.cols(); }
  std::size_t hidden_dim() const noexcept { return w1.rows(); }
  std::size_t output_dim() const noexcept { return w2.rows(); }
  void validate() const;

  ParamBlocks blocks();
  ConstParamBlocks blocks() const;
};

// N(mu, diag(exp(log_var))) with
//   h = tanh(W3 in + b3), mu = W4 h + b4, log_var = W5 h + b5.
// With clamp_mean_unit_interval the mean is passed through a sigmoid.
// log_var is clamped to [-10, 10].
struct GaussianMlp {
  Matrix w3;  // hidden x in
  Vector b3;
  Matrix w4;  // out x hidden
  Vector b4;
  Matrix w5;  // out x hidden
  Vector b5;
  bool clamp_mean_unit_interval = false;

  static GaussianMlp zeros(std::size_t in, std::size_t hidden, std::size_t out,
                           bool clamp_mean = false);

  std::size_t input_dim() const noexcept { return w3.cols(); }
  std::size_t hidden_dim() const noexcept { return w3.rows(); }
  std::size_t output_dim() const noexcept { return w4.rows(); }
  void validate() const;

  ParamBlocks blocks();
  ConstParamBlocks blocks() const;
};

// Linear-Gaussian decoder p(x|z) = N(W z + b, exp(log_noise_var) I); the
// probabilistic PCA model. Used where an exact marginal likelihood is needed.
struct LinearGaussian {
  Matrix w;  // data x latent
  Vector b;
  Vector log_noise_var;  // single entry

  static LinearGaussian zeros(std::size_t latent, std::size_t data);

  std::size_t input_dim() const noexcept { return w.cols(); }
  std::size_t output_dim() const noexcept { return w.rows(); }
  double noise_var() const;
  void validate() const;

  ParamBlocks blocks();
  ConstParamBlocks blocks() const;
};

enum class DecoderFamily { Bernoulli = 0, Gaussian = 1, LinearGaussian = 2 };

std::string_view decoder_family_name(DecoderFamily f) noexcept;
DecoderFamily parse_decoder_family(std::string_view name);

using Decoder = std::variant<BernoulliMlp, GaussianMlp, LinearGaussian>;

DecoderFamily decoder_family(const Decoder& d) noexcept;
std::size_t decoder_input_dim(const Decoder& d) noexcept;
std::size_t decoder_output_dim(const Decoder& d) noexcept;
ParamBlocks decoder_blocks(Decoder& d);
ConstParamBlocks decoder_blocks(const Decoder& d);

// Layer sizes of a VAE.
struct VaeShape {
  std::size_t data_dim = 0;
  std::size_t encoder_hidden = 0;
  std::size_t decoder_hidden = 0;  // ignored by LinearGaussian
  std::size_t latent_dim = 0;
  DecoderFamily family = DecoderFamily::Bernoulli;
  bool clamp_mean = false;

  void validate() const;
  friend bool operator==(const VaeShape&, const VaeShape&) = default;
};

// Encoder q_phi(z|x) and decoder p_theta(x|z) with prior p(z) = N(0, I).
struct VaeModel {
  GaussianMlp encoder;
  Decoder decoder;

  static VaeModel zeros(const VaeShape& shape);

  std::size_t latent_dim() const noexcept { return encoder.output_dim(); }
  std::size_t data_dim() const noexcept { return encoder.input_dim(); }
  VaeShape shape() const;
  void validate() const;

  // Encoder blocks followed by decoder blocks.
  ParamBlocks blocks();
  ConstParamBlocks blocks() const;
};

std::size_t total_size(const ConstParamBlocks& blocks) noexcept;
Vector flatten(const ConstParamBlocks& blocks);
void unflatten(std::span<const double> flat, const ParamBlocks& blocks);
void scale_blocks(const ParamBlocks& blocks, double factor);
void zero_blocks(const ParamBlocks& blocks);
// dst += factor * src, block by block.
void axpy_blocks(const ParamBlocks& dst, const ConstParamBlocks& src, double factor = 1.0);

inline ConstParamBlocks as_const(const ParamBlocks& b) { return {b.begin(), b.end()}; }
inline Vector flatten(const ParamBlocks& blocks) { return flatten(as_const(blocks)); }

// ---- single-vector forward passes and log-likelihoods ----

Vector bernoulli_forward(const BernoulliMlp& net, std::span<const double> z);
// sum x log y + (1 - x) log(1 - y), with y clamped to [1e-7, 1 - 1e-7].
double bernoulli_loglik(std::span<const double> x, std::span<const double> y);

GaussianParams gaussian_forward(const GaussianMlp& net, std::span<const double> input);
double gaussian_loglik(std::span<const double> x, const GaussianParams& p);

// ---- batched passes; each matrix row is one example ----

struct BernoulliActivations {
  Matrix hidden;  // tanh outputs
  Matrix probs;   // y
};
BernoulliActivations bernoulli_forward_batch(const BernoulliMlp& net, const Matrix& z);

struct GaussianActivations {
  Matrix hidden;
  Matrix mean;
  Matrix log_var;      // after clamping
  Matrix log_var_raw;  // before clamping
};
GaussianActivations gaussian_forward_batch(const GaussianMlp& net, const Matrix& input);

// Backpropagates d(objective)/d(mean) and d(objective)/d(log_var) (with
// respect to the post-clamp, post-sigmoid outputs). Parameter gradients are
// added into grad when non-null; the input gradient is returned when
// want_input_grad is set, otherwise an empty matrix.
Matrix gaussian_backward(const GaussianMlp& net, const Matrix& input,
                         const GaussianActivations& act, const Matrix& d_mean,
                         const Matrix& d_log_var, GaussianMlp* grad, bool want_input_grad);

// Row-wise log N(target; mean, diag(exp(log_var))) under a Gaussian MLP given
// its inputs. When grad/d_input are non-null, accumulates
// sum_r weight[r] * d loglik_r / d(params) into grad and writes
// weight[r] * d loglik_r / d(input_r) into d_input.
Vector gaussian_mlp_loglik(const GaussianMlp& net, const Matrix& input, const Matrix& target,
                           std::span<const double> weight = {}, GaussianMlp* grad = nullptr,
                           Matrix* d_input = nullptr);

// Row-wise log p(x_r | z_r) for any decoder family, with the same
// gradient-accumulation contract as gaussian_mlp_loglik.
Vector decoder_loglik(const Decoder& dec, const Matrix& z, const Matrix& x,
                      std::span<const double> weight = {}, Decoder* grad = nullptr,
                      Matrix* d_z = nullptr);

// Decoder mean E[x|z] per row.
Matrix decoder_mean(const Decoder& dec, const Matrix& z);
// One draw x ~ p(x|z) per row.
Matrix decoder_sample(const Decoder& dec, const Matrix& z, Rng& rng);

// ---- the reparameterized VAE objective and its gradient ----

enum class Estimator {
  A,  // fully sampled: mean of log p(x,z) - log q(z|x)
  B   // analytic KL plus sampled reconstruction term
};

struct VaeGradient {
  double objective = 0.0;  // summed over datapoints
  Vector per_point;        // objective per datapoint
  VaeModel grad;           // summed over datapoints
};

// Estimator value and exact gradient for one datapoint; eps holds L rows of
// standard-normal noise of width J and z_l = mu + sigma * eps_l.
VaeGradient vae_backward(const VaeModel& model, std::span<const double> x, const Matrix& eps,
                         Estimator estimator = Estimator::B);

// Same for a batch: x is B x D, eps is (B * L) x J with rows b*L .. b*L+L-1
// belonging to datapoint b.
VaeGradient vae_backward_batch(const VaeModel& model, const Matrix& x, const Matrix& eps,
                               std::size_t samples_per_point,
                               Estimator estimator = Estimator::B);

// Objective values only (no gradient), per datapoint.
Vector vae_objective_batch(const VaeModel& model, const Matrix& x, const Matrix& eps,
                           std::size_t samples_per_point, Estimator estimator = Estimator::B);

// Rows of m selected by idx.
Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx);

}  // namespace aevb
