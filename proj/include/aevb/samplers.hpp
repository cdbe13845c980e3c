#pragma once

#include <span>
#include <string_view>

#include "aevb/numkit.hpp"

namespace aevb {

// Distributions reachable by a differentiable map of parameter-free noise.
//
// Three strategies are covered:
//   location-scale: z = loc + scale * eps with eps from the standard member,
//   inverse CDF:    z = F^-1(u) with u ~ U(0, 1),
//   composition:    z = exp(mu + sigma * eps) for the log-normal.
//
// Gamma sums, Dirichlet, Student's t and the other composite families are
// not part of the catalog; they slot in as further Kind values with their
// own inverse/composition map.
struct ReparamFamily {
  enum class Kind { GaussianLocScale, Exponential, Cauchy, Logistic, Rayleigh, Weibull, Gumbel, LogNormal };

  Kind kind = Kind::GaussianLocScale;
  // Meaning per kind:
  //   GaussianLocScale, Cauchy, Logistic, Gumbel: a = location, b = scale
  //   Exponential: a = rate
  //   Rayleigh:    a = scale
  //   Weibull:     a = shape, b = scale
  //   LogNormal:   a = mu, b = sigma
  double a = 0.0;
  double b = 1.0;

  static ReparamFamily gaussian(double loc, double scale) { return {Kind::GaussianLocScale, loc, scale}; }
  static ReparamFamily exponential(double rate) { return {Kind::Exponential, rate, 0.0}; }
  static ReparamFamily cauchy(double loc, double scale) { return {Kind::Cauchy, loc, scale}; }
  static ReparamFamily logistic(double loc, double scale) { return {Kind::Logistic, loc, scale}; }
  static ReparamFamily rayleigh(double scale) { return {Kind::Rayleigh, scale, 0.0}; }
  static ReparamFamily weibull(double shape, double scale) { return {Kind::Weibull, shape, scale}; }
  static ReparamFamily gumbel(double loc, double scale) { return {Kind::Gumbel, loc, scale}; }
  static ReparamFamily lognormal(double mu, double sigma) { return {Kind::LogNormal, mu, sigma}; }

  // Number of meaningful parameters (1 or 2).
  int num_params() const noexcept;
  // Throws ParameterError when a scale, rate or shape is not positive.
  void validate() const;
};

std::string_view family_name(ReparamFamily::Kind kind) noexcept;

inline constexpr double kUniformClamp = 1e-12;

// loc + scale * eps elementwise.
Vector sample_loc_scale(std::span<const double> loc, std::span<const double> scale,
                        std::span<const double> eps);

// F^-1(u). u must lie in the open unit interval; it is then clamped to
// [1e-12, 1 - 1e-12].
double sample_inverse_cdf(const ReparamFamily& family, double u);

// d F^-1(u) / d(a, b) for the family's parameters; the second entry is 0 for
// one-parameter families.
std::array<double, 2> inverse_cdf_param_grad(const ReparamFamily& family, double u);

// exp(mu + sigma * eps).
double sample_composed(const ReparamFamily& lognormal, double eps);

// Draws one value through the family's reparameterization.
double reparam_draw(const ReparamFamily& family, Rng& rng);

// The family's CDF, used for testing and for numeric-inversion checks.
double family_cdf(const ReparamFamily& family, double z);

double normal_cdf(double x) noexcept;
// Inverse standard normal CDF for p in (0, 1).
double normal_quantile(double p);

}  // namespace aevb
