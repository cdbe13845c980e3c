#include "aevb/samplers.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "aevb/errors.hpp"

namespace aevb {

int ReparamFamily::num_params() const noexcept {
  switch (kind) {
    case Kind::Exponential:
    case Kind::Rayleigh:
      return 1;
    default:
      return 2;
  }
}

void ReparamFamily::validate() const {
  const auto positive = [&](double v, const char* what) {
    if (!(v > 0) || !std::isfinite(v)) {
      throw ParameterError(std::string(family_name(kind)) + ": " + what + " must be positive");
    }
  };
  switch (kind) {
    case Kind::GaussianLocScale:
    case Kind::Cauchy:
    case Kind::Logistic:
    case Kind::Gumbel:
      positive(b, "scale");
      break;
    case Kind::Exponential:
      positive(a, "rate");
      break;
    case Kind::Rayleigh:
      positive(a, "scale");
      break;
    case Kind::Weibull:
      positive(a, "shape");
      positive(b, "scale");
      break;
    case Kind::LogNormal:
      positive(b, "sigma");
      break;
  }
}

std::string_view family_name(ReparamFamily::Kind kind) noexcept {
  using K = ReparamFamily::Kind;
  switch (kind) {
    case K::GaussianLocScale: return "gaussian";
    case K::Exponential: return "exponential";
    case K::Cauchy: return "cauchy";
    case K::Logistic: return "logistic";
    case K::Rayleigh: return "rayleigh";
    case K::Weibull: return "weibull";
    case K::Gumbel: return "gumbel";
    case K::LogNormal: return "lognormal";
  }
  return "unknown";
}

Vector sample_loc_scale(std::span<const double> loc, std::span<const double> scale,
                        std::span<const double> eps) {
  if (loc.size() != scale.size() || loc.size() != eps.size()) {
    throw ContractError("sample_loc_scale: length mismatch");
  }
  Vector z(loc.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    if (!(scale[i] > 0)) throw ParameterError("sample_loc_scale: scale must be positive");
    z[i] = loc[i] + scale[i] * eps[i];
  }
  return z;
}

namespace {

double checked_uniform(double u) {
  if (!(u > 0.0 && u < 1.0)) {
    throw ParameterError("inverse CDF: u must lie in (0, 1), got " + std::to_string(u));
  }
  return std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
}

}  // namespace

double sample_inverse_cdf(const ReparamFamily& f, double u) {
  f.validate();
  u = checked_uniform(u);
  using K = ReparamFamily::Kind;
  switch (f.kind) {
    case K::GaussianLocScale: return f.a + f.b * normal_quantile(u);
    case K::Exponential: return -std::log1p(-u) / f.a;
    case K::Cauchy: return f.a + f.b * std::tan(std::numbers::pi * (u - 0.5));
    case K::Logistic: return f.a + f.b * std::log(u / (1.0 - u));
    case K::Rayleigh: return f.a * std::sqrt(-2.0 * std::log1p(-u));
    case K::Weibull: return f.b * std::pow(-std::log1p(-u), 1.0 / f.a);
    case K::Gumbel: return f.a - f.b * std::log(-std::log(u));
    case K::LogNormal: return std::exp(f.a + f.b * normal_quantile(u));
  }
  return 0.0;
}

std::array<double, 2> inverse_cdf_param_grad(const ReparamFamily& f, double u) {
  f.validate();
  u = checked_uniform(u);
  using K = ReparamFamily::Kind;
  switch (f.kind) {
    case K::GaussianLocScale: return {1.0, normal_quantile(u)};
    case K::Exponential: return {std::log1p(-u) / (f.a * f.a), 0.0};
    case K::Cauchy: return {1.0, std::tan(std::numbers::pi * (u - 0.5))};
    case K::Logistic: return {1.0, std::log(u / (1.0 - u))};
    case K::Rayleigh: return {std::sqrt(-2.0 * std::log1p(-u)), 0.0};
    case K::Weibull: {
      const double t = -std::log1p(-u);
      const double p = std::pow(t, 1.0 / f.a);
      return {-f.b * p * std::log(t) / (f.a * f.a), p};
    }
    case K::Gumbel: return {1.0, -std::log(-std::log(u))};
    case K::LogNormal: {
      const double q = normal_quantile(u);
      const double z = std::exp(f.a + f.b * q);
      return {z, z * q};
    }
  }
  return {0.0, 0.0};
}

double sample_composed(const ReparamFamily& f, double eps) {
  if (f.kind != ReparamFamily::Kind::LogNormal) {
    throw ContractError("sample_composed: only the log-normal composition is supported");
  }
  f.validate();
  return std::exp(f.a + f.b * eps);
}

double reparam_draw(const ReparamFamily& f, Rng& rng) {
  using K = ReparamFamily::Kind;
  switch (f.kind) {
    case K::GaussianLocScale: {
      f.validate();
      return f.a + f.b * rng.standard_normal();
    }
    case K::LogNormal: return sample_composed(f, rng.standard_normal());
    default: return sample_inverse_cdf(f, rng.uniform_open());
  }
}

double family_cdf(const ReparamFamily& f, double z) {
  f.validate();
  using K = ReparamFamily::Kind;
  switch (f.kind) {
    case K::GaussianLocScale: return normal_cdf((z - f.a) / f.b);
    case K::Exponential: return z <= 0 ? 0.0 : -std::expm1(-f.a * z);
    case K::Cauchy: return 0.5 + std::atan((z - f.a) / f.b) / std::numbers::pi;
    case K::Logistic: return sigmoid((z - f.a) / f.b);
    case K::Rayleigh: return z <= 0 ? 0.0 : -std::expm1(-z * z / (2.0 * f.a * f.a));
    case K::Weibull: return z <= 0 ? 0.0 : -std::expm1(-std::pow(z / f.b, f.a));
    case K::Gumbel: return std::exp(-std::exp(-(z - f.a) / f.b));
    case K::LogNormal: return z <= 0 ? 0.0 : normal_cdf((std::log(z) - f.a) / f.b);
  }
  return 0.0;
}

double normal_cdf(double x) noexcept { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_quantile(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw ParameterError("normal_quantile: p must lie in (0, 1), got " + std::to_string(p));
  }
  // Acklam's rational approximation (relative error below 1.2e-9) followed by
  // one Halley step against erfc.
  static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                                 -2.759285104469687e+02, 1.383577518672690e+02,
                                 -3.066479806614716e+01, 2.506628277459239e+00};
  static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                                 -1.556989798598866e+02, 6.680131188771972e+01,
                                 -1.328068155288572e+01};
  static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                                 -2.400758277161838e+00, -2.549732539343734e+00,
                                 4.374664141464968e+00,  2.938163982698783e+00};
  static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                                 2.445134137142996e+00, 3.754408661907416e+00};
  constexpr double p_low = 0.02425;
  double x;
  if (p < p_low) {
    const double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    const double q = p - 0.5;
    const double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    const double q = std::sqrt(-2.0 * std::log1p(-p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }
  const double e = normal_cdf(x) - p;
  const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(0.5 * x * x);
  return x - u / (1.0 + 0.5 * x * u);
}

}  // namespace aevb
