#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace aevb {

using Vector = std::vector<double>;

// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, Vector data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> flat() noexcept { return data_; }
  std::span<const double> flat() const noexcept { return data_; }
  const Vector& data() const noexcept { return data_; }

  Matrix transpose() const;
  void fill(double v);
  bool all_finite() const noexcept;

  // "RxC" for error messages.
  std::string shape_string() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vector data_;
};

// a * b.
Matrix matmul(const Matrix& a, const Matrix& b);
// a^T * b without materializing the transpose.
Matrix matmul_at(const Matrix& a, const Matrix& b);
// a * b^T.
Matrix matmul_bt(const Matrix& a, const Matrix& b);
// y = m * x for a vector x.
Vector matvec(const Matrix& m, std::span<const double> x);

double dot(std::span<const double> a, std::span<const double> b);
double sum(std::span<const double> v);
double squared_norm(std::span<const double> v);

double sigmoid(double x) noexcept;
// log(sum(exp(v))) without overflow.
double log_sum_exp(std::span<const double> v);

inline constexpr double kLog2Pi = 1.8378770664093454835606594728112;

// xoshiro256** seeded through splitmix64. Normal draws use the Marsaglia
// polar method; the unused member of each accepted pair is cached.
class Rng {
 public:
  struct State {
    std::array<std::uint64_t, 4> s{};
    bool has_spare = false;
    double spare = 0.0;
    friend bool operator==(const State&, const State&) = default;
  };

  explicit Rng(std::uint64_t seed = 0);
  explicit Rng(const State& state) : state_(state) {}

  std::uint64_t next_u64() noexcept;
  // [0, 1) with 53 random bits.
  double uniform() noexcept;
  // (0, 1): never returns an endpoint.
  double uniform_open() noexcept;
  double standard_normal() noexcept;
  // Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept;

  void fill_normal(std::span<double> out) noexcept;
  Vector normal_vector(std::size_t n);
  Matrix normal_matrix(std::size_t rows, std::size_t cols);

  // Independent generator for worker i; seed_i = mix(seed, i).
  static Rng split(std::uint64_t seed, std::uint64_t i);

  const State& state() const noexcept { return state_; }
  void set_state(const State& s) noexcept { state_ = s; }

 private:
  State state_;
};

std::uint64_t splitmix64(std::uint64_t& x) noexcept;

// n iid standard-normal draws.
Vector rng_standard_normal(Rng& rng, std::size_t n);

// Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> random_permutation(Rng& rng, std::size_t n);

using ScalarFn = std::function<double(std::span<const double>)>;

// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h per coordinate.
// Throws NumericError naming the coordinate if f is not finite.
Vector finite_diff_grad(const ScalarFn& f, std::span<const double> x, double h = 1e-5);

}  // namespace aevb
