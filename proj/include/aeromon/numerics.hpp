#pragma once

// Small dense linear algebra, descriptive statistics and a portable seeded RNG.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "aeromon/error.hpp"

namespace aeromon {

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != " +
                       std::to_string(rows_) + "x" + std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

  std::vector<double>& data() noexcept { return data_; }
  const std::vector<double>& data() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul inner dimensions differ");
  Matrix c(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      for (std::size_t j = 0; j < b.cols(); ++j) c(i, j) += aik * b(k, j);
    }
  return c;
}

inline std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw ShapeError("matvec dimension mismatch");
  std::vector<double> y(a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) s += a(i, j) * x[j];
    y[i] = s;
  }
  return y;
}

/// Lower-triangular L with A = L * L^T. `jitter` is the diagonal shift that was
/// needed to factor A (zero when the plain factorization succeeded).
struct CholeskyFactor {
  std::size_t dim = 0;
  Matrix lower;
  double jitter = 0.0;
};

namespace detail {

// Plain Cholesky-Banachiewicz; returns false on a non-positive pivot.
inline bool try_cholesky(const Matrix& a, double shift, Matrix& l) {
  const std::size_t n = a.rows();
  l = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      double s = a(i, j) + (i == j ? shift : 0.0);
      for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      if (i == j) {
        if (!(s > 0.0) || !std::isfinite(s)) return false;
        l(i, i) = std::sqrt(s);
      } else {
        l(i, j) = s / l(j, j);
      }
    }
  }
  return true;
}

}  // namespace detail

/// Cholesky factorization with escalating diagonal jitter.
///
/// The unshifted matrix is tried first. On failure a shift starting at `jitter`
/// (or 1e-12 * trace/d when `jitter` is zero) is added to the diagonal and
/// multiplied by 10 after each failed attempt, up to a cap of 1e-3 * trace/d.
inline CholeskyFactor cholesky(const Matrix& a, double jitter = 0.0) {
  if (a.rows() != a.cols()) throw ShapeError("cholesky needs a square matrix");
  const std::size_t n = a.rows();
  if (n == 0) throw ShapeError("cholesky of an empty matrix");
  double trace = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (std::abs(a(i, j) - a(j, i)) > 1e-9) throw ShapeError("cholesky input is not symmetric");
    }
    trace += a(i, i);
  }

  CholeskyFactor f{n, Matrix{}, 0.0};
  if (detail::try_cholesky(a, 0.0, f.lower)) return f;

  const double scale = trace / static_cast<double>(n);
  const double cap = 1e-3 * scale;
  if (!(cap > 0.0) || !std::isfinite(cap)) {
    throw NotPositiveDefiniteError("factorization failed and trace/d = " + std::to_string(scale) +
                                   " leaves no room for jitter");
  }
  double shift = jitter > 0.0 ? jitter : 1e-12 * scale;
  while (shift <= cap) {
    if (detail::try_cholesky(a, shift, f.lower)) {
      f.jitter = shift;
      return f;
    }
    shift *= 10.0;
  }
  throw NotPositiveDefiniteError("factorization failed up to jitter cap " + std::to_string(cap));
}

/// Solves (L L^T) x = b by forward then back substitution.
inline std::vector<double> solve_spd(const CholeskyFactor& factor, std::span<const double> b) {
  const std::size_t n = factor.dim;
  if (b.size() != n) {
    throw ShapeError("solve_spd: rhs length " + std::to_string(b.size()) + " != " + std::to_string(n));
  }
  const Matrix& l = factor.lower;
  std::vector<double> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    double s = b[i];
    for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * y[k];
    y[i] = s / l(i, i);
  }
  std::vector<double> x(n);
  for (std::size_t ii = n; ii-- > 0;) {
    double s = y[ii];
    for (std::size_t k = ii + 1; k < n; ++k) s -= l(k, ii) * x[k];
    x[ii] = s / l(ii, ii);
  }
  return x;
}

struct MeanCovariance {
  std::vector<double> mean;
  Matrix cov;
};

/// Per-coordinate mean and sample covariance (divisor n - 1) of the rows of `rows`.
inline MeanCovariance covariance(const Matrix& rows) {
  const std::size_t n = rows.rows();
  const std::size_t d = rows.cols();
  if (n < 2) throw InsufficientDataError("covariance needs at least 2 rows, got " + std::to_string(n));
  MeanCovariance out{std::vector<double>(d, 0.0), Matrix(d, d)};
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < d; ++j) out.mean[j] += rows(r, j);
  for (double& m : out.mean) m /= static_cast<double>(n);

  std::vector<double> centered(d);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < d; ++j) centered[j] = rows(r, j) - out.mean[j];
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j <= i; ++j) out.cov(i, j) += centered[i] * centered[j];
  }
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      out.cov(i, j) /= denom;
      out.cov(j, i) = out.cov(i, j);
    }
  return out;
}

/// Overload for ragged input; every row must have the same length.
inline MeanCovariance covariance(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2) {
    throw InsufficientDataError("covariance needs at least 2 rows, got " + std::to_string(rows.size()));
  }
  const std::size_t d = rows.front().size();
  Matrix m(rows.size(), d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != d) throw ShapeError("covariance: row " + std::to_string(r) + " has a different length");
    std::copy(rows[r].begin(), rows[r].end(), m.row(r).begin());
  }
  return covariance(m);
}

enum class PercentileMethod {
  /// rank = p/100 * (n-1), linear interpolation between neighbouring order statistics.
  Linear,
  /// Nearest rank: the smallest order statistic with at least p% of values at or below it.
  NearestRank,
};

inline double percentile(std::span<const double> values, double p,
                         PercentileMethod method = PercentileMethod::Linear) {
  if (values.empty()) throw InsufficientDataError("percentile of an empty list");
  if (!(p >= 0.0 && p <= 100.0)) throw DomainError("percentile p=" + std::to_string(p) + " outside [0,100]");
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (method == PercentileMethod::NearestRank) {
    // p*n first so integral products stay exact before the division.
    const double pos = std::ceil(p * static_cast<double>(n) / 100.0);
    const std::size_t k = pos < 1.0 ? 0 : std::min(n - 1, static_cast<std::size_t>(pos) - 1);
    return v[k];
  }
  const double rank = p / 100.0 * static_cast<double>(n - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(rank));
  if (lo + 1 >= n) return v[n - 1];
  const double frac = rank - static_cast<double>(lo);
  return v[lo] + frac * (v[lo + 1] - v[lo]);
}

inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Derives an independent child seed from (seed, stream); used for per-tree and
/// per-stage generators.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
  std::uint64_t s = seed ^ (0xd1b54a32d192ed03ULL * (stream + 1));
  return splitmix64(s);
}

/// xoshiro256** seeded through splitmix64. Integer output is identical on every
/// platform; real-valued draws use only IEEE arithmetic plus log/cos/sqrt.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t sm = seed;
    for (auto& s : state_) s = splitmix64(sm);
  }

  std::uint64_t seed() const noexcept { return seed_; }

  std::uint64_t next_u64() noexcept {
    const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n); rejection sampling keeps it unbiased.
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  /// Standard normal via Box-Muller (one draw per call, no cached spare).
  double normal() noexcept {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  double normal(double mean, double stddev) noexcept { return mean + stddev * normal(); }

  template <typename T>
  void shuffle(std::vector<T>& v) noexcept {
    for (std::size_t i = v.size(); i > 1; --i) {
      const std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) noexcept { return (x << k) | (x >> (64 - k)); }

  std::uint64_t seed_;
  std::uint64_t state_[4];
};

}  // namespace aeromon
