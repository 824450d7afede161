#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tsam/mat.hpp"

namespace tsam {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}
}  // namespace detail

// Reproducible random stream keyed by (seed, stream id). Each stream owns its
// engine; parallel work gets distinct stream ids via `split`, never a shared
// stream.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream_id = 0) : seed_(seed), stream_(stream_id) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream_id),
                      static_cast<std::uint32_t>(stream_id >> 32), 0x7453414dU};
    engine_.seed(seq);
  }

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t stream_id() const noexcept { return stream_; }

  // Child stream derived from this stream's key, independent of how many
  // draws this stream has made.
  RngStream split(std::uint64_t child) const {
    return RngStream(seed_, detail::splitmix64(stream_ ^ detail::splitmix64(child + 0x51ed27)));
  }

  double normal() { return normal_(engine_); }
  double normal(double mean, double sd) { return mean + sd * normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform_(engine_); }
  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  Mat normal_mat(std::size_t rows, std::size_t cols, double sd = 1.0) {
    Mat m(rows, cols);
    for (double& x : m.flat()) x = sd * normal();
    return m;
  }
  std::vector<double> normal_vec(std::size_t n, double sd = 1.0) {
    std::vector<double> v(n);
    for (double& x : v) x = sd * normal();
    return v;
  }

  std::mt19937_64& engine() noexcept { return engine_; }

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

// Lower-triangular L with L Lᵀ = Σ for symmetric positive semi-definite Σ.
// Pivots within `jitter` of zero are treated as exact zeros (rank-deficient
// columns); anything more negative is rejected.
inline Mat cholesky_psd(const Mat& sigma, double jitter = 1e-10) {
  if (sigma.rows() != sigma.cols()) throw ShapeError("cholesky: non-square " + sigma.shape_str());
  const std::size_t n = sigma.rows();
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(sigma(i, i)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (std::abs(sigma(i, j) - sigma(j, i)) > 1e-12 * std::max(1.0, scale)) {
        throw DecompositionError("cholesky: matrix not symmetric at (" + std::to_string(i) + "," +
                                 std::to_string(j) + ")");
      }
  const double tol = jitter * std::max(1.0, scale);
  Mat l(n, n);
  for (std::size_t j = 0; j < n; ++j) {
    double d = sigma(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (d < -tol) {
      throw DecompositionError("cholesky: matrix not positive semi-definite (pivot " +
                               std::to_string(j) + " = " + std::to_string(d) + ")");
    }
    if (d <= tol) {
      // Zero pivot: the rest of the column must vanish too.
      for (std::size_t i = j + 1; i < n; ++i) {
        double r = sigma(i, j);
        for (std::size_t k = 0; k < j; ++k) r -= l(i, k) * l(j, k);
        if (std::abs(r) > std::sqrt(tol) * std::max(1.0, std::sqrt(scale))) {
          throw DecompositionError("cholesky: inconsistent zero pivot at column " + std::to_string(j));
        }
      }
      continue;
    }
    const double ljj = std::sqrt(d);
    l(j, j) = ljj;
    for (std::size_t i = j + 1; i < n; ++i) {
      double r = sigma(i, j);
      for (std::size_t k = 0; k < j; ++k) r -= l(i, k) * l(j, k);
      l(i, j) = r / ljj;
    }
  }
  return l;
}

// n draws from N(mean, cov), one per row.
inline Mat gauss_sample(RngStream& rng, std::span<const double> mean, const Mat& cov, std::size_t n) {
  const std::size_t d = mean.size();
  if (cov.rows() != d || cov.cols() != d) {
    throw ShapeError("gauss_sample: covariance " + cov.shape_str() + " for mean of length " +
                     std::to_string(d));
  }
  const Mat l = cholesky_psd(cov);
  Mat out(n, d);
  std::vector<double> z(d);
  for (std::size_t r = 0; r < n; ++r) {
    for (double& x : z) x = rng.normal();
    auto o = out.row(r);
    for (std::size_t i = 0; i < d; ++i) {
      double acc = mean[i];
      for (std::size_t k = 0; k <= i; ++k) acc += l(i, k) * z[k];
      o[i] = acc;
    }
  }
  return out;
}

}  // namespace tsam
