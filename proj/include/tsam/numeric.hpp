#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "tsam/mat.hpp"

namespace tsam {

// Central-difference gradient of a scalar function of a matrix.
inline Mat finite_diff_grad(const std::function<double(const Mat&)>& f, const Mat& x, double h) {
  if (!(h > 0.0)) throw ArgumentError("finite_diff_grad: step must be positive");
  Mat g(x.rows(), x.cols());
  Mat probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double x0 = probe.flat()[i];
    probe.flat()[i] = x0 + h;
    const double fp = f(probe);
    probe.flat()[i] = x0 - h;
    const double fm = f(probe);
    probe.flat()[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericalError("finite_diff_grad", "objective returned non-finite value at entry " +
                                                   std::to_string(i));
    }
    g.flat()[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Normalized 1-D Gaussian taps, centre at index kernel_size / 2.
inline std::vector<double> gaussian_kernel_1d(std::size_t kernel_size, double sigma) {
  if (kernel_size == 0 || kernel_size % 2 == 0) {
    throw ArgumentError("gaussian kernel: size must be odd, got " + std::to_string(kernel_size));
  }
  if (!(sigma > 0.0)) throw ArgumentError("gaussian kernel: sigma must be positive");
  const auto half = static_cast<long>(kernel_size / 2);
  std::vector<double> w(kernel_size);
  double z = 0.0;
  for (long k = -half; k <= half; ++k) {
    const double v = std::exp(-0.5 * static_cast<double>(k * k) / (sigma * sigma));
    w[static_cast<std::size_t>(k + half)] = v;
    z += v;
  }
  for (double& v : w) v /= z;
  return w;
}

// Half-sample symmetric reflection (… b a | a b c … x y | y x …). Each pixel
// then receives total weight 1 from a normalized symmetric kernel, so the
// field's mass is conserved.
inline std::size_t reflect_index(long i, std::size_t n) {
  const long len = static_cast<long>(n);
  const long period = 2 * len;
  long m = i % period;
  if (m < 0) m += period;
  return static_cast<std::size_t>(m < len ? m : period - 1 - m);
}

// Separable 2-D Gaussian blur of a square field.
inline Mat gaussian_blur_2d(const Mat& field, std::size_t kernel_size, double sigma) {
  if (field.rows() != field.cols()) {
    throw ShapeError("gaussian_blur_2d: field must be square, got " + field.shape_str());
  }
  const auto w = gaussian_kernel_1d(kernel_size, sigma);
  const std::size_t n = field.rows();
  const long half = static_cast<long>(kernel_size / 2);
  Mat tmp(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      double acc = 0.0;
      for (long k = -half; k <= half; ++k)
        acc += w[static_cast<std::size_t>(k + half)] * field(r, reflect_index(static_cast<long>(c) + k, n));
      tmp(r, c) = acc;
    }
  Mat out(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      double acc = 0.0;
      for (long k = -half; k <= half; ++k)
        acc += w[static_cast<std::size_t>(k + half)] * tmp(reflect_index(static_cast<long>(r) + k, n), c);
      out(r, c) = acc;
    }
  return out;
}

// The blur as an explicit (side²×side²) linear operator B acting on
// row-major flattened fields: vec(blur(F)) = B · vec(F). Used where the blur
// has to be differentiated (the adjoint is Bᵀ).
inline Mat blur_operator(std::size_t side, std::size_t kernel_size, double sigma) {
  const auto w = gaussian_kernel_1d(kernel_size, sigma);
  const long half = static_cast<long>(kernel_size / 2);
  // 1-D operator with reflection folded in.
  Mat b1(side, side);
  for (std::size_t i = 0; i < side; ++i)
    for (long k = -half; k <= half; ++k)
      b1(i, reflect_index(static_cast<long>(i) + k, side)) += w[static_cast<std::size_t>(k + half)];
  const std::size_t n = side * side;
  Mat b(n, n);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c)
      for (std::size_t r2 = 0; r2 < side; ++r2) {
        const double wr = b1(r, r2);
        if (wr == 0.0) continue;
        for (std::size_t c2 = 0; c2 < side; ++c2) b(r * side + c, r2 * side + c2) += wr * b1(c, c2);
      }
  return b;
}

inline std::size_t exact_sqrt(std::size_t n) {
  auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(n))));
  return r * r == n ? r : 0;
}

}  // namespace tsam
