#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "tsam/mat.hpp"
#include "tsam/numeric.hpp"
#include "tsam/parallel.hpp"
#include "tsam/rng.hpp"
#include "tsam/stats.hpp"
#include "tsam/tensor_io.hpp"

using namespace tsam;
namespace fs = std::filesystem;

TEST(Mat, SoftmaxKnownRow) {
  const Mat p = softmax_rows(Mat{{1.0, 2.0, 3.0}});
  EXPECT_NEAR(p(0, 0), 0.09003057, 1e-8);
  EXPECT_NEAR(p(0, 1), 0.24472847, 1e-8);
  EXPECT_NEAR(p(0, 2), 0.66524096, 1e-8);
}

TEST(Mat, SoftmaxLogOddsExample) {
  const Mat p = softmax_rows(Mat{{std::log(3.0), 0.0}});
  EXPECT_NEAR(p(0, 0), 0.75, 1e-15);
  EXPECT_NEAR(p(0, 1), 0.25, 1e-15);
}

TEST(Mat, SoftmaxIsShiftInvariantAndStableForLargeLogits) {
  const Mat a = softmax_rows(Mat{{1000.0, 1001.0, 1002.0}});
  const Mat b = softmax_rows(Mat{{0.0, 1.0, 2.0}});
  for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(a(0, j), b(0, j), 1e-15);
}

TEST(Mat, CausalSoftmaxMasksFuture) {
  const Mat p = softmax_rows(Mat{{0.0, 5.0, 5.0}, {1.0, 1.0, 9.0}, {0.0, 0.0, 0.0}}, true);
  EXPECT_DOUBLE_EQ(p(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(p(0, 1), 0.0);
  EXPECT_NEAR(p(1, 0), 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(p(1, 2), 0.0);
  EXPECT_NEAR(p(2, 1), 1.0 / 3.0, 1e-15);
}

TEST(Mat, CosineOfUnitAndDiagonal) {
  const std::vector<double> u{1.0, 0.0}, v{1.0, 1.0};
  EXPECT_NEAR(cosine(u, v), 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(Mat, MatmulAgainstHandProduct) {
  const Mat a{{1, 2}, {3, 4}}, b{{5, 6}, {7, 8}};
  EXPECT_EQ(matmul(a, b), (Mat{{19, 22}, {43, 50}}));
  EXPECT_EQ(matmul_nt(a, b), (Mat{{17, 23}, {39, 53}}));
  EXPECT_THROW(matmul(a, Mat(3, 1)), ShapeError);
}

TEST(Rng, SameSeedSameStream) {
  RngStream a(42, 7), b(42, 7), c(42, 8);
  const auto va = a.normal_vec(16), vb = b.normal_vec(16), vc = c.normal_vec(16);
  EXPECT_EQ(va, vb);
  EXPECT_NE(va, vc);
}

TEST(Rng, SplitDoesNotDependOnParentDraws) {
  RngStream a(9), b(9);
  for (int k = 0; k < 100; ++k) b.normal();
  EXPECT_EQ(a.split(3).normal_vec(8), b.split(3).normal_vec(8));
  EXPECT_NE(a.split(3).normal_vec(8), a.split(4).normal_vec(8));
}

TEST(Rng, CholeskyReconstructsCovariance) {
  const Mat sigma{{4.0, 2.0, 0.6}, {2.0, 2.0, 0.5}, {0.6, 0.5, 1.0}};
  const Mat l = cholesky_psd(sigma);
  const Mat back = matmul_nt(l, l);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(back(i, j), sigma(i, j), 1e-12);
  EXPECT_DOUBLE_EQ(l(0, 1), 0.0);
}

TEST(Rng, CholeskyAcceptsRankDeficientRejectsIndefinite) {
  const Mat rank1{{1.0, 1.0}, {1.0, 1.0}};
  const Mat l = cholesky_psd(rank1);
  EXPECT_NEAR(matmul_nt(l, l)(1, 1), 1.0, 1e-12);
  EXPECT_THROW(cholesky_psd(Mat{{1.0, 2.0}, {2.0, 1.0}}), DecompositionError);
}

TEST(Rng, GaussSampleMatchesMoments) {
  RngStream rng(5);
  const std::vector<double> mu{1.0, -2.0};
  const Mat cov{{1.0, 0.5}, {0.5, 2.0}};
  const std::size_t n = 200000;
  const Mat x = gauss_sample(rng, mu, cov, n);
  double m0 = 0, m1 = 0, c01 = 0;
  for (std::size_t r = 0; r < n; ++r) {
    m0 += x(r, 0);
    m1 += x(r, 1);
  }
  m0 /= n;
  m1 /= n;
  for (std::size_t r = 0; r < n; ++r) c01 += (x(r, 0) - m0) * (x(r, 1) - m1);
  c01 /= n - 1;
  EXPECT_NEAR(m0, 1.0, 0.01);
  EXPECT_NEAR(m1, -2.0, 0.015);
  EXPECT_NEAR(c01, 0.5, 0.015);
}

TEST(Numeric, GaussianTapsThreeByOne) {
  const auto w = gaussian_kernel_1d(3, 1.0);
  const double e = std::exp(-0.5);
  EXPECT_NEAR(e, 0.60653066, 1e-8);
  EXPECT_NEAR(w[0], e / (1.0 + 2.0 * e), 1e-15);
  EXPECT_NEAR(w[1], 1.0 / (1.0 + 2.0 * e), 1e-15);
  EXPECT_NEAR(w[1], 0.45186276, 1e-8);
  EXPECT_THROW(gaussian_kernel_1d(4, 1.0), ArgumentError);
  EXPECT_THROW(gaussian_kernel_1d(3, 0.0), ArgumentError);
}

TEST(Numeric, BlurOfCentreImpulseIsOuterProductStencil) {
  Mat f(5, 5);
  f(2, 2) = 1.0;
  const Mat g = gaussian_blur_2d(f, 3, 1.0);
  const double e = std::exp(-0.5), z = 1.0 + 2.0 * e;
  EXPECT_NEAR(g(2, 2), 1.0 / (z * z), 1e-15);
  EXPECT_NEAR(g(1, 2), e / (z * z), 1e-15);
  EXPECT_NEAR(g(1, 1), e * e / (z * z), 1e-15);
  EXPECT_DOUBLE_EQ(g(0, 0), 0.0);
}

TEST(Numeric, ReflectionConservesMassAndMatchesOperator) {
  RngStream rng(3);
  Mat f = rng.normal_mat(4, 4);
  const Mat g = gaussian_blur_2d(f, 5, 1.5);
  EXPECT_NEAR(sum(g), sum(f), 1e-12);
  const Mat b = blur_operator(4, 5, 1.5);
  const auto v = matvec(b, f.flat());
  for (std::size_t k = 0; k < 16; ++k) EXPECT_NEAR(v[k], g.flat()[k], 1e-13);
  EXPECT_EQ(reflect_index(-1, 4), 0u);
  EXPECT_EQ(reflect_index(-2, 4), 1u);
  EXPECT_EQ(reflect_index(4, 4), 3u);
  EXPECT_EQ(reflect_index(5, 4), 2u);
}

TEST(Numeric, FiniteDifferenceOfQuadratic) {
  const Mat x{{1.0, -2.0}, {0.5, 3.0}};
  const auto f = [](const Mat& m) {
    double s = 0;
    for (double v : m.flat()) s += v * v * v;
    return s;
  };
  const Mat g = finite_diff_grad(f, x, 1e-5);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(g.flat()[k], 3.0 * x.flat()[k] * x.flat()[k], 1e-8);
}

// Reference values from scipy.stats.
TEST(Stats, RankCorrelations) {
  const std::vector<double> x{1, 2, 3, 4, 5}, y{2, 1, 4, 3, 5};
  EXPECT_NEAR(stats::spearman(x, y), 0.8, 1e-12);
  EXPECT_NEAR(stats::pearson(x, y), 0.8, 1e-12);
  const std::vector<double> tied{1, 1, 2}, r = stats::ranks(tied);
  EXPECT_DOUBLE_EQ(r[0], 1.5);
  EXPECT_DOUBLE_EQ(r[2], 3.0);
}

TEST(Stats, KolmogorovSmirnov) {
  const std::vector<double> a{0.1, 0.4, 0.7, 0.9}, b{0.3, 0.5, 0.8, 1.2, 1.5};
  EXPECT_NEAR(stats::ks_statistic(a, b), 0.4, 1e-12);
  EXPECT_NEAR(stats::ks_pvalue(0.3, 50, 60), 0.011279928757285923, 1e-9);
  EXPECT_DOUBLE_EQ(stats::ks_statistic(a, a), 0.0);
}

TEST(Stats, TwoProportionOneSided) {
  EXPECT_NEAR(stats::two_proportion_pvalue(58, 64, 26, 64), 1.2995726471547308e-09, 1e-15);
  EXPECT_NEAR(stats::normal_sf(2.0), 0.022750131948179195, 1e-15);
  EXPECT_GT(stats::two_proportion_pvalue(10, 64, 40, 64), 0.99);
}

TEST(Stats, LeastSquares) {
  const std::vector<double> x{1, 2, 3, 4}, y{2.1, 3.9, 6.2, 7.8};
  const auto f = stats::ols(x, y);
  EXPECT_NEAR(f.slope, 1.94, 1e-12);
  EXPECT_NEAR(f.intercept, 0.15, 1e-12);
  const std::vector<double> px{1, 2, 4, 8}, py{3, 12, 48, 192};
  EXPECT_NEAR(stats::loglog_fit(px, py).slope, 2.0, 1e-12);
  EXPECT_THROW(stats::loglog_fit(px, std::vector<double>{1, 0, 1, 1}), StatisticsError);
}

TEST(Stats, HistogramCountsEverySample) {
  const std::vector<double> x{0.0, 0.1, 0.5, 0.99, 1.0, 2.0};
  const auto h = stats::histogram(x, 0.0, 1.0, 4);
  std::size_t total = 0;
  for (auto c : h.counts) total += c;
  EXPECT_EQ(total, x.size());
  EXPECT_EQ(h.counts[0], 2u);
  EXPECT_EQ(h.counts[3], 3u);
}

TEST(TensorIo, RoundTripIsBitExact) {
  const fs::path dir = fs::temp_directory_path() / "tsam_io_roundtrip";
  fs::remove_all(dir);
  RngStream rng(1);
  const Mat a = rng.normal_mat(3, 5), b = rng.normal_mat(2, 2);
  io::write_tensor_set(dir, {{"a", &a}, {"b", &b}});
  const auto back = io::read_tensor_set(dir / "manifest.json");
  EXPECT_EQ(back.at("a"), a);
  EXPECT_EQ(back.at("b"), b);
  EXPECT_EQ(io::from_csv(io::to_csv(a)), a);
  fs::remove_all(dir);
}

TEST(TensorIo, MissingFileIsAnError) {
  EXPECT_THROW(io::read_file("/definitely/not/here.bin"), Error);
  EXPECT_THROW(io::read_tensor_set("/definitely/not/manifest.json"), Error);
}

TEST(Parallel, ResultsIndependentOfThreadCount) {
  std::vector<double> one(64), many(64);
  auto work = [](std::vector<double>& out) {
    return [&out](std::size_t i) { out[i] = RngStream(11, i).normal(); };
  };
  parallel_for(64, work(one), 1);
  parallel_for(64, work(many), 4);
  EXPECT_EQ(one, many);
  EXPECT_THROW(parallel_for(8, [](std::size_t i) { if (i == 5) throw ArgumentError("boom"); }, 3), ArgumentError);
}

TEST(Mat, SoftmaxTrivialCases) {
  const Mat half = softmax_rows(Mat{{0.0, 0.0}});
  EXPECT_DOUBLE_EQ(half(0, 0), 0.5);
  const Mat big = softmax_rows(Mat{{1000.0, 0.0}});
  EXPECT_NEAR(big(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(big(0, 1), 0.0, 1e-12);
  EXPECT_THROW(softmax_rows(Mat(0, 0)), ArgumentError);
}

TEST(Mat, CosineTrivialCases) {
  const std::vector<double> u{1, 2, 3}, e0{1, 0}, e1{0, 1}, z{0, 0};
  EXPECT_NEAR(cosine(u, u), 1.0, 1e-12);
  EXPECT_DOUBLE_EQ(cosine(e0, e1), 0.0);
  const std::vector<double> scaled{3, 6, 9};
  EXPECT_NEAR(cosine(u, scaled), 1.0, 1e-12);
  EXPECT_THROW(cosine(z, e0), DegenerateInputError);
}

TEST(Rng, ZeroCovarianceReturnsMean) {
  RngStream rng(8);
  const std::vector<double> mu{0.5, -1.5};
  const Mat x = gauss_sample(rng, mu, Mat(2, 2), 10);
  for (std::size_t r = 0; r < 10; ++r) {
    EXPECT_DOUBLE_EQ(x(r, 0), 0.5);
    EXPECT_DOUBLE_EQ(x(r, 1), -1.5);
  }
}

TEST(Rng, DiagonalCovarianceVariances) {
  RngStream rng(21);
  const std::vector<double> mu{1.0, -1.0};
  const Mat x = gauss_sample(rng, mu, Mat{{4.0, 0.0}, {0.0, 9.0}}, 100000);
  for (std::size_t c = 0; c < 2; ++c) {
    const auto col = x.col(c);
    const double v = stats::stddev(col) * stats::stddev(col);
    EXPECT_NEAR(v, c == 0 ? 4.0 : 9.0, (c == 0 ? 4.0 : 9.0) * 0.05);
    EXPECT_NEAR(stats::mean(col), mu[c], 0.03 * (c == 0 ? 2.0 : 3.0));
  }
}

TEST(Numeric, BlurStencilHalfSigma) {
  Mat f(3, 3);
  f(1, 1) = 1.0;
  const Mat g = gaussian_blur_2d(f, 3, 0.5);
  const double e = std::exp(-2.0), z = 1.0 + 2.0 * e;
  const double w[3] = {e / z, 1.0 / z, e / z};
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) EXPECT_NEAR(g(r, c), w[r] * w[c], 1e-15);
}

TEST(Numeric, BlurKeepsConstantsAndMassOnLargerField) {
  Mat c(6, 6);
  for (double& v : c.flat()) v = 2.5;
  const Mat g = gaussian_blur_2d(c, 5, 1.3);
  for (double v : g.flat()) EXPECT_NEAR(v, 2.5, 1e-12);
  RngStream rng(30);
  const Mat f = rng.normal_mat(16, 16);
  EXPECT_NEAR(sum(gaussian_blur_2d(f, 3, 0.5)), sum(f), 1e-9);
  EXPECT_THROW(gaussian_blur_2d(Mat(3, 4), 3, 0.5), ShapeError);
}

TEST(Numeric, FiniteDifferenceSecondOrder) {
  const Mat x{{1.0, 2.0}};
  const auto lin = [](const Mat& m) { return sum(m); };
  const Mat g = finite_diff_grad(lin, x, 1e-4);
  for (double v : g.flat()) EXPECT_NEAR(v, 1.0, 1e-10);
  // Pure cubic: central-difference error is h² exactly (third derivative 6).
  const auto cubic = [](const Mat& m) { return m(0, 0) * m(0, 0) * m(0, 0); };
  const double e1 = finite_diff_grad(cubic, x, 1e-2)(0, 0) - 3.0;
  const double e2 = finite_diff_grad(cubic, x, 5e-3)(0, 0) - 3.0;
  EXPECT_NEAR(e1 / e2, 4.0, 1e-3);
}
