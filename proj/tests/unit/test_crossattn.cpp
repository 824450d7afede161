#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "tsam/crossattn.hpp"

using namespace tsam;
using namespace tsam::xattn;
namespace fs = std::filesystem;

namespace {

CrossParams one_layer(std::size_t n_c, std::size_t heads, const Mat& w_c, const Mat& q_proj) {
  CrossParams p;
  p.m = n_c;
  CrossLayer l;
  l.n_c = n_c;
  l.heads = heads;
  l.w_c.assign(heads, w_c);
  l.q_proj = q_proj;
  p.layers.push_back(l);
  return p;
}

// Brute-force cosine of two columns.
double column_cos(const Mat& a, std::size_t i, std::size_t j) {
  double ij = 0, ii = 0, jj = 0;
  for (std::size_t r = 0; r < a.rows(); ++r) {
    ij += a(r, i) * a(r, j);
    ii += a(r, i) * a(r, i);
    jj += a(r, j) * a(r, j);
  }
  return ij / std::sqrt(ii * jj);
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / name;
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(CrossAttn, LogOddsRowGivesThreeToOne) {
  const Mat q{{std::log(3.0)}}, w{{1.0}}, k{{1.0}, {0.0}};
  const Mat a = attention_map(q, w, k);
  EXPECT_NEAR(a(0, 0), 0.75, 1e-15);
  EXPECT_NEAR(a(0, 1), 0.25, 1e-15);
}

TEST(CrossAttn, ZeroCouplingGivesUniformRows) {
  RngStream rng(1);
  const auto p = one_layer(16, 2, Mat(3, 5), rng.normal_mat(4, 3));
  const auto st = compute_maps(p, rng.normal_mat(16, 4), rng.normal_mat(6, 5));
  for (double v : st.a_avg.flat()) EXPECT_NEAR(v, 1.0 / 6.0, 1e-15);
}

TEST(CrossAttn, SingleHeadAverageIsThatMap) {
  RngStream rng(2);
  const auto p = one_layer(16, 1, rng.normal_mat(3, 5), rng.normal_mat(4, 3));
  const auto st = compute_maps(p, rng.normal_mat(16, 4), rng.normal_mat(6, 5));
  EXPECT_EQ(st.a_avg, st.a_stack[0]);
}

TEST(CrossAttn, CoarseLayersDoNotEnterTheAverage) {
  RngStream rng(3);
  auto p = random_cross_params(rng, {16, 4}, 16, 2, 2, 3, 5, 0.5, 0.5);
  const Mat z = rng.normal_mat(16, 3), k = rng.normal_mat(6, 5);
  const auto st = compute_maps(p, z, k);
  ASSERT_EQ(st.a_stack.size(), 4u);
  EXPECT_EQ(st.a_stack[2].rows(), 4u);
  Mat want = st.a_stack[0];
  want += st.a_stack[1];
  want *= 0.5;
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(st.a_avg.flat()[i], want.flat()[i], 1e-15);
  p.m = 12;
  EXPECT_THROW(compute_maps(p, z, k), ShapeError);
  p.m = 64;
  EXPECT_THROW(compute_maps(p, z, k), ConfigError);
}

TEST(CrossAttn, PoolingAveragesBlocks) {
  Mat z(16, 1);
  for (std::size_t i = 0; i < 16; ++i) z(i, 0) = static_cast<double>(i);
  const Mat p = pool_latent(z, 4);
  EXPECT_DOUBLE_EQ(p(0, 0), (0 + 1 + 4 + 5) / 4.0);
  EXPECT_DOUBLE_EQ(p(3, 0), (10 + 11 + 14 + 15) / 4.0);
  EXPECT_THROW(pool_latent(z, 9), ShapeError);
}

TEST(CrossAttn, SmoothMatchesPerColumnBlur) {
  RngStream rng(4);
  CrossAttnState st;
  st.a_avg = rng.normal_mat(16, 3);
  st = smooth(std::move(st), 3, 0.5);
  for (std::size_t t = 0; t < 3; ++t) {
    Mat f(4, 4);
    for (std::size_t a = 0; a < 16; ++a) f.flat()[a] = st.a_avg(a, t);
    const Mat b = gaussian_blur_2d(f, 3, 0.5);
    for (std::size_t a = 0; a < 16; ++a) EXPECT_DOUBLE_EQ(st.a_smooth(a, t), b.flat()[a]);
  }
  CrossAttnState bad;
  bad.a_avg = Mat(12, 2);
  EXPECT_THROW(smooth(bad, 3, 0.5), ShapeError);
}

TEST(CrossAttn, SmoothImpulseAndTinySigma) {
  CrossAttnState st;
  st.a_avg = Mat(9, 1);
  st.a_avg(4, 0) = 1.0;
  const auto out = smooth(st, 3, 0.5);
  const double e = std::exp(-2.0), z = 1.0 + 2.0 * e;
  EXPECT_NEAR(out.a_smooth(4, 0), 1.0 / (z * z), 1e-15);
  EXPECT_NEAR(out.a_smooth(0, 0), e * e / (z * z), 1e-15);
  const auto sharp = smooth(st, 3, 0.01);
  EXPECT_EQ(sharp.a_smooth, st.a_avg);
}

TEST(CrossAttn, SimilarityMatchesBruteForce) {
  RngStream rng(5);
  const auto p = random_cross_params(rng, {16}, 16, 2, 2, 3, 5, 0.8, 0.8);
  auto st = similarity(smooth(compute_maps(p, rng.normal_mat(16, 3), rng.normal_mat(4, 5)), 3, 0.5));
  for (std::size_t i = 0; i < 4; ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < 4; ++j) {
      EXPECT_NEAR(st.c(i, j), i == j ? 1.0 : column_cos(st.a_smooth, i, j), 1e-12);
      EXPECT_EQ(st.c(i, j), st.c(j, i));
      r += st.s(i, j);
    }
    EXPECT_NEAR(r, 1.0, 1e-12);
  }
}

TEST(CrossAttn, SimilarityTrivialCases) {
  CrossAttnState same;
  same.a_smooth = Mat{{0.2, 0.2, 0.2}, {0.5, 0.5, 0.5}};
  same = similarity(same);
  for (double v : same.c.flat()) EXPECT_NEAR(v, 1.0, 1e-15);
  for (double v : same.s.flat()) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);

  CrossAttnState disjoint;
  disjoint.a_smooth = Mat{{1.0, 0.0}, {0.0, 1.0}};
  EXPECT_DOUBLE_EQ(similarity(disjoint).c(0, 1), 0.0);

  CrossAttnState dead;
  dead.a_smooth = Mat{{1.0, 0.0}, {1.0, 0.0}};
  EXPECT_THROW(similarity(dead), DegenerateInputError);
  EXPECT_NEAR(column_cosines(Mat{{1.0, 1.0}, {0.0, 1.0}})(0, 1), 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(CrossAttn, ScaledLatentKeepsSimilarityBounded) {
  RngStream rng(6);
  const auto p = random_cross_params(rng, {16}, 16, 2, 2, 3, 5, 0.8, 0.8);
  const Mat k = rng.normal_mat(5, 5);
  Mat z = rng.normal_mat(16, 3);
  for (double scale : {1.0, 10.0, 100.0}) {
    Mat zs = z;
    zs *= scale;
    const auto st = similarity(smooth(compute_maps(p, zs, k), 3, 0.5));
    for (double v : st.c.flat()) {
      EXPECT_TRUE(std::isfinite(v));
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(CrossAttn, ExportImportIsBitIdentical) {
  RngStream rng(7);
  const auto p = random_cross_params(rng, {16, 4}, 16, 2, 2, 3, 5, 0.5, 0.5);
  const auto st = similarity(smooth(compute_maps(p, rng.normal_mat(16, 3), rng.normal_mat(6, 5)), 3, 0.5));
  const fs::path dir = fresh_dir("tsam_maps_roundtrip");
  export_maps(dir, st);
  const auto back = import_maps(dir / "manifest.json");
  ASSERT_EQ(back.a_stack.size(), st.a_stack.size());
  for (std::size_t i = 0; i < st.a_stack.size(); ++i) EXPECT_EQ(back.a_stack[i], st.a_stack[i]);
  EXPECT_EQ(back.a_avg, st.a_avg);
  EXPECT_EQ(back.a_smooth, st.a_smooth);
  EXPECT_EQ(back.c, st.c);
  EXPECT_EQ(back.s, st.s);
  fs::remove_all(dir);
}

TEST(CrossAttn, ImportRejectsTruncatedPayload) {
  CrossAttnState st;
  st.a_avg = Mat{{0.5, 0.5}, {0.25, 0.75}, {1.0, 0.0}, {0.0, 1.0}};
  const fs::path dir = fresh_dir("tsam_maps_truncated");
  export_maps(dir, st);
  io::atomic_write(dir / "A_avg.bin", std::string(24, '\0'));
  try {
    import_maps(dir / "manifest.json");
    FAIL() << "expected IngestionError";
  } catch (const IngestionError& e) {
    EXPECT_EQ(e.field(), "rows");
  }
  fs::remove_all(dir);
}

TEST(CrossAttn, ImportRejectsNonStochasticRows) {
  CrossAttnState st;
  st.a_avg = Mat{{0.5, 0.6}, {0.25, 0.75}, {1.0, 0.0}, {0.0, 1.0}};
  const fs::path dir = fresh_dir("tsam_maps_bad_rows");
  export_maps(dir, st);
  EXPECT_THROW(import_maps(dir / "manifest.json"), IngestionError);
  fs::remove_all(dir);
}

TEST(CrossAttn, ExternalUniformMapsGiveAllOnes) {
  // Written with the plain tensor writer, not export_maps.
  Mat uni(4, 3);
  for (double& v : uni.flat()) v = 1.0 / 3.0;
  uni(0, 0) = 1.0 - 2.0 / 3.0;
  const fs::path dir = fresh_dir("tsam_maps_external");
  io::write_tensor_set(dir, {{"A_avg", &uni}});
  auto st = import_maps(dir / "manifest.json");
  st = similarity(st, true);
  for (double v : st.c.flat()) EXPECT_NEAR(v, 1.0, 1e-12);
  fs::remove_all(dir);
}
