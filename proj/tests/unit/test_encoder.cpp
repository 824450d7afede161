#include <gtest/gtest.h>

#include <cmath>

#include "tsam/encoder.hpp"

using namespace tsam;
using namespace tsam::text;

namespace {

// Direct transcription of one causal layer with explicit loops.
Mat oracle_layer(const EncoderParams& p, const Mat& e, std::vector<Mat>& maps) {
  const std::size_t s = e.rows(), d = p.model_dim();
  Mat out = e;
  std::vector<double> concat(s * d, 0.0);
  for (std::size_t h = 0; h < p.heads; ++h) {
    const Mat& w = p.w_en[0][h];
    Mat t(s, s);
    for (std::size_t i = 0; i < s; ++i) {
      std::vector<double> logit(i + 1);
      double mx = -1e300;
      for (std::size_t j = 0; j <= i; ++j) {
        double v = 0.0;
        for (std::size_t a = 0; a < d; ++a)
          for (std::size_t b = 0; b < d; ++b) v += e(i, a) * w(a, b) * e(j, b);
        if (j == 0) v += p.sink_bias;
        logit[j] = v;
        mx = std::max(mx, v);
      }
      double z = 0.0;
      for (std::size_t j = 0; j <= i; ++j) z += std::exp(logit[j] - mx);
      for (std::size_t j = 0; j <= i; ++j) t(i, j) = std::exp(logit[j] - mx) / z;
      for (std::size_t c = 0; c < p.head_dim; ++c) {
        double acc = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          double vj = 0.0;
          for (std::size_t b = 0; b < d; ++b) vj += p.w_v[0][h](c, b) * e(j, b);
          acc += t(i, j) * vj;
        }
        concat[i * d + h * p.head_dim + c] = acc;
      }
    }
    maps.push_back(t);
  }
  for (std::size_t i = 0; i < s; ++i)
    for (std::size_t r = 0; r < d; ++r)
      for (std::size_t c = 0; c < d; ++c) out(i, r) += p.w_out[0](r, c) * concat[i * d + c];
  return out;
}

}  // namespace

TEST(Encoder, MatchesLoopOracleOneLayer) {
  RngStream rng(17);
  auto p = EncoderParams::random(rng, 1, 2, 3, 0.4, 0.5, 0.3);
  p.sink_bias = 1.5;
  const Mat e0 = rng.normal_mat(7, 6);
  const auto enc = encode(p, e0, TokenSeq::plain(7));
  std::vector<Mat> maps;
  const Mat want = oracle_layer(p, e0, maps);
  for (std::size_t k = 0; k < want.size(); ++k) EXPECT_NEAR(enc.k.flat()[k], want.flat()[k], 1e-12);
  for (std::size_t h = 0; h < 2; ++h)
    for (std::size_t k = 0; k < maps[h].size(); ++k) EXPECT_NEAR(enc.t(0, h).flat()[k], maps[h].flat()[k], 1e-14);
}

TEST(Encoder, AttentionRowsSumToOneAndAreCausal) {
  RngStream rng(2);
  auto p = EncoderParams::random(rng, 2, 2, 2, 1.0, 0.3, 0.3);
  const auto enc = encode(p, rng.normal_mat(9, 4), TokenSeq::plain(9));
  for (const auto& t : enc.t_stack) {
    for (std::size_t i = 0; i < 9; ++i) {
      double r = 0.0;
      for (std::size_t j = 0; j < 9; ++j) {
        r += t(i, j);
        if (j > i) {
          EXPECT_DOUBLE_EQ(t(i, j), 0.0);
        }
      }
      EXPECT_NEAR(r, 1.0, 1e-12);
    }
  }
}

TEST(Encoder, RenormalizationDropsBos) {
  Mat tp(3, 3);
  tp(0, 0) = 1.0;
  tp(1, 0) = 0.7;
  tp(1, 1) = 0.3;
  tp(2, 0) = 0.9;
  tp(2, 1) = 0.06;
  tp(2, 2) = 0.04;
  const Mat t = renormalize(tp, TokenSeq::plain(3));
  EXPECT_NEAR(t(2, 1), 0.6, 1e-15);
  EXPECT_NEAR(t(2, 2), 0.4, 1e-15);
  EXPECT_DOUBLE_EQ(t(1, 1), 1.0);
  EXPECT_DOUBLE_EQ(t(2, 0), 0.0);
  EXPECT_DOUBLE_EQ(t(0, 0), 0.0);
}

TEST(Encoder, RenormalizationRejectsPureSinkRow) {
  Mat tp(3, 3);
  tp(0, 0) = tp(1, 0) = 1.0;
  tp(2, 0) = 0.5;
  tp(2, 2) = 0.5;
  EXPECT_THROW(renormalize(tp, TokenSeq::plain(3)), DegenerateInputError);
}

TEST(Encoder, SinkRatioOfEvenSplitIsOne) {
  const std::vector<double> row{0.5, 0.3, 0.2, 0.0};
  EXPECT_DOUBLE_EQ(sink_ratio_row(row, 2), 1.0);
  EXPECT_THROW(sink_ratio_row(std::vector<double>{0.0, 1.0}, 1), DegenerateInputError);
}

TEST(Encoder, ZeroWeightsGiveUniformCausalRows) {
  const auto p = EncoderParams::zeros(1, 1, 4);
  RngStream rng(1);
  const Mat e0 = rng.normal_mat(5, 4);
  const auto enc = encode(p, e0, TokenSeq::plain(5));
  EXPECT_EQ(enc.k, e0);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_NEAR(enc.t_prime(i, 0), 1.0 / static_cast<double>(i + 1), 1e-15);
    EXPECT_NEAR(enc.epsilon[i], static_cast<double>(i), 1e-12);
  }
}

TEST(Encoder, LargeSinkBiasConcentratesOnBos) {
  RngStream rng(4);
  auto p = EncoderParams::random(rng, 1, 2, 2, 0.3, 0.3, 0.3);
  p.sink_bias = 30.0;
  const auto enc = encode(p, rng.normal_mat(6, 4), TokenSeq::plain(6));
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_GT(enc.t_prime(i, 0), 0.999);
    EXPECT_LT(enc.epsilon[i], 1e-3);
  }
  // Renormalized rows are still stochastic over 1..i.
  for (std::size_t i = 1; i < 6; ++i) {
    double r = 0.0;
    for (std::size_t j = 1; j <= i; ++j) r += enc.t_renorm(i, j);
    EXPECT_NEAR(r, 1.0, 1e-12);
  }
}

TEST(Encoder, ValidatesShapesAndSequence) {
  const auto p = EncoderParams::zeros(1, 1, 2);
  EXPECT_THROW(encode(p, Mat(4, 3), TokenSeq::plain(4)), ShapeError);
  auto seq = TokenSeq::plain(4);
  seq.group_labels[1] = 7;
  EXPECT_THROW(encode(p, Mat(4, 2), seq), ArgumentError);
  auto bad = p;
  bad.sink_bias = -1.0;
  EXPECT_THROW(encode(bad, Mat(4, 2), TokenSeq::plain(4)), ArgumentError);
}

TEST(Encoder, SinkBiasSweepShrinksEpsilon) {
  RngStream rng(12);
  auto p = EncoderParams::random(rng, 1, 2, 2, 0.4, 0.3, 0.3);
  const Mat e0 = rng.normal_mat(6, 4);
  double prev = 1e300;
  for (double bias : {0.0, 5.0, 10.0, 20.0}) {
    p.sink_bias = bias;
    const auto eps = encode(p, e0, TokenSeq::plain(6)).epsilon;
    double total = 0.0;
    for (std::size_t i = 1; i < 6; ++i) total += eps[i];
    EXPECT_LT(total, prev);
    prev = total;
    if (bias == 20.0) {
      for (double v : eps) EXPECT_LT(v, 0.05);
    }
  }
}

TEST(Encoder, SkipPathOnlyWhenValuesAreZero) {
  RngStream rng(6);
  auto p = EncoderParams::random(rng, 1, 1, 3, 0.5, 0.0, 0.0);
  p.w_out[0] = Mat::identity(3);
  const Mat e0 = rng.normal_mat(4, 3);
  EXPECT_EQ(encode(p, e0, TokenSeq::plain(4)).k, e0);
}

TEST(Encoder, AverageIsEntrywiseMean) {
  const Mat p{{1.0, 0.0}, {0.2, 0.8}}, q{{1.0, 0.0}, {0.6, 0.4}};
  const Mat avg = average_self_attention(std::vector<Mat>{p, q});
  EXPECT_NEAR(avg(1, 0), 0.4, 1e-15);
  EXPECT_NEAR(avg(1, 1), 0.6, 1e-15);
  EXPECT_EQ(average_self_attention(std::vector<Mat>{p}), p);
  EXPECT_THROW(average_self_attention(std::vector<Mat>{}), ArgumentError);
}

TEST(Encoder, PureFunctionOfInputs) {
  RngStream rng(19);
  auto p = EncoderParams::random(rng, 2, 2, 2, 0.5, 0.3, 0.3);
  const Mat e0 = rng.normal_mat(7, 4);
  const auto a = encode(p, e0, TokenSeq::plain(7)), b = encode(p, e0, TokenSeq::plain(7));
  EXPECT_EQ(a.k, b.k);
  EXPECT_EQ(a.t_renorm, b.t_renorm);
}
