#include <gtest/gtest.h>

#include <algorithm>
#include <random>
#include <sstream>

#include "tsam/analysis.hpp"

using namespace tsam;
using namespace tsam::analysis;

namespace {

std::vector<sandbox::TextInstance> instances(std::size_t n, const sandbox::SynthSpec& sp, std::uint64_t seed = 3) {
  std::vector<sandbox::TextInstance> out;
  for (std::size_t k = 0; k < n; ++k) {
    RngStream rng(seed, k);
    out.push_back(sandbox::synth_instance(rng, sp));
  }
  return out;
}

std::size_t lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Sink, StrongBiasDominates) {
  sandbox::SynthSpec sp;
  sp.sink_bias = 20.0;
  const auto study = sink_histogram(instances(50, sp));
  EXPECT_GT(study.ratio, 20.0);
  std::size_t total = 0;
  for (auto c : study.bos.counts) total += c;
  EXPECT_EQ(total, study.bos_values.size());
}

TEST(Sink, UniformRowsGiveRatioOne) {
  const auto p = text::EncoderParams::zeros(2, 2, 2);
  RngStream rng(1);
  const auto enc = text::encode(p, rng.normal_mat(7, 4), text::TokenSeq::plain(7));
  EXPECT_NEAR(sink_histogram(enc.t_stack).ratio, 1.0, 1e-12);
}

TEST(Sink, RatioIgnoresOrderOfNonBosEntries) {
  sandbox::SynthSpec sp;
  sp.sink_bias = 3.0;
  const auto insts = instances(10, sp);
  std::vector<Mat> stacks, shuffled;
  std::mt19937_64 gen(5);
  for (const auto& inst : insts)
    for (const auto& t : inst.enc.t_stack) {
      stacks.push_back(t);
      Mat u = t;
      for (std::size_t i = 2; i < u.rows(); ++i) {
        auto row = u.row(i);
        std::shuffle(row.begin() + 1, row.begin() + static_cast<long>(i) + 1, gen);
      }
      shuffled.push_back(u);
    }
  EXPECT_NEAR(sink_histogram(stacks).ratio, sink_histogram(shuffled).ratio, 1e-12);
}

TEST(Separation, PlantedStructureShowsInSelfAttentionOnly) {
  sandbox::SynthSpec sp;
  const auto study = separation_study(instances(200, sp));
  EXPECT_GE(study.stats.at("tprime_ks"), 0.5);
  EXPECT_LE(study.stats.at("embedding_ks"), 0.2);
  EXPECT_EQ(study.stats.at("bound_pairs"), 400.0);
  EXPECT_EQ(study.stats.at("unbound_pairs"), 600.0);
  EXPECT_EQ(lines(fig2b_csv(study)), 1001u);
  EXPECT_EQ(lines(fig5a_csv(study)), 1001u);
}

TEST(Separation, NeedsEnoughPairs) {
  sandbox::SynthSpec sp;
  EXPECT_THROW(separation_study(instances(10, sp)), StatisticsError);
}

TEST(Separation, CompareIdenticalSamples) {
  const std::vector<double> x{0.1, 0.2, 0.3, 0.4};
  const auto s = compare(x, x);
  EXPECT_DOUBLE_EQ(s.ks, 0.0);
  EXPECT_NEAR(s.overlap, 1.0, 1e-12);
  const std::vector<double> far{5.0, 6.0, 7.0, 8.0};
  EXPECT_DOUBLE_EQ(compare(x, far, 4).overlap, 0.0);
}

TEST(Finding1, RankCorrelationAtFirstStep) {
  Finding1Config cfg;
  const auto study = finding1_study(cfg);
  EXPECT_GE(study.stats.at("spearman@step1"), 0.9);
  EXPECT_EQ(study.records.size(), 3u * cfg.points);
  EXPECT_TRUE(study.flags.empty());
  EXPECT_EQ(lines(fig2a_csv(study)), cfg.points + 1);
  EXPECT_EQ(lines(fig4_csv(study)), 3u * cfg.points + 1);
  // The sweep runs from identical to orthogonal keys.
  EXPECT_NEAR(study.records.front().emb_cos, 1.0, 1e-12);
  EXPECT_NEAR(study.records[cfg.points - 1].emb_cos, 0.0, 1e-12);
}

TEST(Finding1, OutOfRegimeVariantsAreFlagged) {
  Finding1Config cfg;
  cfg.points = 10;
  cfg.n_c = 256;
  cfg.sink = false;
  EXPECT_EQ(finding1_study(cfg).flags.size(), 1u);
  cfg.heavy_tailed = true;
  EXPECT_EQ(finding1_study(cfg).flags.size(), 2u);
  cfg.points = 2;
  EXPECT_THROW(finding1_study(cfg), ConfigError);
}

TEST(Writers, SinkHistogramCsv) {
  sandbox::SynthSpec sp;
  const auto study = sink_histogram(instances(20, sp), 10);
  const std::string csv = fig5b_csv(study);
  EXPECT_EQ(lines(csv), 21u);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "series,bin_lo,bin_hi,count");
}
