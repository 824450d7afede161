#pragma once

// Pair-level statistics over synthetic instances: key similarity vs map
// similarity, bound/unbound separation in embeddings vs text self-attention,
// and BOS attention-mass histograms. Writers emit one CSV per figure analogue.

#include <cmath>
#include <filesystem>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "tsam/crossattn.hpp"
#include "tsam/encoder.hpp"
#include "tsam/rng.hpp"
#include "tsam/sandbox.hpp"
#include "tsam/stats.hpp"
#include "tsam/tensor_io.hpp"

namespace tsam::analysis {

using io::json;

struct PairRecord {
  std::size_t instance = 0;
  std::size_t i = 0, j = 0;
  std::string type;  // "bound", "unbound", or "sweep"
  std::size_t step = 0;
  double param = 0.0;  // sweep angle, when applicable
  double emb_cos = 0.0;
  double c = std::numeric_limits<double>::quiet_NaN();
  double predicted = std::numeric_limits<double>::quiet_NaN();
  double t_renorm = std::numeric_limits<double>::quiet_NaN();
  double t_prime = std::numeric_limits<double>::quiet_NaN();
};

struct PairStudy {
  std::vector<PairRecord> records;
  std::map<std::string, double> stats;
  std::vector<std::string> flags;

  json to_json() const {
    json s = json::object();
    for (const auto& [k, v] : stats) s[k] = std::isfinite(v) ? json(v) : json(nullptr);
    return {{"stats", s}, {"flags", flags}, {"records", records.size()}};
  }
};

// ---------------------------------------------------------------------------
// Key similarity vs map similarity.

struct Finding1Config {
  std::size_t points = 50;  // sweep angles θ ∈ [0, π/2]
  std::size_t n_c = 1024;
  std::size_t dim = 8;
  double key_norm = 0.8;
  bool sink = true;
  bool heavy_tailed = false;  // Student-t (ν = 2) queries instead of Gaussian
  std::size_t tau = 50;       // denoising iterations applied to the queries
  double denoiser_beta = 0.05;
  std::uint64_t seed = 0;

  void validate() const {
    if (points < 3) throw ConfigError("finding1: need at least 3 sweep points");
    if (n_c < 2 || dim < 3) throw ConfigError("finding1: need n_c >= 2 and dim >= 3");
    if (!(key_norm > 0.0)) throw ConfigError("finding1: key_norm must be > 0");
    if (tau < 2) throw ConfigError("finding1: tau must be >= 2");
  }

  // Iterations at which the sweep is evaluated: first, middle, last.
  std::vector<std::size_t> steps() const { return {1, tau / 2, tau}; }
};

// Sweeps k_j(θ) = cos θ·k_i + sin θ·k_⊥ with a fixed query set. At step 1
// queries are N(μ, Σ) draws in the sink construction of verify::make_prop1_config;
// later steps evolve them with a toy denoiser. Records C_ij (raw maps) and
// the closed-form prediction per angle; stats hold Spearman/Pearson per step.
inline PairStudy finding1_study(const Finding1Config& cfg) {
  cfg.validate();
  RngStream rng(cfg.seed, 0xf1);
  const std::size_t d = cfg.dim;
  const double sigma_u = 0.05, m = 5.0, kappa = 2.0;
  Mat sigma = Mat::identity(d);
  sigma(0, 0) = sigma_u * sigma_u;
  std::vector<double> mu(d, 0.0);
  mu[0] = cfg.sink ? m : 0.0;
  const Mat w_c = Mat::identity(d);

  // Orthonormal pair in the complement of e₀.
  std::vector<double> a(d, 0.0), b(d, 0.0);
  {
    auto va = rng.normal_vec(d - 1), vb = rng.normal_vec(d - 1);
    const double na = norm2(va);
    for (double& x : va) x /= na;
    const double p = dot(va, vb);
    for (std::size_t c = 0; c < d - 1; ++c) vb[c] -= p * va[c];
    const double nb = norm2(vb);
    for (std::size_t c = 0; c < d - 1; ++c) {
      a[c + 1] = va[c];
      b[c + 1] = vb[c] / nb;
    }
  }

  Mat q = gauss_sample(rng, mu, sigma, cfg.n_c);
  if (cfg.heavy_tailed) {
    for (std::size_t r = 0; r < q.rows(); ++r) {
      const double g1 = rng.normal(), g2 = rng.normal();
      const double scale = std::sqrt(2.0 / (g1 * g1 + g2 * g2));
      for (std::size_t c = 0; c < d; ++c) q(r, c) = mu[c] + (q(r, c) - mu[c]) * scale;
    }
  }

  auto keys_at = [&](double theta) {
    Mat k(3, d);
    if (cfg.sink) k(0, 0) = kappa;
    for (std::size_t c = 0; c < d; ++c) {
      k(1, c) = cfg.key_norm * a[c];
      k(2, c) = cfg.key_norm * (std::cos(theta) * a[c] + std::sin(theta) * b[c]);
    }
    return k;
  };

  const auto denoiser = sandbox::ToyDenoiser::make(cfg.seed, d, d, cfg.denoiser_beta);
  const Mat ref_keys = keys_at(std::numbers::pi / 4.0);
  const auto steps = cfg.steps();
  PairStudy study;
  if (!cfg.sink) study.flags.push_back("sink removed: outside the proved regime, report only");
  if (cfg.heavy_tailed) study.flags.push_back("heavy-tailed queries: outside the proved regime, report only");
  std::size_t next = 0;
  for (std::size_t k = 1; k <= cfg.tau && next < steps.size(); ++k) {
    if (k == steps[next]) {
      std::vector<double> xs, cs, ps;
      for (std::size_t p = 0; p < cfg.points; ++p) {
        const double theta = 0.5 * std::numbers::pi * static_cast<double>(p) / static_cast<double>(cfg.points - 1);
        const Mat keys = keys_at(theta);
        const Mat amap = xattn::attention_map(q, w_c, keys);
        const Mat c = xattn::column_cosines(amap);
        PairRecord rec;
        rec.instance = p;
        rec.i = 1;
        rec.j = 2;
        rec.type = "sweep";
        rec.step = k;
        rec.param = theta;
        rec.emb_cos = cosine(keys.row(1), keys.row(2));
        rec.c = c(1, 2);
        rec.predicted = std::exp(-0.5 * [&] {
          std::vector<double> dk(d);
          for (std::size_t cc = 0; cc < d; ++cc) dk[cc] = keys(1, cc) - keys(2, cc);
          return dot(dk, matvec(sigma, dk));
        }());
        xs.push_back(rec.emb_cos);
        cs.push_back(rec.c);
        ps.push_back(rec.predicted);
        study.records.push_back(rec);
      }
      const std::string tag = "@step" + std::to_string(k);
      study.stats["spearman" + tag] = stats::spearman(xs, cs);
      study.stats["pearson" + tag] = stats::pearson(xs, cs);
      study.stats["spearman_vs_predicted" + tag] = stats::spearman(ps, cs);
      ++next;
    }
    // Advance the queries one denoising iteration, conditioned on the reference keys.
    const Mat amap = xattn::attention_map(q, w_c, ref_keys);
    q -= denoiser.apply(q, amap, ref_keys);
  }
  return study;
}

// ---------------------------------------------------------------------------
// Bound vs unbound separation.

struct Separation {
  double ks = 0.0;
  double pvalue = 1.0;
  double overlap = 0.0;  // Σ_b min(p_bound, p_unbound) over shared bins
};

inline Separation compare(const std::vector<double>& bound, const std::vector<double>& unbound,
                          std::optional<std::size_t> fixed_bins = std::nullopt) {
  Separation s;
  s.ks = stats::ks_statistic(bound, unbound);
  s.pvalue = stats::ks_pvalue(s.ks, bound.size(), unbound.size());
  std::vector<double> all(bound);
  all.insert(all.end(), unbound.begin(), unbound.end());
  const double lo = *std::min_element(all.begin(), all.end());
  const double hi = *std::max_element(all.begin(), all.end());
  const std::size_t bins = fixed_bins ? *fixed_bins : stats::freedman_diaconis_bins(all, lo, hi);
  const auto hb = stats::histogram(bound, lo, hi, bins);
  const auto hu = stats::histogram(unbound, lo, hi, bins);
  for (std::size_t k = 0; k < bins; ++k) {
    s.overlap += std::min(static_cast<double>(hb.counts[k]) / static_cast<double>(bound.size()),
                          static_cast<double>(hu.counts[k]) / static_cast<double>(unbound.size()));
  }
  return s;
}

inline constexpr std::size_t kMinPairsPerClass = 30;

// Embedding cosine (final encoder embeddings) and T′ for every labelled pair.
inline PairStudy separation_study(const std::vector<sandbox::TextInstance>& instances,
                                  std::optional<std::size_t> fixed_bins = std::nullopt) {
  PairStudy study;
  std::vector<double> eb, eu, tb, tu;
  for (std::size_t n = 0; n < instances.size(); ++n) {
    const auto& inst = instances[n];
    auto add = [&](const sandbox::TokenPair& pr, const char* type) {
      PairRecord rec;
      rec.instance = n;
      rec.i = pr.first;
      rec.j = pr.second;
      rec.type = type;
      rec.emb_cos = cosine(inst.enc.k.row(rec.i), inst.enc.k.row(rec.j));
      rec.t_prime = inst.enc.t_prime(rec.i, rec.j);
      rec.t_renorm = inst.enc.t_renorm(rec.i, rec.j);
      study.records.push_back(rec);
      const bool bound = std::string(type) == "bound";
      (bound ? eb : eu).push_back(rec.emb_cos);
      (bound ? tb : tu).push_back(rec.t_prime);
    };
    for (const auto& pr : inst.pairs.bound) add(pr, "bound");
    for (const auto& pr : inst.pairs.unbound) add(pr, "unbound");
  }
  if (eb.size() < kMinPairsPerClass || eu.size() < kMinPairsPerClass) {
    throw StatisticsError("separation_study: need >= " + std::to_string(kMinPairsPerClass) +
                          " pairs per class, got " + std::to_string(eb.size()) + " bound and " +
                          std::to_string(eu.size()) + " unbound");
  }
  const auto se = compare(eb, eu, fixed_bins);
  const auto st = compare(tb, tu, fixed_bins);
  study.stats["embedding_ks"] = se.ks;
  study.stats["embedding_ks_pvalue"] = se.pvalue;
  study.stats["embedding_overlap"] = se.overlap;
  study.stats["tprime_ks"] = st.ks;
  study.stats["tprime_ks_pvalue"] = st.pvalue;
  study.stats["tprime_overlap"] = st.overlap;
  study.stats["bound_pairs"] = static_cast<double>(eb.size());
  study.stats["unbound_pairs"] = static_cast<double>(eu.size());
  return study;
}

// ---------------------------------------------------------------------------
// BOS attention mass.

struct SinkStudy {
  stats::Histogram bos;
  stats::Histogram non_bos;
  std::vector<double> bos_values;      // T_i0 per (head, row ≥ 1)
  std::vector<double> non_bos_values;  // mean of T_ij over 1 ≤ j ≤ i, same rows
  double ratio = 0.0;                  // mean(bos_values) / mean(non_bos_values)
};

// Rows 1..s−1 of every per-head matrix; row 0 has no non-BOS entries.
inline SinkStudy sink_histogram(const std::vector<Mat>& t_stacks, std::optional<std::size_t> fixed_bins = std::nullopt) {
  SinkStudy out;
  for (const auto& t : t_stacks) {
    for (std::size_t i = 1; i < t.rows(); ++i) {
      double rest = 0.0;
      for (std::size_t j = 1; j <= i; ++j) rest += t(i, j);
      out.bos_values.push_back(t(i, 0));
      out.non_bos_values.push_back(rest / static_cast<double>(i));
    }
  }
  if (out.bos_values.empty()) throw StatisticsError("sink_histogram: no rows");
  const double nb = stats::mean(out.non_bos_values);
  if (!(nb > 0.0)) throw DegenerateInputError("sink_histogram: zero non-BOS mass");
  out.ratio = stats::mean(out.bos_values) / nb;
  const std::size_t bins_b = fixed_bins ? *fixed_bins : stats::freedman_diaconis_bins(out.bos_values, 0.0, 1.0);
  const std::size_t bins_n = fixed_bins ? *fixed_bins : stats::freedman_diaconis_bins(out.non_bos_values, 0.0, 1.0);
  out.bos = stats::histogram(out.bos_values, 0.0, 1.0, bins_b);
  out.non_bos = stats::histogram(out.non_bos_values, 0.0, 1.0, bins_n);
  return out;
}

inline SinkStudy sink_histogram(const std::vector<sandbox::TextInstance>& instances,
                                std::optional<std::size_t> fixed_bins = std::nullopt) {
  std::vector<Mat> all;
  for (const auto& inst : instances) all.insert(all.end(), inst.enc.t_stack.begin(), inst.enc.t_stack.end());
  return sink_histogram(all, fixed_bins);
}

// ---------------------------------------------------------------------------
// CSV writers.

namespace detail {
inline std::string fmt(double v) { return io::format_double(v); }
}  // namespace detail

// Step-1 sweep: key cosine vs map cosine.
inline std::string fig2a_csv(const PairStudy& f1) {
  std::ostringstream os;
  os << "theta,emb_cos,c,predicted\n";
  const std::size_t first = f1.records.empty() ? 0 : f1.records.front().step;
  for (const auto& r : f1.records)
    if (r.step == first)
      os << detail::fmt(r.param) << ',' << detail::fmt(r.emb_cos) << ',' << detail::fmt(r.c) << ','
         << detail::fmt(r.predicted) << '\n';
  return os.str();
}

// Every recorded step of the sweep.
inline std::string fig4_csv(const PairStudy& f1) {
  std::ostringstream os;
  os << "step,theta,emb_cos,c\n";
  for (const auto& r : f1.records)
    os << r.step << ',' << detail::fmt(r.param) << ',' << detail::fmt(r.emb_cos) << ',' << detail::fmt(r.c) << '\n';
  return os.str();
}

// Embedding cosine by pair type.
inline std::string fig2b_csv(const PairStudy& sep) {
  std::ostringstream os;
  os << "instance,i,j,type,emb_cos\n";
  for (const auto& r : sep.records)
    os << r.instance << ',' << r.i << ',' << r.j << ',' << r.type << ',' << detail::fmt(r.emb_cos) << '\n';
  return os.str();
}

// Text self-attention values by pair type.
inline std::string fig5a_csv(const PairStudy& sep) {
  std::ostringstream os;
  os << "instance,i,j,type,t_prime,t_renorm\n";
  for (const auto& r : sep.records)
    os << r.instance << ',' << r.i << ',' << r.j << ',' << r.type << ',' << detail::fmt(r.t_prime) << ','
       << detail::fmt(r.t_renorm) << '\n';
  return os.str();
}

inline std::string fig5b_csv(const SinkStudy& sink) {
  std::ostringstream os;
  os << "series,bin_lo,bin_hi,count\n";
  auto emit = [&](const char* name, const stats::Histogram& h) {
    for (std::size_t b = 0; b < h.counts.size(); ++b)
      os << name << ',' << detail::fmt(h.edges[b]) << ',' << detail::fmt(h.edges[b + 1]) << ',' << h.counts[b] << '\n';
  };
  emit("bos", sink.bos);
  emit("non_bos", sink.non_bos);
  return os.str();
}

}  // namespace tsam::analysis
