#pragma once

// Monte Carlo and constructive checks of the cross-attention similarity
// approximation (Gaussian queries under an attention sink), the near-parallel
// head outputs under a sink, the skip/out-projection extension, and the
// Gaussian moment-generating function identity they rest on.

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tsam/crossattn.hpp"
#include "tsam/mat.hpp"
#include "tsam/parallel.hpp"
#include "tsam/rng.hpp"
#include "tsam/stats.hpp"
#include "tsam/tensor_io.hpp"

namespace tsam::verify {

using io::json;

struct McCell {
  double param = 0.0;  // N_c or ε
  std::size_t i = 0, j = 0;
  double predicted = std::numeric_limits<double>::quiet_NaN();
  double mean = 0.0;
  double std_error = 0.0;  // trial_std / √trials
  double trial_std = 0.0;
  double deviation = 0.0;  // |mean − predicted| when a prediction exists
  double envelope = std::numeric_limits<double>::quiet_NaN();
  double within_fraction = std::numeric_limits<double>::quiet_NaN();  // per-trial |x − predicted| ≤ envelope
  double sink_violation_rate = 0.0;
  std::size_t trials = 0;
};

struct McReport {
  std::string name;
  std::vector<McCell> cells;
  std::map<std::string, stats::LineFit> fits;
  std::map<std::string, double> scalars;
  std::vector<std::string> flags;
  bool report_only = false;

  json to_json() const {
    json j;
    j["name"] = name;
    j["report_only"] = report_only;
    j["flags"] = flags;
    json cs = json::array();
    auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
    for (const auto& c : cells) {
      cs.push_back({{"param", c.param}, {"i", c.i}, {"j", c.j}, {"predicted", num(c.predicted)},
                    {"mean", c.mean}, {"std_error", c.std_error}, {"trial_std", c.trial_std},
                    {"deviation", num(c.deviation)}, {"envelope", num(c.envelope)},
                    {"within_fraction", num(c.within_fraction)}, {"sink_violation_rate", c.sink_violation_rate},
                    {"trials", c.trials}});
    }
    j["cells"] = std::move(cs);
    json fj = json::object();
    for (const auto& [k, f] : fits) fj[k] = {{"slope", f.slope}, {"intercept", f.intercept}, {"r2", f.r2}};
    j["fits"] = std::move(fj);
    json sj = json::object();
    for (const auto& [k, v] : scalars) sj[k] = num(v);
    j["scalars"] = std::move(sj);
    return j;
  }

  std::string to_csv() const {
    std::ostringstream os;
    os << "param,i,j,predicted,mean,std_error,trial_std,deviation,envelope,within_fraction,sink_violation_rate,trials\n";
    for (const auto& c : cells) {
      os << io::format_double(c.param) << ',' << c.i << ',' << c.j << ',' << io::format_double(c.predicted) << ','
         << io::format_double(c.mean) << ',' << io::format_double(c.std_error) << ','
         << io::format_double(c.trial_std) << ',' << io::format_double(c.deviation) << ','
         << io::format_double(c.envelope) << ',' << io::format_double(c.within_fraction) << ','
         << io::format_double(c.sink_violation_rate) << ',' << c.trials << '\n';
    }
    return os.str();
  }
};

namespace detail {
inline McCell summarize(double param, std::size_t i, std::size_t j, const std::vector<double>& xs, double predicted,
                        double envelope) {
  McCell c;
  c.param = param;
  c.i = i;
  c.j = j;
  c.trials = xs.size();
  c.mean = stats::mean(xs);
  c.trial_std = xs.size() > 1 ? stats::stddev(xs) : 0.0;
  c.std_error = c.trial_std / std::sqrt(static_cast<double>(xs.size()));
  c.predicted = predicted;
  c.envelope = envelope;
  if (std::isfinite(predicted)) {
    c.deviation = std::abs(c.mean - predicted);
    if (std::isfinite(envelope)) {
      std::size_t in = 0;
      for (double x : xs) in += std::abs(x - predicted) <= envelope ? 1 : 0;
      c.within_fraction = static_cast<double>(in) / static_cast<double>(xs.size());
    }
  }
  return c;
}

inline std::string key_num(double v) {
  std::ostringstream os;
  os << v;
  return os.str();
}

inline std::vector<double> unit(std::vector<double> v) {
  const double n = norm2(v);
  if (n == 0.0) throw DegenerateInputError("zero vector cannot be normalized");
  for (double& x : v) x /= n;
  return v;
}

// Random orthogonal matrix from Gram–Schmidt on Gaussian rows.
inline Mat random_orthogonal(RngStream& rng, std::size_t n) {
  Mat q(n, n);
  for (std::size_t r = 0; r < n;) {
    auto v = rng.normal_vec(n);
    for (std::size_t p = 0; p < r; ++p) {
      const double d = dot(v, q.row(p));
      for (std::size_t c = 0; c < n; ++c) v[c] -= d * q(p, c);
    }
    const double nv = norm2(v);
    if (nv < 1e-8) continue;
    for (std::size_t c = 0; c < n; ++c) q(r, c) = v[c] / nv;
    ++r;
  }
  return q;
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Cross-attention similarity under Gaussian queries.

// exp(−½ Δkᵀ W_cᵀ Σ W_c Δk) with Δk = k_i − k_j.
inline double prop1_predict(std::span<const double> k_i, std::span<const double> k_j, const Mat& w_c, const Mat& sigma) {
  if (k_i.size() != k_j.size() || w_c.cols() != k_i.size() || sigma.rows() != w_c.rows() ||
      sigma.cols() != w_c.rows()) {
    throw ShapeError("prop1_predict: W_c " + w_c.shape_str() + ", Sigma " + sigma.shape_str() + ", keys of length " +
                     std::to_string(k_i.size()) + "/" + std::to_string(k_j.size()));
  }
  std::vector<double> dk(k_i.size());
  for (std::size_t c = 0; c < dk.size(); ++c) dk[c] = k_i[c] - k_j[c];
  const auto r = matvec(w_c, dk);
  const auto sr = matvec(sigma, r);
  return std::exp(-0.5 * dot(r, sr));
}

struct Prop1Config {
  std::vector<std::size_t> n_c_grid{256, 512, 1024, 2048, 4096};
  std::vector<double> mu;  // query mean (query_dim)
  Mat sigma;               // query covariance (query_dim × query_dim)
  Mat w_c;                 // (query_dim × key_dim)
  Mat keys;                // (s × key_dim); row 0 is the sink token
  std::size_t trials = 200;
  std::uint64_t seed = 0;
  double eps_target = 0.02;
  double envelope_constant = 3.0;
  double max_violation_rate = 0.01;

  void validate() const {
    if (n_c_grid.empty()) throw ConfigError("prop1: empty N_c grid");
    if (trials < 2) throw ConfigError("prop1: need at least 2 trials per cell");
    if (keys.rows() < 3) throw ConfigError("prop1: need a sink key and at least two others");
    if (w_c.rows() != mu.size() || w_c.cols() != keys.cols() || sigma.rows() != mu.size() || sigma.cols() != mu.size()) {
      throw ShapeError("prop1: inconsistent dimensions (mu " + std::to_string(mu.size()) + ", W_c " + w_c.shape_str() +
                       ", Sigma " + sigma.shape_str() + ", keys " + keys.shape_str() + ")");
    }
    if (!(eps_target > 0.0 && eps_target < 1.0)) throw ConfigError("prop1: eps_target must lie in (0, 1)");
  }
};

// Sink construction in dim `dim` with W_c = I: μ = m·e₀ with Σ tight along e₀
// and unit in the complement, k_0 = κ·e₀ so that μ·k_0 clears the other
// logits by ln((s−1)/ε) plus a 4σ margin, and the other keys are short
// random vectors in the complement.
inline Prop1Config make_prop1_config(std::uint64_t seed, std::size_t dim = 8, std::size_t s = 6,
                                     double eps_target = 0.02) {
  if (dim < 2 || s < 3) throw ArgumentError("make_prop1_config: need dim >= 2 and s >= 3");
  RngStream rng(seed, 0x70726f70);
  Prop1Config cfg;
  cfg.seed = seed;
  cfg.eps_target = eps_target;
  cfg.w_c = Mat::identity(dim);
  cfg.sigma = Mat::identity(dim);
  const double sigma_u = 0.05;
  cfg.sigma(0, 0) = sigma_u * sigma_u;
  cfg.keys = Mat(s, dim);
  double max_norm = 0.0;
  for (std::size_t i = 1; i < s; ++i) {
    const double len = rng.uniform(0.3, 0.8);
    auto v = rng.normal_vec(dim - 1);
    const double n = norm2(v);
    for (std::size_t c = 1; c < dim; ++c) cfg.keys(i, c) = len * v[c - 1] / n;
    max_norm = std::max(max_norm, len);
  }
  const double m = 5.0;
  double kappa = 2.0;
  // Logit gap sd: sink key contributes σ_u κ, the others their norm.
  for (int it = 0; it < 8; ++it) {
    const double sd = std::sqrt(sigma_u * sigma_u * kappa * kappa + max_norm * max_norm);
    const double need = std::log(static_cast<double>(s - 1) / eps_target) + 4.0 * sd;
    kappa = std::max(kappa, need / m);
  }
  cfg.keys(0, 0) = kappa;
  cfg.mu.assign(dim, 0.0);
  cfg.mu[0] = m;
  return cfg;
}

// Per N_c: raw C between every non-sink pair, `trials` times, against the
// prediction. Fits: "sampling" is the log-log slope of the across-trial
// spread vs N_c; "abs_deviation" the same for mean per-trial |C − prediction|.
inline McReport prop1_measure(const Prop1Config& cfg, std::size_t threads = worker_count()) {
  cfg.validate();
  (void)cholesky_psd(cfg.sigma);
  const std::size_t s = cfg.keys.rows();
  const auto mu_logits = matvec(matmul_nt(cfg.keys, transpose(cfg.w_c)), cfg.mu);  // μᵀ W_c k_i
  for (std::size_t i = 1; i < s; ++i) {
    const double r = std::exp(mu_logits[i] - mu_logits[0]);
    if (r > cfg.eps_target) {
      throw ConstructionError("prop1: key " + std::to_string(i) + " has e^{mu_i - mu_0} = " + std::to_string(r) +
                              " > eps_target");
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  for (std::size_t i = 1; i < s; ++i)
    for (std::size_t j = i + 1; j < s; ++j) pairs.emplace_back(i, j);

  McReport rep;
  rep.name = "prop1";
  std::vector<double> spread, absdev, ncs;
  for (std::size_t cell = 0; cell < cfg.n_c_grid.size(); ++cell) {
    const std::size_t n_c = cfg.n_c_grid[cell];
    std::vector<std::vector<double>> per_trial(cfg.trials);
    std::vector<std::size_t> violations(cfg.trials, 0);
    parallel_for(
        cfg.trials,
        [&](std::size_t t) {
          RngStream rng(cfg.seed, (static_cast<std::uint64_t>(cell) << 32) | t);
          const Mat q = gauss_sample(rng, cfg.mu, cfg.sigma, n_c);
          const Mat a = xattn::attention_map(q, cfg.w_c, cfg.keys);
          for (std::size_t r = 0; r < n_c; ++r) {
            double rest = 0.0;
            for (std::size_t i = 1; i < s; ++i) rest += a(r, i);
            if (rest > cfg.eps_target * a(r, 0)) ++violations[t];
          }
          const Mat c = xattn::column_cosines(a);
          for (const auto& [i, j] : pairs) per_trial[t].push_back(c(i, j));
        },
        threads);
    std::size_t viol = 0;
    for (auto v : violations) viol += v;
    const double rate = static_cast<double>(viol) / static_cast<double>(n_c * cfg.trials);
    if (rate > cfg.max_violation_rate) {
      throw ConstructionError("prop1: sink violated in " + std::to_string(100.0 * rate) + "% of rows at N_c=" +
                              std::to_string(n_c));
    }
    const double envelope = cfg.envelope_constant * (1.0 / std::sqrt(static_cast<double>(n_c)) + cfg.eps_target);
    double spread_acc = 0.0, dev_acc = 0.0;
    for (std::size_t p = 0; p < pairs.size(); ++p) {
      const auto [i, j] = pairs[p];
      std::vector<double> xs(cfg.trials);
      for (std::size_t t = 0; t < cfg.trials; ++t) xs[t] = per_trial[t][p];
      const double pred = prop1_predict(cfg.keys.row(i), cfg.keys.row(j), cfg.w_c, cfg.sigma);
      McCell cellrep = detail::summarize(static_cast<double>(n_c), i, j, xs, pred, envelope);
      cellrep.sink_violation_rate = rate;
      spread_acc += cellrep.trial_std;
      for (double x : xs) dev_acc += std::abs(x - pred) / static_cast<double>(cfg.trials);
      rep.cells.push_back(cellrep);
    }
    ncs.push_back(static_cast<double>(n_c));
    spread.push_back(spread_acc / static_cast<double>(pairs.size()));
    absdev.push_back(dev_acc / static_cast<double>(pairs.size()));
  }
  if (ncs.size() >= 2) {
    rep.fits["sampling"] = stats::loglog_fit(ncs, spread);
    rep.fits["abs_deviation"] = stats::loglog_fit(ncs, absdev);
  }
  if (ncs.size() < 4) rep.flags.push_back("fewer than 4 grid cells in scaling fit");
  return rep;
}

// ---------------------------------------------------------------------------
// Near-parallel head outputs under a sink.

struct Prop2Config {
  std::size_t s = 8;
  std::size_t dim = 8;  // model dim = value dim for the single head
  std::vector<double> eps_grid{0.1, 0.05, 0.01, 0.0};  // ε = 0 is the exact-sink limit
  std::size_t trials = 50;
  std::uint64_t seed = 0;
  double x_lo = 0.7, x_hi = 1.4;  // |R_1m| / R_11 range
  double common_weight = 0.75;    // squared weight of the shared direction in w_m
  double bos_scale = 1.0;         // > 1 makes R_11 dominant (violates the construction)

  void validate() const {
    if (s < 3) throw ConfigError("prop2: need s >= 3");
    if (dim < 3) throw ConfigError("prop2: need dim >= 3");
    if (eps_grid.empty()) throw ConfigError("prop2: empty eps grid");
    for (double e : eps_grid)
      if (!(e >= 0.0 && e < 1.0)) throw ConfigError("prop2: eps values must lie in [0, 1)");
    if (trials < 2) throw ConfigError("prop2: need at least 2 trials");
    if (!(common_weight > 0.0 && common_weight < 1.0)) throw ConfigError("prop2: common_weight must lie in (0, 1)");
    if (!(x_lo > 0.0 && x_lo <= x_hi)) throw ConfigError("prop2: need 0 < x_lo <= x_hi");
  }
};

// One draw of the construction; ε enters only through `values(ε)` and `attention(ε)`.
struct Prop2Instance {
  std::vector<double> u;               // BOS value direction
  std::vector<double> x;               // per token, x[0] unused
  std::vector<std::vector<double>> w;  // per token unit vectors ⟂ u, w[0] unused
  Mat w_v;                             // (dim × dim), orthogonal
  Mat p;                               // non-BOS mass split, rows sum to 1 over 1..i
  double a = 1.0;

  // Embeddings e with W_v e_m = v_m, v_0 = a·u, v_m = a(x_m u + w_m/√ε).
  Mat embeddings(double eps, double bos_scale) const {
    const std::size_t s = x.size(), d = u.size();
    Mat v(s, d);
    const double inv = 1.0 / std::sqrt(eps);
    for (std::size_t c = 0; c < d; ++c) v(0, c) = bos_scale * a * u[c];
    for (std::size_t m = 1; m < s; ++m)
      for (std::size_t c = 0; c < d; ++c) v(m, c) = a * (x[m] * u[c] + w[m][c] * inv);
    return matmul(v, w_v);  // rows e_m = W_vᵀ v_m
  }

  Mat attention(double eps) const {
    const std::size_t s = x.size();
    Mat t(s, s);
    t(0, 0) = 1.0;
    for (std::size_t i = 1; i < s; ++i) {
      t(i, 0) = 1.0 / (1.0 + eps);
      for (std::size_t m = 1; m <= i; ++m) t(i, m) = eps / (1.0 + eps) * p(i, m);
    }
    return t;
  }
};

inline Prop2Instance make_prop2_instance(RngStream& rng, const Prop2Config& cfg) {
  Prop2Instance inst;
  const std::size_t d = cfg.dim, s = cfg.s;
  const Mat q = detail::random_orthogonal(rng, d);
  inst.u.assign(q.row(0).begin(), q.row(0).end());
  std::vector<double> common(q.row(1).begin(), q.row(1).end());
  inst.x.assign(s, 0.0);
  inst.w.assign(s, std::vector<double>(d, 0.0));
  const double cw = std::sqrt(cfg.common_weight), fw = std::sqrt(1.0 - cfg.common_weight);
  for (std::size_t m = 1; m < s; ++m) {
    inst.x[m] = rng.uniform(cfg.x_lo, cfg.x_hi);
    // Private direction in span(q_2..q_{d-1}).
    std::vector<double> f(d, 0.0);
    for (std::size_t r = 2; r < d; ++r) {
      const double g = rng.normal();
      for (std::size_t c = 0; c < d; ++c) f[c] += g * q(r, c);
    }
    f = detail::unit(std::move(f));
    for (std::size_t c = 0; c < d; ++c) inst.w[m][c] = cw * common[c] + fw * f[c];
  }
  inst.w_v = detail::random_orthogonal(rng, d);
  inst.p = Mat(s, s);
  for (std::size_t i = 1; i < s; ++i) {
    double tot = 0.0;
    for (std::size_t m = 1; m <= i; ++m) tot += (inst.p(i, m) = rng.uniform(0.05, 1.0));
    for (std::size_t m = 1; m <= i; ++m) inst.p(i, m) /= tot;
  }
  return inst;
}

// R = E W_vᵀ W_v Eᵀ; checks ε|R_mn|/R_11 and |R_1m|/R_11 within [1/2, 2].
inline void check_prop2_ratios(const Mat& e, const Mat& w_v, double eps) {
  const Mat v = matmul_nt(e, w_v);
  const Mat r = matmul_nt(v, v);
  const std::size_t s = r.rows();
  const double r11 = r(0, 0);
  if (!(r11 > 0.0)) throw ConstructionError("prop2: R_11 must be positive");
  auto in_band = [](double x) { return x >= 0.5 && x <= 2.0; };
  for (std::size_t m = 1; m < s; ++m) {
    const double q = std::abs(r(0, m)) / r11;
    if (!in_band(q)) {
      throw ConstructionError("prop2: |R_1m|/R_11 = " + std::to_string(q) + " at m=" + std::to_string(m) +
                              " outside [1/2, 2]");
    }
    for (std::size_t n = 1; n < s; ++n) {
      const double qq = eps * std::abs(r(m, n)) / r11;
      if (!in_band(qq)) {
        throw ConstructionError("prop2: eps|R_mn|/R_11 = " + std::to_string(qq) + " at (" + std::to_string(m) + "," +
                                std::to_string(n) + ") outside [1/2, 2]");
      }
    }
  }
}

// Head outputs o_i = Σ_j T_ij W_v e_j as rows.
inline Mat head_outputs(const Mat& t, const Mat& e, const Mat& w_v) { return matmul(t, matmul_nt(e, w_v)); }

inline double min_pair_cosine(const Mat& o) {
  double lo = 1.0;
  for (std::size_t i = 0; i < o.rows(); ++i)
    for (std::size_t j = i + 1; j < o.rows(); ++j) lo = std::min(lo, cosine(o.row(i), o.row(j)));
  return lo;
}

// Per ε: 1 − min-pair cos(o_i, o_j) over trials. Fits: "loglog" slope over
// positive ε; "linear" OLS of the mean on ε (slope is c, intercept ≈ 0).
inline McReport prop2_measure(const Prop2Config& cfg, std::size_t threads = worker_count()) {
  cfg.validate();
  std::vector<Prop2Instance> insts;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    RngStream rng(cfg.seed, 0x200000 + t);
    insts.push_back(make_prop2_instance(rng, cfg));
  }
  McReport rep;
  rep.name = "prop2";
  std::vector<double> es, ds;
  bool clipped = false;
  for (double eps : cfg.eps_grid) {
    const double eps_v = eps > 0.0 ? eps : 1.0;
    std::vector<double> gaps(cfg.trials);
    std::vector<char> clip(cfg.trials, 0);
    // Construction check first, serially, so the error is deterministic.
    for (const auto& inst : insts)
      if (eps > 0.0) check_prop2_ratios(inst.embeddings(eps_v, cfg.bos_scale), inst.w_v, eps);
    parallel_for(
        cfg.trials,
        [&](std::size_t t) {
          const auto& inst = insts[t];
          const Mat o = head_outputs(inst.attention(eps), inst.embeddings(eps_v, cfg.bos_scale), inst.w_v);
          double g = 1.0 - min_pair_cosine(o);
          if (g < 0.0) {
            g = 0.0;
            clip[t] = 1;
          }
          gaps[t] = g;
        },
        threads);
    for (char c : clip) clipped = clipped || c;
    rep.cells.push_back(detail::summarize(eps, 0, 0, gaps, std::numeric_limits<double>::quiet_NaN(),
                                          std::numeric_limits<double>::quiet_NaN()));
    rep.scalars["max_gap@" + detail::key_num(eps)] = *std::max_element(gaps.begin(), gaps.end());
    if (eps > 0.0) {
      es.push_back(eps);
      ds.push_back(rep.cells.back().mean);
    }
  }
  if (clipped) rep.flags.push_back("negative 1-cos clipped at 0");
  if (es.size() >= 2) {
    rep.fits["loglog"] = stats::loglog_fit(es, ds);
    rep.fits["linear"] = stats::ols(es, ds);
  }
  if (es.size() < 4) rep.flags.push_back("fewer than 4 grid cells in scaling fit");
  return rep;
}

// ---------------------------------------------------------------------------
// Skip connection + out-projection.

struct A4Config {
  std::size_t s = 8;
  std::size_t heads = 2;
  std::size_t head_dim = 4;
  std::vector<double> eps_grid{0.1, 0.05, 0.01};
  std::size_t trials = 50;
  std::uint64_t seed = 0;
  bool skip = true;
  bool uniform_rows = false;  // non-BOS mass spread evenly, so δe = 0

  std::size_t model_dim() const noexcept { return heads * head_dim; }

  void validate() const {
    if (s < 3) throw ConfigError("a4: need s >= 3");
    if (heads == 0 || head_dim == 0) throw ConfigError("a4: zero head geometry");
    if (eps_grid.empty()) throw ConfigError("a4: empty eps grid");
    for (double e : eps_grid)
      if (!(e > 0.0 && e < 1.0)) throw ConfigError("a4: eps values must lie in (0, 1)");
    if (trials < 2) throw ConfigError("a4: need at least 2 trials");
  }
};

struct A4Instance {
  Mat g;                   // (s × d) unit directions; e = g / ε
  std::vector<Mat> g_v;    // per head (head_dim × d); W_v = ε · g_v
  Mat w_out;               // (d × d)
  std::vector<Mat> p;      // per head non-BOS mass split, rows sum to 1 over 1..i
};

inline A4Instance make_a4_instance(RngStream& rng, const A4Config& cfg) {
  A4Instance inst;
  const std::size_t d = cfg.model_dim();
  inst.g = Mat(cfg.s, d);
  for (std::size_t i = 0; i < cfg.s; ++i) {
    const auto v = detail::unit(rng.normal_vec(d));
    for (std::size_t c = 0; c < d; ++c) inst.g(i, c) = v[c];
  }
  for (std::size_t h = 0; h < cfg.heads; ++h)
    inst.g_v.push_back(rng.normal_mat(cfg.head_dim, d, 1.0 / std::sqrt(static_cast<double>(d))));
  inst.w_out = rng.normal_mat(d, d, 1.0 / std::sqrt(static_cast<double>(d)));
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    Mat p(cfg.s, cfg.s);
    for (std::size_t i = 1; i < cfg.s; ++i) {
      double tot = 0.0;
      for (std::size_t m = 1; m <= i; ++m) tot += (p(i, m) = cfg.uniform_rows ? 1.0 : rng.uniform(0.0, 1.0) * rng.uniform(0.0, 1.0) + 0.01);
      for (std::size_t m = 1; m <= i; ++m) p(i, m) /= tot;
    }
    inst.p.push_back(std::move(p));
  }
  return inst;
}

struct A4Parts {
  Mat e, e_prime, delta, e_out;
};

// τ_i averages the non-BOS row mass over the i visible non-BOS tokens
// (0-based i), so a row with evenly spread mass has δe_i = 0 exactly.
inline A4Parts a4_decompose(const A4Instance& inst, const A4Config& cfg, double eps) {
  const std::size_t s = cfg.s, d = cfg.model_dim(), hd = cfg.head_dim;
  A4Parts parts;
  parts.e = inst.g * (1.0 / eps);
  Mat cat_full(s, d), cat_avg(s, d), cat_delta(s, d);
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    const Mat w_v = inst.g_v[h] * eps;
    const Mat v = matmul_nt(parts.e, w_v);  // rows W_v e_m
    Mat t(s, s);
    t(0, 0) = 1.0;
    for (std::size_t i = 1; i < s; ++i) {
      t(i, 0) = 1.0 / (1.0 + eps);
      for (std::size_t m = 1; m <= i; ++m) t(i, m) = eps / (1.0 + eps) * inst.p[h](i, m);
    }
    const Mat o = matmul(t, v);
    for (std::size_t i = 0; i < s; ++i) {
      double tau = 0.0;
      for (std::size_t m = 1; m <= i; ++m) tau += t(i, m);
      if (i > 0) tau /= static_cast<double>(i);
      for (std::size_t c = 0; c < hd; ++c) {
        double avg = t(i, 0) * v(0, c), del = 0.0;
        for (std::size_t m = 1; m <= i; ++m) {
          avg += tau * v(m, c);
          del += (t(i, m) - tau) * v(m, c);
        }
        cat_full(i, h * hd + c) = o(i, c);
        cat_avg(i, h * hd + c) = avg;
        cat_delta(i, h * hd + c) = del;
      }
    }
  }
  parts.e_prime = matmul_nt(cat_avg, inst.w_out);
  parts.delta = matmul_nt(cat_delta, inst.w_out);
  parts.e_out = matmul_nt(cat_full, inst.w_out);
  if (cfg.skip) parts.e_out += parts.e;
  return parts;
}

inline double a4_gap(const A4Parts& parts) {
  const Mat base = parts.e + parts.e_prime;
  double worst = 0.0;
  for (std::size_t i = 0; i < base.rows(); ++i)
    for (std::size_t j = i + 1; j < base.rows(); ++j)
      worst = std::max(worst, std::abs(cosine(parts.e_out.row(i), parts.e_out.row(j)) -
                                       cosine(base.row(i), base.row(j))));
  return worst;
}

inline constexpr std::array<const char*, 3> kNormNames{"eps*|e|", "|e'|", "|de|/eps"};

// Mean normalized norms ε‖e‖, ‖e′‖, ‖δe‖/ε; δe only over rows with at least
// two visible non-BOS tokens (it vanishes identically below that).
inline std::array<double, 3> a4_norm_regime(const A4Parts& parts, double eps) {
  const std::size_t s = parts.e.rows();
  double ne = 0.0, np = 0.0, nd = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    ne += norm2(parts.e.row(i)) * eps;
    np += norm2(parts.e_prime.row(i));
  }
  for (std::size_t i = 2; i < s; ++i) nd += norm2(parts.delta.row(i)) / eps;
  return {ne / static_cast<double>(s), np / static_cast<double>(s), nd / static_cast<double>(s - 2)};
}

// Per ε: max-pair |cos(e_out_i, e_out_j) − cos(e_i+e′_i, e_j+e′_j)| over
// trials. Fit "loglog" is the slope against ε. Without the skip connection
// the report is marked report-only.
inline McReport a4_extension_measure(const A4Config& cfg, std::size_t threads = worker_count()) {
  cfg.validate();
  std::vector<A4Instance> insts;
  for (std::size_t t = 0; t < cfg.trials; ++t) {
    RngStream rng(cfg.seed, 0xa40000 + t);
    insts.push_back(make_a4_instance(rng, cfg));
  }
  McReport rep;
  rep.name = "a4";
  rep.report_only = !cfg.skip;
  if (!cfg.skip) rep.flags.push_back("skip connection removed: report only");
  std::array<double, 3> lo, hi;
  lo.fill(std::numeric_limits<double>::infinity());
  hi.fill(0.0);
  std::vector<double> es, ds;
  for (double eps : cfg.eps_grid) {
    std::vector<double> gaps(cfg.trials);
    std::vector<std::array<double, 3>> norms(cfg.trials);
    parallel_for(
        cfg.trials,
        [&](std::size_t t) {
          const A4Parts parts = a4_decompose(insts[t], cfg, eps);
          gaps[t] = a4_gap(parts);
          norms[t] = a4_norm_regime(parts, eps);
        },
        threads);
    std::array<double, 3> mean_norms{0.0, 0.0, 0.0};
    for (const auto& n : norms)
      for (std::size_t k = 0; k < 3; ++k) mean_norms[k] += n[k] / static_cast<double>(cfg.trials);
    for (std::size_t k = 0; k < 3; ++k) {
      rep.scalars[std::string(kNormNames[k]) + "@" + detail::key_num(eps)] = mean_norms[k];
      lo[k] = std::min(lo[k], mean_norms[k]);
      hi[k] = std::max(hi[k], mean_norms[k]);
    }
    // Hierarchy ‖δe‖ < ‖e′‖ < ‖e‖ at this ε.
    if (cfg.skip && !(mean_norms[2] * eps < mean_norms[1] && mean_norms[1] < mean_norms[0] / eps)) {
      throw ConstructionError("a4: norm hierarchy |de| < |e'| < |e| fails at eps=" + std::to_string(eps));
    }
    rep.cells.push_back(detail::summarize(eps, 0, 0, gaps, std::numeric_limits<double>::quiet_NaN(),
                                          std::numeric_limits<double>::quiet_NaN()));
    es.push_back(eps);
    ds.push_back(rep.cells.back().mean);
  }
  // Each normalized norm must stay within a factor 2 across the grid.
  for (std::size_t k = 0; k < 3; ++k) {
    if (k == 2 && cfg.uniform_rows) continue;
    if (cfg.skip && hi[k] > 2.0 * lo[k]) {
      throw ConstructionError(std::string("a4: norm regime ") + kNormNames[k] + " varies from " + std::to_string(lo[k]) +
                              " to " + std::to_string(hi[k]) + " across the eps grid (more than a factor 2)");
    }
  }
  if (es.size() >= 2 && std::all_of(ds.begin(), ds.end(), [](double v) { return v > 0.0; })) {
    rep.fits["loglog"] = stats::loglog_fit(es, ds);
  }
  if (es.size() < 4) rep.flags.push_back("fewer than 4 grid cells in scaling fit");
  return rep;
}

// ---------------------------------------------------------------------------
// Pass/fail rules applied to the reports.

struct Verdict {
  bool pass = true;
  std::vector<std::string> failures;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      failures.push_back(what);
    }
  }
};

struct SlopeBand {
  double lo, hi;
  bool contains(double v) const { return v >= lo && v <= hi; }
};

inline std::string band_str(const SlopeBand& b) { return "[" + detail::key_num(b.lo) + ", " + detail::key_num(b.hi) + "]"; }

// Every (N_c, pair) cell within its envelope; sampling slope in the band.
inline Verdict prop1_verdict(const McReport& r, SlopeBand band = {-0.65, -0.35}) {
  Verdict v;
  for (const auto& c : r.cells) {
    v.require(c.deviation <= c.envelope, "N_c=" + detail::key_num(c.param) + " pair (" + std::to_string(c.i) + "," +
                                             std::to_string(c.j) + ") deviation " + detail::key_num(c.deviation) +
                                             " > envelope " + detail::key_num(c.envelope));
  }
  auto it = r.fits.find("sampling");
  v.require(it != r.fits.end(), "no sampling-error fit (need >= 2 N_c cells)");
  if (it != r.fits.end()) {
    v.require(band.contains(it->second.slope),
              "sampling slope " + detail::key_num(it->second.slope) + " outside " + band_str(band));
  }
  return v;
}

// Log-log slope in the band, fitted c in (0, c_max], intercept small
// relative to the largest gap, and cos = 1 within `exact_tol` at ε = 0 when
// that cell was measured.
inline Verdict prop2_verdict(const McReport& r, SlopeBand band = {0.8, 1.2}, double c_max = 10.0,
                             double intercept_rel = 0.1, double exact_tol = 1e-12) {
  Verdict v;
  if (auto z = r.scalars.find("max_gap@0"); z != r.scalars.end()) {
    v.require(z->second <= exact_tol, "eps=0 gap " + detail::key_num(z->second) + " > " + detail::key_num(exact_tol));
  }
  auto ll = r.fits.find("loglog");
  auto lin = r.fits.find("linear");
  v.require(ll != r.fits.end() && lin != r.fits.end(), "no scaling fit (need >= 2 positive eps)");
  if (ll == r.fits.end() || lin == r.fits.end()) return v;
  v.require(band.contains(ll->second.slope), "log-log slope " + detail::key_num(ll->second.slope) + " outside " + band_str(band));
  v.require(lin->second.slope > 0.0 && lin->second.slope <= c_max,
            "fitted c " + detail::key_num(lin->second.slope) + " outside (0, " + detail::key_num(c_max) + "]");
  double largest = 0.0;
  for (const auto& c : r.cells) largest = std::max(largest, c.mean);
  v.require(std::abs(lin->second.intercept) <= intercept_rel * largest,
            "intercept " + detail::key_num(lin->second.intercept) + " not small against largest gap " + detail::key_num(largest));
  return v;
}

inline Verdict a4_verdict(const McReport& r, SlopeBand band = {1.6, 2.4}) {
  Verdict v;
  if (r.report_only) return v;
  auto ll = r.fits.find("loglog");
  v.require(ll != r.fits.end(), "no scaling fit");
  if (ll != r.fits.end())
    v.require(band.contains(ll->second.slope), "log-log slope " + detail::key_num(ll->second.slope) + " outside " + band_str(band));
  return v;
}

// ---------------------------------------------------------------------------
// Gaussian moment-generating function.

struct MgfCheck {
  double empirical = 0.0;
  double std_error = 0.0;
  double predicted = 0.0;
  double z = 0.0;  // (empirical − predicted) / std_error
};

// E[exp(qᵀr)] for q ~ N(μ, Σ) against exp(rᵀμ + ½ rᵀΣr).
inline MgfCheck mgf_check(RngStream& rng, std::span<const double> mu, const Mat& sigma, std::span<const double> r,
                          std::size_t draws) {
  if (r.size() != mu.size()) throw ShapeError("mgf_check: r and mu lengths differ");
  if (draws < 2) throw ArgumentError("mgf_check: need at least 2 draws");
  const Mat q = gauss_sample(rng, mu, sigma, draws);
  std::vector<double> x(draws);
  for (std::size_t n = 0; n < draws; ++n) x[n] = std::exp(dot(q.row(n), r));
  MgfCheck out;
  out.empirical = stats::mean(x);
  out.std_error = stats::std_error(x);
  out.predicted = std::exp(dot(r, mu) + 0.5 * dot(r, matvec(sigma, r)));
  out.z = (out.empirical - out.predicted) / out.std_error;
  return out;
}

struct MgfCase {
  std::vector<double> mu;
  Mat sigma;
  std::vector<double> r;
};

// Random (μ, Σ, r) with rᵀΣr drawn uniformly from [lo, hi].
inline MgfCase make_mgf_case(RngStream& rng, std::size_t dim, double lo = 0.05, double hi = 0.5) {
  MgfCase c;
  c.mu = rng.normal_vec(dim, 0.3);
  const Mat a = rng.normal_mat(dim, dim, 1.0);
  c.sigma = matmul_nt(a, a) * (1.0 / static_cast<double>(dim));
  for (std::size_t i = 0; i < dim; ++i) c.sigma(i, i) += 0.05;
  c.r = rng.normal_vec(dim);
  const double quad = dot(c.r, matvec(c.sigma, c.r));
  const double target = rng.uniform(lo, hi);
  for (double& v : c.r) v *= std::sqrt(target / quad);
  return c;
}

}  // namespace tsam::verify
