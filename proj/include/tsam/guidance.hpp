#pragma once

// Text self-attention guidance objective
//
//   L(z) = Σ_{i, j≤i} ρ_i |T_ij^γ − S_ij(z)|,   ρ_i = i/s (1-based i),
//
// its reverse-mode gradient with respect to the latent, and the update
// z ← z − α ∇L applied at scheduled denoising steps.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tsam/crossattn.hpp"
#include "tsam/encoder.hpp"
#include "tsam/mat.hpp"
#include "tsam/numeric.hpp"

namespace tsam::guide {

struct GuidanceConfig {
  double alpha = 10.0;
  double gamma = 4.0;
  std::vector<std::size_t> schedule{0, 10, 20};
  std::size_t inner_iters = 20;
  std::size_t kernel_size = 3;
  double sigma = 0.5;
  bool smooth = true;
  bool exclude_bos_row = true;
  bool exclude_eos = true;
  double rho_scale = 1.0;
  std::optional<double> grad_norm_cap;  // off by default
  bool backtrack = false;               // halve α until the loss does not increase
  std::size_t max_backtracks = 30;

  // "tifa": α=40, one update at each of steps 1..25.
  // "anE": α=10, 20 updates at each of steps {0, 10, 20}.
  static GuidanceConfig preset(const std::string& name) {
    GuidanceConfig cfg;
    if (name == "tifa") {
      cfg.alpha = 40.0;
      cfg.inner_iters = 1;
      cfg.schedule.clear();
      for (std::size_t t = 1; t <= 25; ++t) cfg.schedule.push_back(t);
    } else if (name == "anE") {
      cfg.alpha = 10.0;
      cfg.inner_iters = 20;
      cfg.schedule = {0, 10, 20};
    } else {
      throw ConfigError("unknown guidance preset '" + name + "' (expected tifa or anE)");
    }
    return cfg;
  }

  bool scheduled(std::size_t step) const {
    return std::find(schedule.begin(), schedule.end(), step) != schedule.end();
  }

  void validate(std::optional<std::size_t> tau = std::nullopt) const {
    if (!(alpha >= 0.0)) throw ConfigError("guidance.alpha must be >= 0");
    if (!(gamma >= 1.0)) throw ConfigError("guidance.gamma must be >= 1");
    if (inner_iters < 1) throw ConfigError("guidance.inner_iters must be >= 1");
    if (kernel_size % 2 == 0) throw ConfigError("guidance.kernel_size must be odd");
    if (!(sigma > 0.0)) throw ConfigError("guidance.sigma must be > 0");
    if (!(rho_scale > 0.0)) throw ConfigError("guidance.rho_scale must be > 0");
    if (grad_norm_cap && !(*grad_norm_cap > 0.0)) throw ConfigError("guidance.grad_norm_cap must be > 0");
    if (tau)
      for (std::size_t t : schedule)
        if (t >= *tau) throw ConfigError("guidance.schedule entry " + std::to_string(t) + " outside [0, tau)");
  }
};

struct LossReport {
  double loss = 0.0;
  Mat residuals;  // |T^γ − S| on included entries, 0 elsewhere
  double grad_norm = 0.0;
  std::size_t step = 0;
};

// Whether entry (i, j) of the lower triangle enters the loss. The BOS column
// never does (the renormalized T has none).
inline bool included(std::size_t i, std::size_t j, const text::TokenSeq& seq, const GuidanceConfig& cfg) {
  if (j > i || j == seq.bos_index) return false;
  if (cfg.exclude_bos_row && i == seq.bos_index) return false;
  if (cfg.exclude_eos && (i == seq.eos_index || j == seq.eos_index)) return false;
  return true;
}

inline double rho(std::size_t i, const text::TokenSeq& seq, const GuidanceConfig& cfg) {
  return cfg.rho_scale * static_cast<double>(i + 1) / static_cast<double>(seq.s);
}

inline Mat elementwise_pow(const Mat& t, double gamma) {
  Mat out = t;
  for (double& v : out.flat()) v = std::pow(v, gamma);
  return out;
}

// Loss against an already-powered target P = T^γ.
inline LossReport loss_against(const Mat& s, const Mat& target_pow, const text::TokenSeq& seq,
                               const GuidanceConfig& cfg) {
  if (s.rows() != seq.s || s.cols() != seq.s || !s.same_shape(target_pow)) {
    throw ArgumentError("loss: S is " + s.shape_str() + ", T is " + target_pow.shape_str() + ", s=" +
                        std::to_string(seq.s));
  }
  LossReport rep;
  rep.residuals = Mat(seq.s, seq.s);
  for (std::size_t i = 0; i < seq.s; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      if (!included(i, j, seq, cfg)) continue;
      const double r = std::abs(target_pow(i, j) - s(i, j));
      rep.residuals(i, j) = r;
      row += r;
    }
    rep.loss += rho(i, seq, cfg) * row;
  }
  return rep;
}

inline LossReport loss(const Mat& s, const Mat& t, const text::TokenSeq& seq, const GuidanceConfig& cfg) {
  if (!s.same_shape(t)) throw ArgumentError("loss: S " + s.shape_str() + " vs T " + t.shape_str());
  return loss_against(s, elementwise_pow(t, cfg.gamma), seq, cfg);
}

// Smallest included residual; gradient checks stay this far from L1 kinks.
inline double min_included_residual(const LossReport& rep, const text::TokenSeq& seq, const GuidanceConfig& cfg) {
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < seq.s; ++i)
    for (std::size_t j = 0; j <= i; ++j)
      if (included(i, j, seq, cfg)) m = std::min(m, rep.residuals(i, j));
  return m;
}

// latent → queries → Ω → softmax → head/layer mean → blur → cosine →
// row-normalize → loss, with the intermediates kept for the backward pass.
class SimilarityPipeline {
 public:
  SimilarityPipeline(xattn::CrossParams cross, Mat keys, const Mat& t_renorm, text::TokenSeq seq,
                     GuidanceConfig cfg)
      : cross_(std::move(cross)), keys_(std::move(keys)), seq_(std::move(seq)), cfg_(std::move(cfg)) {
    cross_.validate(keys_.cols());
    seq_.validate();
    cfg_.validate();
    if (keys_.rows() != seq_.s) throw ShapeError("pipeline: keys have " + std::to_string(keys_.rows()) + " rows, s=" + std::to_string(seq_.s));
    if (t_renorm.rows() != seq_.s || t_renorm.cols() != seq_.s) throw ShapeError("pipeline: T must be s x s");
    target_pow_ = elementwise_pow(t_renorm, cfg_.gamma);
    const std::size_t side = exact_sqrt(cross_.m);
    blur_ = cfg_.smooth ? blur_operator(side, cfg_.kernel_size, cfg_.sigma) : Mat::identity(cross_.m);
  }

  const GuidanceConfig& config() const noexcept { return cfg_; }
  const text::TokenSeq& seq() const noexcept { return seq_; }
  const xattn::CrossParams& cross() const noexcept { return cross_; }
  const Mat& keys() const noexcept { return keys_; }
  const Mat& target_pow() const noexcept { return target_pow_; }

  struct Forward {
    xattn::CrossAttnState state;
    LossReport report;
    // backward-pass intermediates
    std::vector<Mat> queries;  // per layer
    std::vector<double> col_norms;
    std::size_t contributing = 0;
  };

  Forward forward(const Mat& latent) const {
    if (!latent.all_finite()) throw NumericalError("latent", "non-finite input latent");
    Forward fw;
    const std::size_t s = seq_.s;
    Mat acc(cross_.m, s);
    for (std::size_t l = 0; l < cross_.layers.size(); ++l) {
      const auto& layer = cross_.layers[l];
      fw.queries.push_back(xattn::layer_queries(layer, latent));
      for (std::size_t h = 0; h < layer.heads; ++h) {
        Mat a = xattn::attention_map(fw.queries.back(), layer.w_c[h], keys_);
        if (layer.n_c == cross_.m) {
          acc += a;
          ++fw.contributing;
        }
        fw.state.a_stack.push_back(std::move(a));
        fw.state.a_index.emplace_back(l, h);
      }
    }
    acc *= 1.0 / static_cast<double>(fw.contributing);
    check(acc, "cross-attention average");
    fw.state.a_avg = std::move(acc);
    fw.state.a_smooth = matmul(blur_, fw.state.a_avg);
    check(fw.state.a_smooth, "smoothing");
    fw.state.c = xattn::column_cosines(fw.state.a_smooth);
    check(fw.state.c, "cosine similarity");
    fw.state.s = xattn::row_normalize(fw.state.c);
    check(fw.state.s, "row normalization");
    fw.col_norms.resize(s);
    for (std::size_t i = 0; i < s; ++i) {
      const auto col = fw.state.a_smooth.col(i);
      fw.col_norms[i] = norm2(col);
    }
    fw.report = loss_against(fw.state.s, target_pow_, seq_, cfg_);
    return fw;
  }

  double loss_at(const Mat& latent) const { return forward(latent).report.loss; }

  struct Gradient {
    Mat grad;
    LossReport report;
    xattn::CrossAttnState state;
  };

  Gradient gradient(const Mat& latent) const {
    Forward fw = forward(latent);
    const std::size_t s = seq_.s;
    const Mat& sm = fw.state.s;
    const Mat& cm = fw.state.c;
    const Mat& asm_ = fw.state.a_smooth;

    // dL/dS; sign(0) := 0.
    Mat g_s(s, s);
    for (std::size_t i = 0; i < s; ++i)
      for (std::size_t j = 0; j <= i; ++j) {
        if (!included(i, j, seq_, cfg_)) continue;
        const double diff = sm(i, j) - target_pow_(i, j);
        g_s(i, j) = rho(i, seq_, cfg_) * static_cast<double>((diff > 0.0) - (diff < 0.0));
      }

    // S_ik = C_ik / r_i
    Mat g_c(s, s);
    for (std::size_t i = 0; i < s; ++i) {
      double r = 0.0, gs = 0.0;
      for (std::size_t k = 0; k < s; ++k) {
        r += cm(i, k);
        gs += g_s(i, k) * sm(i, k);
      }
      for (std::size_t k = 0; k < s; ++k) g_c(i, k) = (g_s(i, k) - gs) / r;
    }

    // C_ij = cos(a_i, a_j) for i ≠ j; the diagonal is constant.
    Mat g_asm(asm_.rows(), s);
    for (std::size_t i = 0; i < s; ++i) {
      const double ni = fw.col_norms[i];
      for (std::size_t j = 0; j < s; ++j) {
        if (j == i) continue;
        const double w = g_c(i, j) + g_c(j, i);
        if (w == 0.0) continue;
        const double nj = fw.col_norms[j];
        const double cij = cm(i, j);
        for (std::size_t a = 0; a < asm_.rows(); ++a)
          g_asm(a, i) += w * (asm_(a, j) / (ni * nj) - cij * asm_(a, i) / (ni * ni));
      }
    }
    check(g_asm, "cosine backward");

    Mat g_avg = matmul(transpose(blur_), g_asm);
    g_avg *= 1.0 / static_cast<double>(fw.contributing);

    Mat grad(latent.rows(), latent.cols());
    std::size_t idx = 0;
    for (std::size_t l = 0; l < cross_.layers.size(); ++l) {
      const auto& layer = cross_.layers[l];
      if (layer.n_c != cross_.m) {
        idx += layer.heads;
        continue;
      }
      Mat g_q(layer.n_c, layer.query_dim());
      for (std::size_t h = 0; h < layer.heads; ++h, ++idx) {
        const Mat& a = fw.state.a_stack[idx];
        // softmax backward, row-wise
        Mat g_omega(a.rows(), a.cols());
        for (std::size_t r = 0; r < a.rows(); ++r) {
          double inner = 0.0;
          for (std::size_t c = 0; c < a.cols(); ++c) inner += g_avg(r, c) * a(r, c);
          for (std::size_t c = 0; c < a.cols(); ++c) g_omega(r, c) = a(r, c) * (g_avg(r, c) - inner);
        }
        // Ω = Q Vᵀ with V = K W_cᵀ
        g_q += matmul(g_omega, matmul_nt(keys_, layer.w_c[h]));
      }
      Mat g_pooled = matmul_nt(g_q, layer.q_proj);
      grad += unpool(g_pooled, latent.rows());
    }
    check(grad, "latent gradient");

    Gradient out;
    out.report = std::move(fw.report);
    out.report.grad_norm = frobenius(grad);
    if (cfg_.grad_norm_cap && out.report.grad_norm > *cfg_.grad_norm_cap) {
      grad *= *cfg_.grad_norm_cap / out.report.grad_norm;
    }
    out.grad = std::move(grad);
    out.state = std::move(fw.state);
    return out;
  }

 private:
  static void check(const Mat& m, const std::string& stage) {
    if (!m.all_finite()) throw NumericalError(stage, "non-finite intermediate");
  }

  // Adjoint of xattn::pool_latent.
  static Mat unpool(const Mat& g, std::size_t positions) {
    if (g.rows() == positions) return g;
    const std::size_t side = exact_sqrt(positions);
    const std::size_t target = exact_sqrt(g.rows());
    const std::size_t f = side / target;
    const double w = 1.0 / static_cast<double>(f * f);
    Mat out(positions, g.cols());
    for (std::size_t r = 0; r < side; ++r)
      for (std::size_t c = 0; c < side; ++c)
        for (std::size_t ch = 0; ch < g.cols(); ++ch)
          out(r * side + c, ch) = w * g((r / f) * target + c / f, ch);
    return out;
  }

  xattn::CrossParams cross_;
  Mat keys_;
  text::TokenSeq seq_;
  GuidanceConfig cfg_;
  Mat target_pow_;
  Mat blur_;
};

// Thrown when an update produces a non-finite gradient; carries the reports
// gathered up to that point.
class GuidanceAbort : public NumericalError {
 public:
  GuidanceAbort(std::vector<LossReport> reports, const std::string& what)
      : NumericalError("update_latent", what), reports_(std::move(reports)) {}
  const std::vector<LossReport>& reports() const noexcept { return reports_; }

 private:
  std::vector<LossReport> reports_;
};

struct UpdateResult {
  Mat latent;
  std::vector<LossReport> reports;  // one per inner iteration, loss before that update
  double final_loss = 0.0;          // loss at the returned latent (if applied)
  bool applied = false;
};

// z ← z − α ∇L, `inner_iters` times, if `step` is scheduled; otherwise the
// latent is returned unchanged with no reports.
inline UpdateResult update_latent(const Mat& latent, const GuidanceConfig& cfg, const SimilarityPipeline& pipeline,
                                  std::size_t step) {
  UpdateResult res;
  res.latent = latent;
  if (!cfg.scheduled(step)) return res;
  res.applied = true;
  for (std::size_t it = 0; it < cfg.inner_iters; ++it) {
    auto g = pipeline.gradient(res.latent);
    g.report.step = step;
    if (!std::isfinite(g.report.grad_norm)) {
      res.reports.push_back(g.report);
      throw GuidanceAbort(res.reports, "non-finite gradient norm at step " + std::to_string(step));
    }
    const double before = g.report.loss;
    res.reports.push_back(std::move(g.report));
    if (cfg.alpha == 0.0) continue;
    double a = cfg.alpha;
    Mat next = res.latent - g.grad * a;
    if (cfg.backtrack) {
      for (std::size_t b = 0; b < cfg.max_backtracks && pipeline.loss_at(next) > before; ++b) {
        a *= 0.5;
        next = res.latent - g.grad * a;
      }
      if (pipeline.loss_at(next) > before) next = res.latent;
    }
    res.latent = std::move(next);
  }
  res.final_loss = pipeline.loss_at(res.latent);
  return res;
}

}  // namespace tsam::guide
