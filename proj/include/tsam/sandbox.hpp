#pragma once

// Toy latent-diffusion harness: z_{t-1} = z_t − D(z_t; k) for t = τ..1 with a
// fixed random denoiser conditioned through cross-attention, and guidance
// updates injected before the denoiser at scheduled iterations.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "tsam/crossattn.hpp"
#include "tsam/encoder.hpp"
#include "tsam/guidance.hpp"
#include "tsam/rng.hpp"

namespace tsam::sandbox {

using TokenPair = std::pair<std::size_t, std::size_t>;  // (later, earlier)

// Layout and strengths of a planted instance. Tokens follow the template
// [bos] attr1 obj1 (and) attr2 obj2 (filler…) [eos]; (attr_k, obj_k) are
// bound, (attr_k, obj_other) and (obj1, obj2) are unbound.
struct SynthSpec {
  std::size_t s = 7;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t head_dim = 4;
  double sink_bias = 20.0;
  bool planted = true;
  double pair_coupling = 1.5;   // W_en weight on bound role directions
  double self_coupling = 0.3;   // W_en identity weight
  double en_noise = 0.05;       // W_en entry noise
  double role_offset = 3.0;     // norm of the per-role mean offset
  double embed_noise = 0.2;     // i.i.d. embedding noise sd
  double bound_embedding_similarity = 0.0;  // cosine between bound partners' offsets
  bool identical_bound_embeddings = false;
  double sd_v = 0.1;
  double sd_out = 0.35;
};

struct PairSets {
  std::vector<TokenPair> bound;
  std::vector<TokenPair> unbound;
};

struct TextInstance {
  text::TokenSeq seq;
  text::EncoderParams params;
  Mat embeddings0;
  text::TextEncoding enc;
  PairSets pairs;
};

namespace detail {
// Orthonormal directions from Gram–Schmidt on Gaussian draws.
inline std::vector<std::vector<double>> orthonormal_directions(RngStream& rng, std::size_t count, std::size_t dim) {
  if (count > dim) throw ArgumentError("need " + std::to_string(count) + " orthogonal directions in dim " + std::to_string(dim));
  std::vector<std::vector<double>> out;
  while (out.size() < count) {
    auto v = rng.normal_vec(dim);
    for (const auto& u : out) {
      const double p = dot(v, u);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= p * u[i];
    }
    const double n = norm2(v);
    if (n < 1e-6) continue;
    for (double& x : v) x /= n;
    out.push_back(std::move(v));
  }
  return out;
}
}  // namespace detail

inline TextInstance synth_instance(RngStream& rng, const SynthSpec& spec) {
  if (spec.s < 6) throw ArgumentError("synth_instance: need s >= 6, got " + std::to_string(spec.s));
  TextInstance inst;
  inst.seq = text::TokenSeq::plain(spec.s);
  // Positions of attr1, obj1, attr2, obj2.
  const std::size_t a1 = 1, o1 = 2;
  const std::size_t a2 = spec.s >= 7 ? 4 : 3;
  const std::size_t o2 = a2 + 1;
  inst.seq.group_labels[a1] = inst.seq.group_labels[o1] = 0;
  inst.seq.group_labels[a2] = inst.seq.group_labels[o2] = 1;
  inst.pairs.bound = {{o1, a1}, {o2, a2}};
  inst.pairs.unbound = {{o2, a1}, {a2, o1}, {o2, o1}};

  const std::size_t d = spec.heads * spec.head_dim;
  const auto dirs = detail::orthonormal_directions(rng, 4, d);
  const std::vector<std::size_t> role_pos{a1, o1, a2, o2};

  Mat emb = rng.normal_mat(spec.s, d, spec.embed_noise);
  const double rho = std::clamp(spec.bound_embedding_similarity, -1.0, 1.0);
  for (std::size_t r = 0; r < 4; ++r) {
    const std::size_t pos = role_pos[r];
    const bool second = (r % 2) == 1;
    const auto& own = dirs[r];
    const auto& partner = dirs[second ? r - 1 : r + 1];
    for (std::size_t c = 0; c < d; ++c) {
      const double dir = second ? std::sqrt(1.0 - rho * rho) * own[c] + rho * partner[c] : own[c];
      emb(pos, c) += spec.role_offset * dir;
    }
  }
  if (spec.identical_bound_embeddings) {
    for (std::size_t c = 0; c < d; ++c) {
      emb(o1, c) = emb(a1, c);
      emb(o2, c) = emb(a2, c);
    }
  }

  text::EncoderParams p = text::EncoderParams::zeros(spec.layers, spec.heads, spec.head_dim);
  p.sink_bias = spec.sink_bias;
  for (std::size_t l = 0; l < spec.layers; ++l) {
    for (std::size_t h = 0; h < spec.heads; ++h) {
      Mat w = rng.normal_mat(d, d, spec.en_noise);
      for (std::size_t i = 0; i < d; ++i) w(i, i) += spec.self_coupling;
      if (spec.planted) {
        for (std::size_t g = 0; g < 2; ++g) {
          const auto& u = dirs[2 * g];
          const auto& v = dirs[2 * g + 1];
          for (std::size_t i = 0; i < d; ++i)
            for (std::size_t j = 0; j < d; ++j) w(i, j) += spec.pair_coupling * (u[i] * v[j] + v[i] * u[j]);
        }
      }
      p.w_en[l][h] = std::move(w);
      p.w_v[l][h] = rng.normal_mat(spec.head_dim, d, spec.sd_v);
    }
    p.w_out[l] = rng.normal_mat(d, d, spec.sd_out);
  }
  inst.params = std::move(p);
  inst.embeddings0 = std::move(emb);
  inst.enc = text::encode(inst.params, inst.embeddings0, inst.seq);
  return inst;
}

// Fixed random denoiser D(z)_a = β · tanh(z_a W_z + ctx_a W_ctx), where ctx_a
// is the cross-attention readout Σ_i A_ai k_i at position a. Since
// |tanh x| ≤ |x|, ‖D‖ ≤ β(‖W_z‖‖z‖ + ‖W_ctx‖‖ctx‖).
struct ToyDenoiser {
  Mat w_z;    // channels × channels
  Mat w_ctx;  // key_dim × channels
  double beta = 0.02;
  std::uint64_t seed = 0;

  static ToyDenoiser make(std::uint64_t seed, std::size_t channels, std::size_t key_dim, double beta) {
    RngStream rng(seed, 0x64656e6f);
    ToyDenoiser d;
    d.w_z = rng.normal_mat(channels, channels, 1.0 / std::sqrt(static_cast<double>(channels)));
    d.w_ctx = rng.normal_mat(key_dim, channels, 1.0 / std::sqrt(static_cast<double>(key_dim)));
    d.beta = beta;
    d.seed = seed;
    return d;
  }

  Mat apply(const Mat& z, const Mat& a_avg, const Mat& keys) const {
    if (a_avg.rows() != z.rows()) {
      throw ShapeError("denoiser: map has " + std::to_string(a_avg.rows()) + " positions, latent has " +
                       std::to_string(z.rows()));
    }
    Mat pre = matmul(z, w_z) + matmul(matmul(a_avg, keys), w_ctx);
    for (double& v : pre.flat()) v = beta * std::tanh(v);
    return pre;
  }
};

struct TraceEntry {
  std::size_t iteration = 0;  // 0 .. τ; iteration k runs at t = τ − k
  std::size_t t = 0;
  double loss_before = 0.0;   // before any guidance at this iteration
  double loss = 0.0;          // after guidance (equal to loss_before if none ran)
  double c_bound_mean = 0.0;
  double c_unbound_mean = 0.0;
  bool guided = false;
  std::vector<double> inner_losses;  // per inner iteration, loss before the update
};

struct LatentState {
  Mat z;
  std::size_t t = 0;
  std::size_t tau = 0;
  std::vector<TraceEntry> trace;
};

class DivergenceError : public NumericalError {
 public:
  DivergenceError(LatentState state, const std::string& what)
      : NumericalError("denoise_loop", what), state_(std::move(state)) {}
  const LatentState& state() const noexcept { return state_; }

 private:
  LatentState state_;
};

inline double mean_over_pairs(const Mat& c, const std::vector<TokenPair>& pairs) {
  if (pairs.empty()) return 0.0;
  double acc = 0.0;
  for (const auto& [i, j] : pairs) acc += c(i, j);
  return acc / static_cast<double>(pairs.size());
}

// Runs t = τ..1. With `guidance` set, scheduled iterations apply
// guide::update_latent before the denoiser. A final trace entry records z_0.
inline LatentState denoise_loop(LatentState init, const guide::SimilarityPipeline& pipeline,
                                const std::optional<guide::GuidanceConfig>& guidance, const ToyDenoiser& denoiser,
                                const PairSets& pairs) {
  if (init.t != init.tau) throw ArgumentError("denoise_loop: initial state must have t = tau");
  if (guidance) guidance->validate(init.tau);
  LatentState st = std::move(init);
  auto snapshot = [&](std::size_t k, const guide::SimilarityPipeline::Forward& fw) {
    TraceEntry e;
    e.iteration = k;
    e.t = st.tau - k;
    e.loss_before = e.loss = fw.report.loss;
    e.c_bound_mean = mean_over_pairs(fw.state.c, pairs.bound);
    e.c_unbound_mean = mean_over_pairs(fw.state.c, pairs.unbound);
    return e;
  };
  for (std::size_t k = 0; k < st.tau; ++k) {
    auto fw = pipeline.forward(st.z);
    TraceEntry entry = snapshot(k, fw);
    if (guidance && guidance->scheduled(k)) {
      auto upd = guide::update_latent(st.z, *guidance, pipeline, k);
      st.z = std::move(upd.latent);
      fw = pipeline.forward(st.z);
      const double before = entry.loss_before;
      entry = snapshot(k, fw);
      entry.loss_before = before;
      entry.guided = true;
      for (const auto& r : upd.reports) entry.inner_losses.push_back(r.loss);
    }
    st.trace.push_back(std::move(entry));
    st.z -= denoiser.apply(st.z, fw.state.a_avg, pipeline.keys());
    st.t = st.tau - k - 1;
    const double zn = frobenius(st.z);
    if (!std::isfinite(zn) || zn > 1e6) {
      throw DivergenceError(st, "latent norm " + std::to_string(zn) + " at t=" + std::to_string(st.t));
    }
  }
  st.trace.push_back(snapshot(st.tau, pipeline.forward(st.z)));
  return st;
}

// Geometry of the toy world beyond the text instance.
struct SandboxConfig {
  SynthSpec synth;
  std::size_t tau = 50;
  std::size_t grid_side = 4;  // M = grid_side²
  std::size_t channels = 4;
  std::vector<std::size_t> layer_grids{4, 4};  // per cross-attention layer, N_c = side²
  std::size_t cross_heads = 2;
  std::size_t cross_head_dim = 4;
  double sd_wc = 0.25;
  double sd_q = 0.5;
  double denoiser_beta = 0.02;

  std::size_t m() const noexcept { return grid_side * grid_side; }

  void validate() const {
    if (tau < 1) throw ConfigError("sandbox.tau must be >= 1");
    if (grid_side < 1 || channels < 1) throw ConfigError("sandbox.grid_side and sandbox.channels must be >= 1");
    if (synth.s < 6) throw ConfigError("sandbox.s must be >= 6");
    if (!(denoiser_beta >= 0.0)) throw ConfigError("sandbox.denoiser_beta must be >= 0");
    if (!(synth.sink_bias >= 0.0)) throw ConfigError("encoder.sink_bias must be >= 0");
    bool has_m = false;
    for (std::size_t g : layer_grids) {
      if (g == 0 || grid_side % g != 0) throw ConfigError("sandbox.layer_grids entries must divide grid_side");
      has_m = has_m || g == grid_side;
    }
    if (!has_m) throw ConfigError("sandbox.layer_grids needs at least one layer at grid_side");
  }
};

// Everything one seed needs: text instance, cross-attention weights,
// denoiser, and the initial Gaussian latent.
struct World {
  TextInstance text;
  xattn::CrossParams cross;
  ToyDenoiser denoiser;
  LatentState init;
};

inline World make_world(std::uint64_t root_seed, std::uint64_t seed, const SandboxConfig& cfg) {
  cfg.validate();
  const RngStream base(root_seed, seed);
  World w;
  auto text_rng = base.split(1);
  w.text = synth_instance(text_rng, cfg.synth);
  std::vector<std::size_t> n_cs;
  for (std::size_t g : cfg.layer_grids) n_cs.push_back(g * g);
  auto cross_rng = base.split(2);
  w.cross = xattn::random_cross_params(cross_rng, n_cs, cfg.m(), cfg.cross_heads, cfg.cross_head_dim, cfg.channels,
                                       w.text.enc.k.cols(), cfg.sd_wc, cfg.sd_q);
  w.denoiser = ToyDenoiser::make(base.split(3).engine()(), cfg.channels, w.text.enc.k.cols(), cfg.denoiser_beta);
  auto z_rng = base.split(4);
  w.init.z = z_rng.normal_mat(cfg.m(), cfg.channels);
  w.init.tau = w.init.t = cfg.tau;
  return w;
}

inline guide::SimilarityPipeline make_pipeline(const World& w, const guide::GuidanceConfig& cfg) {
  return guide::SimilarityPipeline(w.cross, w.text.enc.k, w.text.enc.t_renorm, w.text.seq, cfg);
}

struct SeedRun {
  std::uint64_t seed = 0;
  LatentState guided;
  LatentState control;
};

// Paired run: same world and initial latent, with and without guidance.
inline SeedRun run_seed(std::uint64_t root_seed, std::uint64_t seed, const SandboxConfig& scfg,
                        const guide::GuidanceConfig& gcfg) {
  const World w = make_world(root_seed, seed, scfg);
  const auto pipe = make_pipeline(w, gcfg);
  SeedRun run;
  run.seed = seed;
  run.guided = denoise_loop(w.init, pipe, gcfg, w.denoiser, w.text.pairs);
  run.control = denoise_loop(w.init, pipe, std::nullopt, w.denoiser, w.text.pairs);
  return run;
}

}  // namespace tsam::sandbox
