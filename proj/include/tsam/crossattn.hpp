#pragma once

// Cross-attention maps between latent-derived queries and text embeddings,
// their head/layer average at resolution M, spatial smoothing, and the
// similarity matrices C (cosine between token maps) and S (C row-normalized).

#include <filesystem>
#include <string>
#include <vector>

#include "tsam/mat.hpp"
#include "tsam/numeric.hpp"
#include "tsam/rng.hpp"
#include "tsam/tensor_io.hpp"

namespace tsam::xattn {

struct CrossLayer {
  std::size_t n_c = 0;       // query positions; must be a perfect square
  std::size_t heads = 1;
  std::vector<Mat> w_c;      // per head, (query_dim × key_dim); folds W_qᵀ W_k
  Mat q_proj;                // (latent channels × query_dim)
  std::vector<double> q_bias;  // query_dim, or empty for none

  std::size_t query_dim() const noexcept { return q_proj.cols(); }
};

struct CrossParams {
  std::vector<CrossLayer> layers;
  std::size_t m = 16;  // averaging resolution

  void validate(std::size_t key_dim) const {
    if (layers.empty()) throw ConfigError("CrossParams: no layers");
    if (exact_sqrt(m) == 0) throw ShapeError("CrossParams: M=" + std::to_string(m) + " is not a perfect square");
    bool has_m = false;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& layer = layers[l];
      const std::string tag = "layer " + std::to_string(l);
      if (exact_sqrt(layer.n_c) == 0) throw ShapeError("CrossParams: " + tag + " N_c is not a perfect square");
      if (layer.heads == 0 || layer.w_c.size() != layer.heads) throw ShapeError("CrossParams: " + tag + " head count mismatch");
      for (const auto& w : layer.w_c) {
        if (w.rows() != layer.query_dim() || w.cols() != key_dim) {
          throw ShapeError("CrossParams: " + tag + " W_c is " + w.shape_str() + ", expected " +
                           std::to_string(layer.query_dim()) + "x" + std::to_string(key_dim));
        }
      }
      if (!layer.q_bias.empty() && layer.q_bias.size() != layer.query_dim()) {
        throw ShapeError("CrossParams: " + tag + " query bias length mismatch");
      }
      has_m = has_m || layer.n_c == m;
    }
    if (!has_m) throw ConfigError("CrossParams: no layer has N_c = M = " + std::to_string(m));
  }
};

// Random geometry: `n_cs` lists each layer's N_c. W_c entries ~ N(0, sd_wc²),
// query projection entries ~ N(0, sd_q²).
inline CrossParams random_cross_params(RngStream& rng, const std::vector<std::size_t>& n_cs, std::size_t m,
                                       std::size_t heads, std::size_t head_dim, std::size_t channels,
                                       std::size_t key_dim, double sd_wc, double sd_q) {
  CrossParams p;
  p.m = m;
  const std::size_t qd = heads * head_dim;
  for (std::size_t n_c : n_cs) {
    CrossLayer layer;
    layer.n_c = n_c;
    layer.heads = heads;
    for (std::size_t h = 0; h < heads; ++h) layer.w_c.push_back(rng.normal_mat(qd, key_dim, sd_wc));
    layer.q_proj = rng.normal_mat(channels, qd, sd_q);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

// Latent rows are positions of a square grid. A layer with a coarser grid
// sees the latent average-pooled by an integer factor.
inline Mat pool_latent(const Mat& latent, std::size_t n_c) {
  const std::size_t side = exact_sqrt(latent.rows());
  const std::size_t target = exact_sqrt(n_c);
  if (side == 0 || target == 0 || side % target != 0) {
    throw ShapeError("latent with " + std::to_string(latent.rows()) + " positions cannot be reshaped to N_c=" +
                     std::to_string(n_c));
  }
  if (side == target) return latent;
  const std::size_t f = side / target;
  Mat out(n_c, latent.cols());
  const double w = 1.0 / static_cast<double>(f * f);
  for (std::size_t r = 0; r < side; ++r)
    for (std::size_t c = 0; c < side; ++c) {
      const std::size_t dst = (r / f) * target + c / f;
      for (std::size_t ch = 0; ch < latent.cols(); ++ch) out(dst, ch) += w * latent(r * side + c, ch);
    }
  return out;
}

inline Mat layer_queries(const CrossLayer& layer, const Mat& latent) {
  Mat q = matmul(pool_latent(latent, layer.n_c), layer.q_proj);
  if (!layer.q_bias.empty())
    for (std::size_t a = 0; a < q.rows(); ++a)
      for (std::size_t c = 0; c < q.cols(); ++c) q(a, c) += layer.q_bias[c];
  return q;
}

// Ω = Q W_c Kᵀ, row-softmaxed over tokens.
inline Mat attention_map(const Mat& queries, const Mat& w_c, const Mat& keys) {
  return softmax_rows(matmul_nt(queries, matmul_nt(keys, w_c)));
}

struct CrossAttnState {
  std::vector<Mat> a_stack;                                  // per (layer, head), (N_c × s)
  std::vector<std::pair<std::size_t, std::size_t>> a_index;  // (layer, head) of each a_stack entry
  Mat a_avg;     // (M × s)
  Mat a_smooth;  // (M × s)
  Mat c;         // (s × s)
  Mat s;         // (s × s)
};

inline CrossAttnState compute_maps(const CrossParams& params, const Mat& latent, const Mat& keys) {
  params.validate(keys.cols());
  CrossAttnState st;
  Mat acc(params.m, keys.rows());
  std::size_t contributing = 0;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& layer = params.layers[l];
    const Mat q = layer_queries(layer, latent);
    for (std::size_t h = 0; h < layer.heads; ++h) {
      Mat a = attention_map(q, layer.w_c[h], keys);
      if (layer.n_c == params.m) {
        acc += a;
        ++contributing;
      }
      st.a_stack.push_back(std::move(a));
      st.a_index.emplace_back(l, h);
    }
  }
  acc *= 1.0 / static_cast<double>(contributing);
  st.a_avg = std::move(acc);
  return st;
}

// Blur every token column of an (M × s) map on its √M × √M grid.
inline Mat smooth_columns(const Mat& maps, std::size_t kernel_size, double sigma) {
  const std::size_t side = exact_sqrt(maps.rows());
  if (side == 0) throw ShapeError("smooth: M=" + std::to_string(maps.rows()) + " is not a perfect square");
  Mat out(maps.rows(), maps.cols());
  Mat field(side, side);
  for (std::size_t tok = 0; tok < maps.cols(); ++tok) {
    for (std::size_t a = 0; a < maps.rows(); ++a) field.flat()[a] = maps(a, tok);
    const Mat blurred = gaussian_blur_2d(field, kernel_size, sigma);
    for (std::size_t a = 0; a < maps.rows(); ++a) out(a, tok) = blurred.flat()[a];
  }
  return out;
}

inline CrossAttnState smooth(CrossAttnState st, std::size_t kernel_size, double sigma) {
  if (st.a_avg.empty()) throw ArgumentError("smooth: averaged map missing");
  st.a_smooth = smooth_columns(st.a_avg, kernel_size, sigma);
  return st;
}

// C_ij = cosine between columns i and j.
inline Mat column_cosines(const Mat& maps) {
  const std::size_t s = maps.cols();
  std::vector<std::vector<double>> cols(s);
  for (std::size_t i = 0; i < s; ++i) {
    cols[i] = maps.col(i);
    if (dot(cols[i], cols[i]) == 0.0) {
      throw DegenerateInputError("similarity: token " + std::to_string(i) + " has an all-zero attention map");
    }
  }
  Mat c(s, s);
  for (std::size_t i = 0; i < s; ++i) {
    c(i, i) = 1.0;
    for (std::size_t j = i + 1; j < s; ++j) c(i, j) = c(j, i) = cosine(cols[i], cols[j]);
  }
  return c;
}

inline Mat row_normalize(const Mat& c) {
  Mat s(c.rows(), c.cols());
  for (std::size_t i = 0; i < c.rows(); ++i) {
    double r = 0.0;
    for (double v : c.row(i)) r += v;
    if (!(r > 0.0)) throw DegenerateInputError("row_normalize: row " + std::to_string(i) + " sums to zero");
    for (std::size_t j = 0; j < c.cols(); ++j) s(i, j) = c(i, j) / r;
  }
  return s;
}

// Fills C and S from the smoothed maps, or from the raw average when
// `use_raw` is set.
inline CrossAttnState similarity(CrossAttnState st, bool use_raw = false) {
  const Mat& maps = use_raw ? st.a_avg : st.a_smooth;
  if (maps.empty()) throw ArgumentError(use_raw ? "similarity: averaged map missing" : "similarity: smoothed map missing");
  st.c = column_cosines(maps);
  st.s = row_normalize(st.c);
  return st;
}

namespace detail {
inline void check_row_stochastic(const Mat& a, const std::string& name, double tol = 1e-12) {
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double sum = 0.0;
    for (double v : a.row(r)) {
      if (v < 0.0) throw IngestionError(name, "negative attention probability in row " + std::to_string(r));
      sum += v;
    }
    if (std::abs(sum - 1.0) > tol) {
      throw IngestionError(name, "row " + std::to_string(r) + " sums to " + io::format_double(sum));
    }
  }
}
}  // namespace detail

// Writes A_stack_<n>, A_avg, A_smooth, C, S (whichever are present) plus
// manifest.json into `dir`.
inline void export_maps(const std::filesystem::path& dir, const CrossAttnState& st) {
  std::vector<std::string> names;
  std::vector<std::pair<std::string, const Mat*>> tensors;
  for (std::size_t i = 0; i < st.a_stack.size(); ++i) names.push_back("A_stack_" + std::to_string(i));
  for (std::size_t i = 0; i < st.a_stack.size(); ++i) tensors.emplace_back(names[i], &st.a_stack[i]);
  if (!st.a_avg.empty()) tensors.emplace_back("A_avg", &st.a_avg);
  if (!st.a_smooth.empty()) tensors.emplace_back("A_smooth", &st.a_smooth);
  if (!st.c.empty()) tensors.emplace_back("C", &st.c);
  if (!st.s.empty()) tensors.emplace_back("S", &st.s);
  io::write_tensor_set(dir, tensors);
}

// Loads a state written by export_maps (or by an external tool using the
// same manifest layout) and re-checks the map invariants.
inline CrossAttnState import_maps(const std::filesystem::path& manifest_path) {
  auto tensors = io::read_tensor_set(manifest_path);
  CrossAttnState st;
  for (std::size_t i = 0;; ++i) {
    auto it = tensors.find("A_stack_" + std::to_string(i));
    if (it == tensors.end()) break;
    detail::check_row_stochastic(it->second, it->first);
    st.a_stack.push_back(it->second);
  }
  auto take = [&](const char* name, Mat& dst) {
    if (auto it = tensors.find(name); it != tensors.end()) dst = it->second;
  };
  take("A_avg", st.a_avg);
  take("A_smooth", st.a_smooth);
  take("C", st.c);
  take("S", st.s);
  if (st.a_avg.empty()) throw IngestionError("A_avg", "manifest has no averaged map");
  detail::check_row_stochastic(st.a_avg, "A_avg");
  const std::size_t s = st.a_avg.cols();
  for (const auto& a : st.a_stack)
    if (a.cols() != s) throw IngestionError("cols", "A_stack token count differs from A_avg");
  if (!st.a_smooth.empty() && !st.a_smooth.same_shape(st.a_avg)) {
    throw IngestionError("rows", "A_smooth shape " + st.a_smooth.shape_str() + " != A_avg " + st.a_avg.shape_str());
  }
  if (!st.c.empty()) {
    if (st.c.rows() != s || st.c.cols() != s) throw IngestionError("rows", "C must be " + std::to_string(s) + "x" + std::to_string(s));
    for (std::size_t i = 0; i < s; ++i) {
      if (st.c(i, i) != 1.0) throw IngestionError("C", "diagonal entry " + std::to_string(i) + " is not 1");
      for (std::size_t j = 0; j < s; ++j)
        if (st.c(i, j) != st.c(j, i) || st.c(i, j) < 0.0 || st.c(i, j) > 1.0) {
          throw IngestionError("C", "entry (" + std::to_string(i) + "," + std::to_string(j) + ") breaks symmetry or [0,1]");
        }
    }
  }
  if (!st.s.empty()) {
    if (!st.s.same_shape(st.c.empty() ? Mat(s, s) : st.c)) throw IngestionError("rows", "S shape mismatch");
    detail::check_row_stochastic(st.s, "S");
  }
  return st;
}

}  // namespace tsam::xattn
