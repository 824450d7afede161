#pragma once

// Toy causal multi-head self-attention text encoder. Each layer is the
// attention sublayer with out-projection and skip connection only:
//
//   e_out_i = e_i + W_out · concat_h( Σ_{j≤i} T^{(h)}_ij W_v^{(h)} e_j )
//
// with T^{(h)} = softmax_rows(e W_en^{(h)} eᵀ + sink_bias·[j = bos]).

#include <optional>
#include <string>
#include <vector>

#include "tsam/mat.hpp"
#include "tsam/rng.hpp"

namespace tsam::text {

struct TokenSeq {
  std::size_t s = 0;
  std::size_t bos_index = 0;
  std::size_t eos_index = 0;
  // Optional group id per token; tokens sharing an id form a bound group.
  std::vector<std::optional<int>> group_labels;

  static TokenSeq plain(std::size_t s) {
    TokenSeq seq;
    seq.s = s;
    seq.bos_index = 0;
    seq.eos_index = s - 1;
    seq.group_labels.assign(s, std::nullopt);
    return seq;
  }

  void validate() const {
    if (s < 3) throw ArgumentError("TokenSeq: need s >= 3, got " + std::to_string(s));
    if (bos_index != 0) throw ArgumentError("TokenSeq: bos must sit at position 0");
    if (!(bos_index < eos_index && eos_index < s)) {
      throw ArgumentError("TokenSeq: need bos < eos < s (eos=" + std::to_string(eos_index) + ")");
    }
    if (!group_labels.empty() && group_labels.size() != s) {
      throw ArgumentError("TokenSeq: group_labels length " + std::to_string(group_labels.size()) + " != s");
    }
    std::vector<std::pair<int, int>> counts;
    for (const auto& g : group_labels) {
      if (!g) continue;
      auto it = std::find_if(counts.begin(), counts.end(), [&](auto& p) { return p.first == *g; });
      if (it == counts.end()) counts.emplace_back(*g, 1);
      else ++it->second;
    }
    for (const auto& [id, n] : counts)
      if (n < 2) throw ArgumentError("TokenSeq: group " + std::to_string(id) + " labels a single token");
  }
};

struct EncoderParams {
  std::size_t layers = 1;
  std::size_t heads = 1;
  std::size_t head_dim = 1;
  std::vector<std::vector<Mat>> w_en;  // [layer][head], (model × model)
  std::vector<std::vector<Mat>> w_v;   // [layer][head], (head_dim × model)
  std::vector<Mat> w_out;              // [layer], (model × model)
  double sink_bias = 0.0;
  bool causal = true;

  std::size_t model_dim() const noexcept { return heads * head_dim; }

  static EncoderParams zeros(std::size_t layers, std::size_t heads, std::size_t head_dim) {
    EncoderParams p;
    p.layers = layers;
    p.heads = heads;
    p.head_dim = head_dim;
    const std::size_t d = heads * head_dim;
    p.w_en.assign(layers, std::vector<Mat>(heads, Mat(d, d)));
    p.w_v.assign(layers, std::vector<Mat>(heads, Mat(head_dim, d)));
    p.w_out.assign(layers, Mat(d, d));
    return p;
  }

  // Gaussian weights with the given entry standard deviations.
  static EncoderParams random(RngStream& rng, std::size_t layers, std::size_t heads, std::size_t head_dim,
                              double sd_en, double sd_v, double sd_out) {
    EncoderParams p = zeros(layers, heads, head_dim);
    const std::size_t d = heads * head_dim;
    for (std::size_t l = 0; l < layers; ++l) {
      for (std::size_t h = 0; h < heads; ++h) {
        p.w_en[l][h] = rng.normal_mat(d, d, sd_en);
        p.w_v[l][h] = rng.normal_mat(head_dim, d, sd_v);
      }
      p.w_out[l] = rng.normal_mat(d, d, sd_out);
    }
    return p;
  }

  void validate() const {
    if (layers == 0 || heads == 0 || head_dim == 0) throw ShapeError("EncoderParams: zero dimension");
    if (!(sink_bias >= 0.0)) throw ArgumentError("EncoderParams: sink_bias must be >= 0");
    const std::size_t d = model_dim();
    auto check = [](const Mat& m, std::size_t r, std::size_t c, const std::string& what) {
      if (m.rows() != r || m.cols() != c) {
        throw ShapeError("EncoderParams: " + what + " is " + m.shape_str() + ", expected " +
                         std::to_string(r) + "x" + std::to_string(c));
      }
      if (!m.all_finite()) throw NumericalError("EncoderParams", what + " has non-finite entries");
    };
    if (w_en.size() != layers || w_v.size() != layers || w_out.size() != layers) {
      throw ShapeError("EncoderParams: per-layer weight count != layers");
    }
    for (std::size_t l = 0; l < layers; ++l) {
      if (w_en[l].size() != heads || w_v[l].size() != heads) throw ShapeError("EncoderParams: head count mismatch");
      for (std::size_t h = 0; h < heads; ++h) {
        const std::string tag = "[" + std::to_string(l) + "][" + std::to_string(h) + "]";
        check(w_en[l][h], d, d, "w_en" + tag);
        check(w_v[l][h], head_dim, d, "w_v" + tag);
      }
      check(w_out[l], d, d, "w_out[" + std::to_string(l) + "]");
    }
  }
};

struct TextEncoding {
  std::size_t layers = 0;
  std::size_t heads = 0;
  Mat k;                     // final embeddings (s × model)
  std::vector<Mat> t_stack;  // [layer * heads + head], (s × s)
  std::vector<Mat> o_stack;  // [layer * heads + head], (s × head_dim)
  Mat t_prime;               // layer/head mean of t_stack
  Mat t_renorm;              // BOS-excluded renormalization of t_prime
  std::vector<std::size_t> empty_rows;  // rows of t_renorm with an empty window (left zero)
  std::vector<double> epsilon;          // per-token sink ratio, layer/head mean

  const Mat& t(std::size_t layer, std::size_t head) const { return t_stack.at(layer * heads + head); }
};

// Layer/head mean of the self-attention stack, summed layer-then-head.
inline Mat average_self_attention(const std::vector<Mat>& t_stack) {
  if (t_stack.empty()) throw ArgumentError("average_self_attention: empty stack");
  Mat acc(t_stack.front().rows(), t_stack.front().cols());
  for (const auto& t : t_stack) acc += t;
  acc *= 1.0 / static_cast<double>(t_stack.size());
  return acc;
}

inline Mat average_self_attention(const TextEncoding& enc) { return average_self_attention(enc.t_stack); }

// T_ij = T'_ij / Σ_{m=1..i} T'_im for 1 ≤ j ≤ i (0-based, BOS at 0). The BOS
// column is dropped; row 0 has an empty window and stays zero.
inline Mat renormalize(const Mat& t_prime, const TokenSeq& seq) {
  if (t_prime.rows() != seq.s || t_prime.cols() != seq.s) {
    throw ShapeError("renormalize: T' is " + t_prime.shape_str() + " for s=" + std::to_string(seq.s));
  }
  Mat t(seq.s, seq.s);
  for (std::size_t i = 1; i < seq.s; ++i) {
    double denom = 0.0;
    for (std::size_t m = 1; m <= i; ++m) denom += t_prime(i, m);
    if (denom < 1e-15) {
      throw DegenerateInputError("renormalize: row " + std::to_string(i) +
                                 " has no attention mass outside BOS (denominator " + std::to_string(denom) + ")");
    }
    for (std::size_t j = 1; j <= i; ++j) t(i, j) = t_prime(i, j) / denom;
  }
  return t;
}

// ε_i = Σ_{1≤j≤i} T_ij / T_i0 for one attention row (0-based, BOS at 0).
inline double sink_ratio_row(std::span<const double> row, std::size_t i) {
  if (row[0] == 0.0) {
    throw DegenerateInputError("sink_ratio: zero BOS attention in row " + std::to_string(i));
  }
  double rest = 0.0;
  for (std::size_t j = 1; j <= i && j < row.size(); ++j) rest += row[j];
  return rest / row[0];
}

struct SinkRatios {
  std::vector<std::vector<double>> per_head;  // [layer * heads + head][token]
  std::vector<double> mean;                   // [token], mean over layers and heads
};

inline SinkRatios sink_ratio(const std::vector<Mat>& t_stack) {
  if (t_stack.empty()) throw ArgumentError("sink_ratio: empty stack");
  SinkRatios out;
  const std::size_t s = t_stack.front().rows();
  out.mean.assign(s, 0.0);
  for (const auto& t : t_stack) {
    std::vector<double> eps(s);
    for (std::size_t i = 0; i < s; ++i) eps[i] = sink_ratio_row(t.row(i), i);
    for (std::size_t i = 0; i < s; ++i) out.mean[i] += eps[i] / static_cast<double>(t_stack.size());
    out.per_head.push_back(std::move(eps));
  }
  return out;
}

inline SinkRatios sink_ratio(const TextEncoding& enc) { return sink_ratio(enc.t_stack); }

inline TextEncoding encode(const EncoderParams& params, const Mat& embeddings0, const TokenSeq& seq) {
  params.validate();
  seq.validate();
  const std::size_t d = params.model_dim();
  if (embeddings0.rows() != seq.s || embeddings0.cols() != d) {
    throw ShapeError("encode: embeddings are " + embeddings0.shape_str() + ", expected " +
                     std::to_string(seq.s) + "x" + std::to_string(d));
  }
  if (!embeddings0.all_finite()) throw NumericalError("encode", "non-finite initial embeddings");

  TextEncoding enc;
  enc.layers = params.layers;
  enc.heads = params.heads;
  Mat e = embeddings0;
  for (std::size_t l = 0; l < params.layers; ++l) {
    Mat concat(seq.s, d);
    for (std::size_t h = 0; h < params.heads; ++h) {
      Mat logits = matmul_nt(matmul(e, params.w_en[l][h]), e);
      for (std::size_t i = 0; i < seq.s; ++i) logits(i, seq.bos_index) += params.sink_bias;
      Mat t = softmax_rows(logits, params.causal);
      Mat values = matmul_nt(e, params.w_v[l][h]);  // rows are W_v e_j
      Mat o = matmul(t, values);
      for (std::size_t i = 0; i < seq.s; ++i)
        for (std::size_t c = 0; c < params.head_dim; ++c) concat(i, h * params.head_dim + c) = o(i, c);
      enc.t_stack.push_back(std::move(t));
      enc.o_stack.push_back(std::move(o));
    }
    e += matmul_nt(concat, params.w_out[l]);
    if (!e.all_finite()) throw NumericalError("encode", "non-finite embeddings after layer " + std::to_string(l));
  }
  enc.k = std::move(e);
  enc.t_prime = average_self_attention(enc.t_stack);
  enc.t_renorm = renormalize(enc.t_prime, seq);
  enc.empty_rows = {seq.bos_index};
  enc.epsilon = sink_ratio(enc.t_stack).mean;
  return enc;
}

}  // namespace tsam::text
