#pragma once

// JSON run configuration. Every section is optional; absent keys keep their
// defaults, unknown keys are rejected with their full path, and numeric
// fields are range-checked as they are read.

#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsam/analysis.hpp"
#include "tsam/guidance.hpp"
#include "tsam/sandbox.hpp"
#include "tsam/tensor_io.hpp"
#include "tsam/verify.hpp"

namespace tsam::config {

using io::json;

struct Prop1Settings {
  std::vector<std::size_t> n_c_grid{256, 512, 1024, 2048, 4096};
  std::size_t trials = 200;
  double eps_target = 0.02;
  std::size_t dim = 8;
  std::size_t s = 6;
  double envelope_constant = 3.0;
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  std::string format = "csv";  // csv | json
  std::string mode = "single";  // single | sweep
  std::size_t seeds = 64;
  sandbox::SandboxConfig sandbox;
  guide::GuidanceConfig guidance;
  std::vector<double> alpha_grid{5, 10, 15, 25, 40};
  std::vector<double> gamma_grid{2, 3, 4};
  Prop1Settings prop1;
  verify::Prop2Config prop2;
  verify::A4Config a4;
  analysis::Finding1Config finding1;
  std::size_t analysis_instances = 200;
  std::optional<std::size_t> histogram_bins;  // Freedman–Diaconis when unset

  void validate() const {
    sandbox.validate();
    guidance.validate(sandbox.tau);
    prop2.validate();
    a4.validate();
    finding1.validate();
  }
};

// One JSON object being read; tracks consumed keys so leftovers can be
// reported by path.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(display() + " must be a JSON object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  Section sub(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, child(key));
  }

  void get(const std::string& key, bool& out) {
    if (const json* v = take(key)) {
      if (!v->is_boolean()) throw ConfigError(child(key) + " must be a boolean");
      out = v->get<bool>();
    }
  }

  void get(const std::string& key, std::string& out) {
    if (const json* v = take(key)) {
      if (!v->is_string()) throw ConfigError(child(key) + " must be a string");
      out = v->get<std::string>();
    }
  }

  void get(const std::string& key, double& out, double lo, double hi, bool lo_open = false) {
    if (const json* v = take(key)) out = number(*v, key, lo, hi, lo_open);
  }

  void get(const std::string& key, std::size_t& out, std::size_t lo, std::size_t hi) {
    if (const json* v = take(key)) out = count(*v, key, lo, hi);
  }

  void get(const std::string& key, std::uint64_t& out) {
    if (const json* v = take(key)) {
      if (!v->is_number_unsigned() && !(v->is_number_integer() && v->get<long long>() >= 0)) {
        throw ConfigError(child(key) + " must be a non-negative integer");
      }
      out = v->get<std::uint64_t>();
    }
  }

  void get(const std::string& key, std::optional<double>& out, double lo, double hi, bool lo_open = false) {
    if (const json* v = take(key)) {
      if (v->is_null()) out.reset();
      else out = number(*v, key, lo, hi, lo_open);
    }
  }

  void get(const std::string& key, std::optional<std::size_t>& out, std::size_t lo, std::size_t hi) {
    if (const json* v = take(key)) {
      if (v->is_null()) out.reset();
      else out = count(*v, key, lo, hi);
    }
  }

  void get(const std::string& key, std::vector<double>& out, double lo, double hi, bool lo_open = false) {
    if (const json* v = take(key)) {
      if (!v->is_array() || v->empty()) throw ConfigError(child(key) + " must be a non-empty array of numbers");
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i)
        out.push_back(number((*v)[i], key + "[" + std::to_string(i) + "]", lo, hi, lo_open));
    }
  }

  void get(const std::string& key, std::vector<std::size_t>& out, std::size_t lo, std::size_t hi,
           bool allow_empty = false) {
    if (const json* v = take(key)) {
      if (!v->is_array() || (!allow_empty && v->empty())) {
        throw ConfigError(child(key) + " must be a " + (allow_empty ? "" : "non-empty ") + "array of integers");
      }
      out.clear();
      for (std::size_t i = 0; i < v->size(); ++i) out.push_back(count((*v)[i], key + "[" + std::to_string(i) + "]", lo, hi));
    }
  }

  void one_of(const std::string& key, std::string& out, const std::vector<std::string>& allowed) {
    get(key, out);
    if (!has(key)) return;
    for (const auto& a : allowed)
      if (out == a) return;
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    throw ConfigError(child(key) + " must be one of {" + list + "}, got '" + out + "'");
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError("unknown key '" + child(k) + "'");
    }
  }

  std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string display() const { return path_.empty() ? "config root" : path_; }

  const json* take(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  double number(const json& v, const std::string& key, double lo, double hi, bool lo_open) const {
    if (!v.is_number()) throw ConfigError(child(key) + " must be a number");
    const double x = v.get<double>();
    const bool ok = (lo_open ? x > lo : x >= lo) && x <= hi;
    if (!ok || !std::isfinite(x)) {
      throw ConfigError(child(key) + " = " + io::format_double(x) + " outside " + (lo_open ? "(" : "[") +
                        io::format_double(lo) + ", " + io::format_double(hi) + "]");
    }
    return x;
  }

  std::size_t count(const json& v, const std::string& key, std::size_t lo, std::size_t hi) const {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
      throw ConfigError(child(key) + " must be a non-negative integer");
    }
    const auto x = v.get<std::size_t>();
    if (x < lo || x > hi) {
      throw ConfigError(child(key) + " = " + std::to_string(x) + " outside [" + std::to_string(lo) + ", " +
                        std::to_string(hi) + "]");
    }
    return x;
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline constexpr double kBig = 1e12;
inline constexpr std::size_t kMaxCount = 1'000'000'000;

inline void read_guidance(Section sec, guide::GuidanceConfig& g) {
  std::string preset;
  sec.one_of("preset", preset, {"tifa", "anE"});
  if (!preset.empty()) g = guide::GuidanceConfig::preset(preset);
  sec.get("alpha", g.alpha, 0.0, kBig);
  sec.get("gamma", g.gamma, 1.0, 64.0);
  sec.get("schedule", g.schedule, 0, kMaxCount, true);
  sec.get("inner_iters", g.inner_iters, 1, 100000);
  sec.get("kernel_size", g.kernel_size, 1, 99);
  if (g.kernel_size % 2 == 0) throw ConfigError(sec.child("kernel_size") + " must be odd");
  sec.get("sigma", g.sigma, 0.0, kBig, true);
  sec.get("smooth", g.smooth);
  sec.get("exclude_bos_row", g.exclude_bos_row);
  sec.get("exclude_eos", g.exclude_eos);
  sec.get("rho_scale", g.rho_scale, 0.0, kBig, true);
  sec.get("grad_norm_cap", g.grad_norm_cap, 0.0, kBig, true);
  sec.get("backtrack", g.backtrack);
  sec.get("max_backtracks", g.max_backtracks, 0, 1000);
  sec.finish();
}

inline void read_encoder(Section sec, sandbox::SynthSpec& sp) {
  sec.get("s", sp.s, 6, 4096);
  sec.get("layers", sp.layers, 1, 64);
  sec.get("heads", sp.heads, 1, 64);
  sec.get("head_dim", sp.head_dim, 1, 1024);
  if (sp.heads * sp.head_dim < 4) throw ConfigError(sec.child("head_dim") + ": heads*head_dim must be >= 4");
  sec.get("sink_bias", sp.sink_bias, 0.0, 1e4);
  sec.get("planted", sp.planted);
  sec.get("pair_coupling", sp.pair_coupling, -kBig, kBig);
  sec.get("self_coupling", sp.self_coupling, -kBig, kBig);
  sec.get("en_noise", sp.en_noise, 0.0, kBig);
  sec.get("role_offset", sp.role_offset, 0.0, kBig);
  sec.get("embed_noise", sp.embed_noise, 0.0, kBig);
  sec.get("bound_embedding_similarity", sp.bound_embedding_similarity, -1.0, 1.0);
  sec.get("identical_bound_embeddings", sp.identical_bound_embeddings);
  sec.get("sd_v", sp.sd_v, 0.0, kBig);
  sec.get("sd_out", sp.sd_out, 0.0, kBig);
  sec.finish();
}

inline void read_cross(Section sec, sandbox::SandboxConfig& sc) {
  sec.get("grid_side", sc.grid_side, 1, 1024);
  sec.get("channels", sc.channels, 1, 4096);
  sec.get("layer_grids", sc.layer_grids, 1, 1024);
  sec.get("heads", sc.cross_heads, 1, 64);
  sec.get("head_dim", sc.cross_head_dim, 1, 1024);
  sec.get("sd_wc", sc.sd_wc, 0.0, kBig);
  sec.get("sd_q", sc.sd_q, 0.0, kBig);
  sec.finish();
}

inline void read_verify(Section sec, RunConfig& rc) {
  {
    Section p = sec.sub("prop1");
    p.get("n_c_grid", rc.prop1.n_c_grid, 2, 1 << 24);
    p.get("trials", rc.prop1.trials, 2, kMaxCount);
    p.get("eps_target", rc.prop1.eps_target, 0.0, 1.0, true);
    p.get("dim", rc.prop1.dim, 2, 4096);
    p.get("s", rc.prop1.s, 3, 4096);
    p.get("envelope_constant", rc.prop1.envelope_constant, 0.0, kBig, true);
    p.finish();
  }
  {
    Section p = sec.sub("prop2");
    p.get("s", rc.prop2.s, 3, 4096);
    p.get("dim", rc.prop2.dim, 3, 4096);
    p.get("eps_grid", rc.prop2.eps_grid, 0.0, 0.999);
    p.get("trials", rc.prop2.trials, 2, kMaxCount);
    p.get("x_lo", rc.prop2.x_lo, 0.0, kBig, true);
    p.get("x_hi", rc.prop2.x_hi, 0.0, kBig, true);
    p.get("common_weight", rc.prop2.common_weight, 0.0, 1.0, true);
    p.get("bos_scale", rc.prop2.bos_scale, 0.0, kBig, true);
    p.finish();
  }
  {
    Section p = sec.sub("a4");
    p.get("s", rc.a4.s, 3, 4096);
    p.get("heads", rc.a4.heads, 1, 64);
    p.get("head_dim", rc.a4.head_dim, 1, 1024);
    p.get("eps_grid", rc.a4.eps_grid, 0.0, 0.999, true);
    p.get("trials", rc.a4.trials, 2, kMaxCount);
    p.get("skip", rc.a4.skip);
    p.get("uniform_rows", rc.a4.uniform_rows);
    p.finish();
  }
  sec.finish();
}

inline void read_analysis(Section sec, RunConfig& rc) {
  sec.get("instances", rc.analysis_instances, 15, kMaxCount);
  sec.get("histogram_bins", rc.histogram_bins, 1, 100000);
  Section f = sec.sub("finding1");
  auto& fc = rc.finding1;
  f.get("points", fc.points, 3, 100000);
  f.get("n_c", fc.n_c, 2, 1 << 24);
  f.get("dim", fc.dim, 3, 4096);
  f.get("key_norm", fc.key_norm, 0.0, kBig, true);
  f.get("sink", fc.sink);
  f.get("heavy_tailed", fc.heavy_tailed);
  f.get("tau", fc.tau, 2, 100000);
  f.get("denoiser_beta", fc.denoiser_beta, 0.0, kBig);
  f.finish();
  sec.finish();
}

inline RunConfig parse_config(const json& root) {
  RunConfig rc;
  Section top(root, "");
  top.get("seed", rc.seed);
  top.get("out", rc.out);
  top.one_of("format", rc.format, {"csv", "json"});
  top.one_of("mode", rc.mode, {"single", "sweep"});
  top.get("seeds", rc.seeds, 1, 1000000);
  read_encoder(top.sub("encoder"), rc.sandbox.synth);
  read_cross(top.sub("cross"), rc.sandbox);
  {
    Section sb = top.sub("sandbox");
    sb.get("tau", rc.sandbox.tau, 1, 1000000);
    sb.get("denoiser_beta", rc.sandbox.denoiser_beta, 0.0, kBig);
    sb.finish();
  }
  read_guidance(top.sub("guidance"), rc.guidance);
  {
    Section sw = top.sub("sweep");
    sw.get("alpha_grid", rc.alpha_grid, 0.0, kBig);
    sw.get("gamma_grid", rc.gamma_grid, 1.0, 64.0);
    sw.finish();
  }
  read_verify(top.sub("verify"), rc);
  read_analysis(top.sub("analysis"), rc);
  top.finish();
  for (std::size_t t : rc.guidance.schedule)
    if (t >= rc.sandbox.tau) {
      throw ConfigError("guidance.schedule entry " + std::to_string(t) + " outside [0, sandbox.tau = " +
                        std::to_string(rc.sandbox.tau) + ")");
    }
  if (rc.prop2.x_lo > rc.prop2.x_hi) throw ConfigError("verify.prop2.x_lo must be <= verify.prop2.x_hi");
  rc.validate();
  return rc;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config file '" + path.string() + "': " + e.what());
  }
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return parse_config(root);
}

}  // namespace tsam::config
