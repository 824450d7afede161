#pragma once

// `tsam` command line: run | verify | analyze | dump-encoding | import-maps.
// Exit codes: 0 success, 1 failed assertion or numerical/construction
// failure, 2 usage or configuration error.

#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "tsam/analysis.hpp"
#include "tsam/config.hpp"
#include "tsam/crossattn.hpp"
#include "tsam/guidance.hpp"
#include "tsam/parallel.hpp"
#include "tsam/sandbox.hpp"
#include "tsam/stats.hpp"
#include "tsam/tensor_io.hpp"
#include "tsam/verify.hpp"

namespace tsam::cli {

namespace fs = std::filesystem;
using io::json;

inline constexpr int kOk = 0;
inline constexpr int kFailed = 1;
inline constexpr int kUsage = 2;

// Raised when a computed property does not hold; maps to exit code 1.
class AssertionFailure : public Error {
 public:
  using Error::Error;
};

struct Overrides {
  std::string config;
  std::optional<std::string> out;
  std::optional<std::size_t> seeds;
  std::optional<double> alpha;
  std::optional<double> gamma;
  std::optional<std::string> schedule;
  std::optional<std::size_t> inner_iters;
  std::optional<std::string> preset;
  std::optional<std::string> format;
};

inline std::vector<std::size_t> parse_schedule(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    // "a-b" expands to the inclusive range.
    const auto dash = item.find('-');
    try {
      if (dash != std::string::npos && dash > 0) {
        const auto lo = std::stoul(item.substr(0, dash)), hi = std::stoul(item.substr(dash + 1));
        if (hi < lo) throw ConfigError("--schedule range '" + item + "' is empty");
        for (auto t = lo; t <= hi; ++t) out.push_back(t);
      } else {
        if (item.front() == '-') throw std::invalid_argument(item);
        out.push_back(std::stoul(item));
      }
    } catch (const std::logic_error&) {
      throw ConfigError("--schedule: '" + item + "' is not a step number or range");
    }
  }
  return out;
}

inline config::RunConfig resolve(const Overrides& o) {
  config::RunConfig rc = o.config.empty() ? config::parse_config(json::object()) : config::load_config(o.config);
  if (o.preset) {
    const auto base = guide::GuidanceConfig::preset(*o.preset);
    rc.guidance.alpha = base.alpha;
    rc.guidance.schedule = base.schedule;
    rc.guidance.inner_iters = base.inner_iters;
  }
  if (o.alpha) {
    if (!(*o.alpha >= 0.0)) throw ConfigError("--alpha must be >= 0");
    rc.guidance.alpha = *o.alpha;
  }
  if (o.gamma) {
    if (!(*o.gamma >= 1.0)) throw ConfigError("--gamma must be >= 1");
    rc.guidance.gamma = *o.gamma;
  }
  if (o.schedule) rc.guidance.schedule = parse_schedule(*o.schedule);
  if (o.inner_iters) {
    if (*o.inner_iters < 1) throw ConfigError("--inner-iters must be >= 1");
    rc.guidance.inner_iters = *o.inner_iters;
  }
  if (o.seeds) {
    if (*o.seeds < 1) throw ConfigError("--seeds must be >= 1");
    rc.seeds = *o.seeds;
  }
  if (o.out) rc.out = *o.out;
  if (o.format) rc.format = *o.format;
  rc.validate();
  return rc;
}

// ---------------------------------------------------------------------------
// run

struct RunTotals {
  std::size_t seeds = 0;
  std::size_t guided_separated = 0;
  std::size_t control_separated = 0;
  std::size_t loss_decreased = 0;
  double mean_final_loss = 0.0;

  double p_value() const { return stats::two_proportion_pvalue(guided_separated, seeds, control_separated, seeds); }
};

inline bool separated(const sandbox::LatentState& st) {
  const auto& last = st.trace.back();
  return last.c_bound_mean > last.c_unbound_mean;
}

// Loss after guidance at the last scheduled iteration against the loss at
// the first iteration, before any guidance.
inline bool loss_decreased(const sandbox::LatentState& st) {
  std::optional<double> last;
  for (const auto& e : st.trace)
    if (e.guided) last = e.loss;
  return last && *last < st.trace.front().loss_before;
}

inline RunTotals tally(const std::vector<sandbox::SeedRun>& runs) {
  RunTotals t;
  t.seeds = runs.size();
  for (const auto& r : runs) {
    t.guided_separated += separated(r.guided) ? 1 : 0;
    t.control_separated += separated(r.control) ? 1 : 0;
    t.loss_decreased += loss_decreased(r.guided) ? 1 : 0;
    t.mean_final_loss += r.guided.trace.back().loss / static_cast<double>(runs.size());
  }
  return t;
}

inline std::vector<sandbox::SeedRun> run_seeds(const config::RunConfig& rc, const guide::GuidanceConfig& g) {
  std::vector<sandbox::SeedRun> runs(rc.seeds);
  parallel_for(rc.seeds, [&](std::size_t s) { runs[s] = sandbox::run_seed(rc.seed, s, rc.sandbox, g); });
  return runs;
}

inline std::string summary_csv(const std::vector<sandbox::SeedRun>& runs, bool control) {
  std::ostringstream os;
  os << "seed,step,loss,C_bound_mean,C_unbound_mean\n";
  for (const auto& r : runs)
    for (const auto& e : (control ? r.control : r.guided).trace)
      os << r.seed << ',' << e.iteration << ',' << io::format_double(e.loss) << ',' << io::format_double(e.c_bound_mean)
         << ',' << io::format_double(e.c_unbound_mean) << '\n';
  return os.str();
}

inline json trace_json(const sandbox::TraceEntry& e, const char* run) {
  return {{"run", run},         {"iteration", e.iteration}, {"t", e.t},
          {"loss_before", e.loss_before}, {"loss", e.loss}, {"C_bound_mean", e.c_bound_mean},
          {"C_unbound_mean", e.c_unbound_mean}, {"guided", e.guided}, {"inner_losses", e.inner_losses}};
}

inline json summary_json(const std::vector<sandbox::SeedRun>& runs, bool control) {
  json rows = json::array();
  for (const auto& r : runs)
    for (const auto& e : (control ? r.control : r.guided).trace)
      rows.push_back({{"seed", r.seed}, {"step", e.iteration}, {"loss", e.loss}, {"C_bound_mean", e.c_bound_mean},
                      {"C_unbound_mean", e.c_unbound_mean}});
  return rows;
}

inline json totals_json(const RunTotals& t) {
  return {{"seeds", t.seeds},
          {"guided_separated", t.guided_separated},
          {"control_separated", t.control_separated},
          {"loss_decreased", t.loss_decreased},
          {"mean_final_loss", t.mean_final_loss},
          {"p_value", t.p_value()}};
}

inline int cmd_run(const config::RunConfig& rc, std::ostream& out) {
  const fs::path dir = rc.out;
  if (rc.mode == "sweep") {
    std::ostringstream os;
    os << "alpha,gamma,separation_rate,control_rate,loss_decrease_rate,mean_final_loss,p_value\n";
    for (double a : rc.alpha_grid)
      for (double g : rc.gamma_grid) {
        auto cfg = rc.guidance;
        cfg.alpha = a;
        cfg.gamma = g;
        const auto t = tally(run_seeds(rc, cfg));
        const double n = static_cast<double>(t.seeds);
        os << io::format_double(a) << ',' << io::format_double(g) << ',' << io::format_double(t.guided_separated / n)
           << ',' << io::format_double(t.control_separated / n) << ',' << io::format_double(t.loss_decreased / n)
           << ',' << io::format_double(t.mean_final_loss) << ',' << io::format_double(t.p_value()) << '\n';
        out << "alpha=" << a << " gamma=" << g << ": separated " << t.guided_separated << "/" << t.seeds << '\n';
      }
    io::atomic_write(dir / "sweep.csv", os.str());
    return kOk;
  }
  const auto runs = run_seeds(rc, rc.guidance);
  for (const auto& r : runs) {
    std::string lines;
    for (const auto& e : r.guided.trace) lines += trace_json(e, "guided").dump() + "\n";
    for (const auto& e : r.control.trace) lines += trace_json(e, "control").dump() + "\n";
    io::atomic_write(dir / "traces" / ("seed_" + std::to_string(r.seed) + ".jsonl"), lines);
  }
  if (rc.format == "json") {
    io::atomic_write(dir / "summary.json", summary_json(runs, false).dump(1) + "\n");
    io::atomic_write(dir / "summary_control.json", summary_json(runs, true).dump(1) + "\n");
  } else {
    io::atomic_write(dir / "summary.csv", summary_csv(runs, false));
    io::atomic_write(dir / "summary_control.csv", summary_csv(runs, true));
  }
  const auto t = tally(runs);
  io::atomic_write(dir / "run.json", totals_json(t).dump(2) + "\n");
  out << "seeds " << t.seeds << ": bound>unbound with guidance " << t.guided_separated << ", without "
      << t.control_separated << " (p=" << t.p_value() << "); loss decreased on " << t.loss_decreased << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// verify

inline verify::Prop1Config prop1_from(const config::RunConfig& rc) {
  auto cfg = verify::make_prop1_config(rc.seed, rc.prop1.dim, rc.prop1.s, rc.prop1.eps_target);
  cfg.n_c_grid = rc.prop1.n_c_grid;
  cfg.trials = rc.prop1.trials;
  cfg.envelope_constant = rc.prop1.envelope_constant;
  return cfg;
}

inline int cmd_verify(const config::RunConfig& rc, const std::string& target, const std::optional<std::string>& out_path,
                      std::ostream& out) {
  verify::McReport rep;
  verify::Verdict verdict;
  if (target == "prop1") {
    rep = verify::prop1_measure(prop1_from(rc));
    verdict = verify::prop1_verdict(rep);
  } else if (target == "prop2") {
    auto cfg = rc.prop2;
    cfg.seed = rc.seed;
    rep = verify::prop2_measure(cfg);
    verdict = verify::prop2_verdict(rep);
  } else {
    auto cfg = rc.a4;
    cfg.seed = rc.seed;
    rep = verify::a4_extension_measure(cfg);
    verdict = verify::a4_verdict(rep);
  }
  const fs::path path = out_path ? fs::path(*out_path) : fs::path(rc.out) / (target + (rc.format == "json" ? ".json" : ".csv"));
  const bool as_json = out_path ? path.extension() != ".csv" : rc.format == "json";
  json j = rep.to_json();
  j["pass"] = verdict.pass;
  j["failures"] = verdict.failures;
  io::atomic_write(path, as_json ? j.dump(2) + "\n" : rep.to_csv());
  for (const auto& [k, f] : rep.fits) out << target << " fit " << k << ": slope " << f.slope << " intercept " << f.intercept << '\n';
  for (const auto& f : rep.flags) out << target << " note: " << f << '\n';
  if (!verdict.pass) {
    std::string msg;
    for (const auto& f : verdict.failures) msg += "\n  " + f;
    throw AssertionFailure(target + " failed:" + msg);
  }
  out << target << ": pass\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// analyze

inline std::vector<sandbox::TextInstance> analysis_instances(const config::RunConfig& rc) {
  std::vector<sandbox::TextInstance> insts(rc.analysis_instances);
  parallel_for(rc.analysis_instances, [&](std::size_t n) {
    RngStream rng(rc.seed, 0x616e0000 + n);
    insts[n] = sandbox::synth_instance(rng, rc.sandbox.synth);
  });
  return insts;
}

inline int cmd_analyze(const config::RunConfig& rc, const std::string& fig, std::ostream& out) {
  const fs::path dir = rc.out;
  json summary;
  bool ok = true;
  std::string why;
  if (fig == "fig2a" || fig == "fig4") {
    auto fc = rc.finding1;
    fc.seed = rc.seed;
    const auto study = analysis::finding1_study(fc);
    io::atomic_write(dir / (fig + ".csv"), fig == "fig2a" ? analysis::fig2a_csv(study) : analysis::fig4_csv(study));
    summary = study.to_json();
    const double rho = study.stats.at("spearman@step1");
    out << "spearman at step 1: " << rho << '\n';
    if (fig == "fig2a" && fc.sink && !fc.heavy_tailed && rho < 0.9) {
      ok = false;
      why = "spearman at step 1 = " + std::to_string(rho) + " < 0.9";
    }
  } else if (fig == "fig2b" || fig == "fig5a") {
    const auto study = analysis::separation_study(analysis_instances(rc), rc.histogram_bins);
    io::atomic_write(dir / (fig + ".csv"), fig == "fig2b" ? analysis::fig2b_csv(study) : analysis::fig5a_csv(study));
    summary = study.to_json();
    const double ke = study.stats.at("embedding_ks"), kt = study.stats.at("tprime_ks");
    out << "KS embedding " << ke << ", KS T' " << kt << '\n';
    if (rc.sandbox.synth.planted && !(kt > ke)) {
      ok = false;
      why = "planted structure but KS(T') <= KS(embedding)";
    }
  } else {
    const auto sink = analysis::sink_histogram(analysis_instances(rc), rc.histogram_bins);
    io::atomic_write(dir / "fig5b.csv", analysis::fig5b_csv(sink));
    summary = {{"stats", {{"bos_to_non_bos_ratio", sink.ratio}}}};
    out << "BOS / non-BOS mean ratio " << sink.ratio << '\n';
  }
  summary["pass"] = ok;
  io::atomic_write(dir / (fig + "_summary.json"), summary.dump(2) + "\n");
  if (!ok) throw AssertionFailure(fig + ": " + why);
  return kOk;
}

// ---------------------------------------------------------------------------
// dump-encoding / import-maps

inline int cmd_dump_encoding(const config::RunConfig& rc, std::uint64_t instance, std::ostream& out) {
  const auto world = sandbox::make_world(rc.seed, instance, rc.sandbox);
  const auto& enc = world.text.enc;
  const fs::path dir = rc.out;
  std::vector<std::string> names;
  std::vector<Mat> owned;
  owned.push_back(world.text.embeddings0);
  names.push_back("embeddings0");
  owned.push_back(enc.k);
  names.push_back("K");
  owned.push_back(enc.t_prime);
  names.push_back("T_prime");
  owned.push_back(enc.t_renorm);
  names.push_back("T_renorm");
  owned.push_back(Mat(1, enc.epsilon.size(), enc.epsilon));
  names.push_back("epsilon");
  for (std::size_t l = 0; l < enc.layers; ++l)
    for (std::size_t h = 0; h < enc.heads; ++h) {
      owned.push_back(enc.t(l, h));
      names.push_back("T_" + std::to_string(l) + "_" + std::to_string(h));
    }
  std::vector<std::pair<std::string, const Mat*>> tensors;
  for (std::size_t i = 0; i < owned.size(); ++i) tensors.emplace_back(names[i], &owned[i]);
  io::write_tensor_set(dir / "encoding", tensors);

  const auto pipe = sandbox::make_pipeline(world, rc.guidance);
  const auto fw = pipe.forward(world.init.z);
  xattn::export_maps(dir / "maps", fw.state);
  out << "wrote " << (dir / "encoding" / "manifest.json").string() << " and " << (dir / "maps" / "manifest.json").string()
      << '\n';
  return kOk;
}

// Re-derives C and S from the imported maps and checks them against any
// stored copies.
inline int cmd_import_maps(const config::RunConfig& rc, const std::string& manifest, std::ostream& out) {
  auto st = xattn::import_maps(manifest);
  const Mat stored_c = st.c, stored_s = st.s;
  if (st.a_smooth.empty()) st = xattn::smooth(std::move(st), rc.guidance.kernel_size, rc.guidance.sigma);
  st = xattn::similarity(std::move(st), !rc.guidance.smooth);
  double dc = 0.0, ds = 0.0;
  if (!stored_c.empty())
    for (std::size_t k = 0; k < stored_c.flat().size(); ++k) dc = std::max(dc, std::abs(stored_c.flat()[k] - st.c.flat()[k]));
  if (!stored_s.empty())
    for (std::size_t k = 0; k < stored_s.flat().size(); ++k) ds = std::max(ds, std::abs(stored_s.flat()[k] - st.s.flat()[k]));
  const fs::path dir = rc.out;
  io::atomic_write(dir / "C.csv", io::to_csv(st.c));
  io::atomic_write(dir / "S.csv", io::to_csv(st.s));
  const json j{{"tokens", st.a_avg.cols()}, {"positions", st.a_avg.rows()}, {"max_abs_diff_C", dc}, {"max_abs_diff_S", ds}};
  io::atomic_write(dir / "import.json", j.dump(2) + "\n");
  out << "imported " << st.a_avg.rows() << "x" << st.a_avg.cols() << " maps; recomputed C/S differ by " << dc << "/" << ds
      << '\n';
  if (dc > 1e-9 || ds > 1e-9) throw AssertionFailure("stored C/S disagree with the maps (max diff " + std::to_string(std::max(dc, ds)) + ")");
  return kOk;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Text self-attention guidance laboratory", "tsam"};
  app.require_subcommand(1);
  Overrides o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config, "JSON config file");
    sub->add_option("--out", o.out, "Output directory (file for verify)");
    sub->add_option("--format", o.format, "Output format")->check(CLI::IsMember({"csv", "json"}));
  };
  auto guidance_flags = [&](CLI::App* sub) {
    sub->add_option("--seeds", o.seeds, "Number of seeds");
    sub->add_option("--alpha", o.alpha, "Guidance step size");
    sub->add_option("--gamma", o.gamma, "Exponent on the text self-attention target");
    sub->add_option("--schedule", o.schedule, "Scheduled iterations, e.g. 0,10,20 or 1-25");
    sub->add_option("--inner-iters", o.inner_iters, "Updates per scheduled iteration");
    sub->add_option("--preset", o.preset, "Guidance preset")->check(CLI::IsMember({"tifa", "anE"}));
  };

  auto* run_cmd = app.add_subcommand("run", "Denoise every seed with and without guidance");
  common(run_cmd);
  guidance_flags(run_cmd);

  std::string verify_target;
  auto* verify_cmd = app.add_subcommand("verify", "Monte Carlo / constructive checks");
  verify_cmd->add_option("target", verify_target, "prop1 | prop2 | a4")->required()->check(CLI::IsMember({"prop1", "prop2", "a4"}));
  common(verify_cmd);

  std::string figure;
  auto* analyze_cmd = app.add_subcommand("analyze", "Pair statistics and figure CSVs");
  analyze_cmd->add_option("figure", figure, "fig2a | fig2b | fig4 | fig5a | fig5b")
      ->required()
      ->check(CLI::IsMember({"fig2a", "fig2b", "fig4", "fig5a", "fig5b"}));
  common(analyze_cmd);

  std::uint64_t instance = 0;
  auto* dump_cmd = app.add_subcommand("dump-encoding", "Write one instance's encoder tensors and initial maps");
  dump_cmd->add_option("--instance", instance, "Seed index within the root seed");
  common(dump_cmd);
  guidance_flags(dump_cmd);

  std::string manifest;
  auto* import_cmd = app.add_subcommand("import-maps", "Validate exported maps and recompute C and S");
  import_cmd->add_option("manifest", manifest, "manifest.json of a map set")->required();
  common(import_cmd);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kOk;
    }
    err << "tsam: " << e.what() << '\n';
    return kUsage;
  }

  try {
    if (*verify_cmd) {
      const std::optional<std::string> file = o.out;
      o.out.reset();
      return cmd_verify(resolve(o), verify_target, file, out);
    }
    const auto rc = resolve(o);
    if (*run_cmd) return cmd_run(rc, out);
    if (*analyze_cmd) return cmd_analyze(rc, figure, out);
    if (*dump_cmd) return cmd_dump_encoding(rc, instance, out);
    return cmd_import_maps(rc, manifest, out);
  } catch (const ConfigError& e) {
    err << "tsam: config error: " << e.what() << '\n';
    return kUsage;
  } catch (const ArgumentError& e) {
    err << "tsam: " << e.what() << '\n';
    return kUsage;
  } catch (const IngestionError& e) {
    err << "tsam: input error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "tsam: " << e.what() << '\n';
    return kFailed;
  }
}

}  // namespace tsam::cli
