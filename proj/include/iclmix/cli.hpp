#pragma once

// Command-line front end: run, plot, diagnose, ingest.
//
// Exit codes: 0 ok, 1 diagnostic check failed, 2 usage/config/parse error,
// 3 resource cap or I/O failure, 4 numerical failure.

#include <cstdlib>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "iclmix/iclmix.hpp"
#include "iclmix/plot.hpp"

namespace iclmix {

enum ExitCode : int { kOk = 0, kCheckFailed = 1, kUsage = 2, kResource = 3, kNumerical = 4 };

inline int default_threads() {
  if (const char* env = std::getenv("ICLMIX_THREADS")) {
    const int t = std::atoi(env);
    if (t > 0) return t;
  }
  return 1;
}

namespace detail {

inline std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = trim(item);
    int v = 0;
    const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
      throw ArgumentError("expected a comma-separated list of integers, got '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ArgumentError("empty list '" + s + "'");
  return out;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

struct Check {
  std::string name;
  bool ok;
  std::string detail;
};

inline int finish_checks(const std::vector<Check>& checks, std::ostream& out) {
  bool all = true;
  for (const auto& c : checks) {
    out << (c.ok ? "PASS " : "FAIL ") << c.name << ": " << c.detail << '\n';
    all = all && c.ok;
  }
  return all ? kOk : kCheckFailed;
}

inline std::string fixed(double v, int digits = 6) {
  std::ostringstream os;
  os << std::setprecision(digits) << v;
  return os.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

struct RunArgs {
  std::string config;
  std::string preset;
  int d = 0;
  std::string out = "results";
  int mc_runs = 0;
  int threads = 0;
  long long seed = -1;
  std::string models;
  int n_test = 0;
  double memory_cap_gb = 0.0;
  bool print_config = false;
  bool quiet = false;
};

inline int cmd_run(const RunArgs& a, std::ostream& out, std::ostream& err) {
  if (a.config.empty() == a.preset.empty()) throw ArgumentError("give either a config file or --preset");
  ExperimentConfig cfg = a.config.empty() ? preset(a.preset, a.d > 0 ? a.d : 32) : load_config(a.config);
  if (!a.config.empty() && a.d > 0) cfg.d = a.d;
  if (a.mc_runs > 0) cfg.mc_runs = a.mc_runs;
  if (a.seed >= 0) cfg.master_seed = static_cast<std::uint64_t>(a.seed);
  if (!a.models.empty()) cfg.models = detail::split_list(a.models);
  if (a.n_test > 0) cfg.n_test = a.n_test;
  if (a.memory_cap_gb > 0.0) cfg.memory_cap_gb = a.memory_cap_gb;
  validate_config(cfg);
  if (a.print_config) {
    out << config_to_string(cfg);
    return kOk;
  }
  RunOptions opt;
  opt.threads = a.threads > 0 ? a.threads : default_threads();
  if (!a.quiet) {
    opt.progress = [&err](std::size_t done, std::size_t total) {
      err << "\r" << done << "/" << total << " tasks" << (done == total ? "\n" : "")
          << std::flush;
    };
  }
  const ExperimentOutput res = run_experiment(cfg, opt);
  for (const auto& w : res.warnings) err << "warning: " << w << '\n';
  write_experiment(res, a.out);
  out << "wrote " << (std::filesystem::path(a.out) / "results.csv").string() << " (" << res.result.rows.size()
      << " rows, " << res.threads_used << " thread" << (res.threads_used == 1 ? "" : "s") << ")\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// plot
// ---------------------------------------------------------------------------

struct PlotArgs {
  std::string csv;
  std::string out;
  PlotSpec spec;
  std::string x_scale = "linear";
  std::string y_scale = "linear";
};

inline int cmd_plot(PlotArgs a, std::ostream& out, std::ostream& err) {
  a.spec.x_scale = axis_scale_from_name(a.x_scale);
  a.spec.y_scale = axis_scale_from_name(a.y_scale);
  const CsvTable table = load_table(a.csv);
  std::vector<std::string> warnings;
  const std::string svg = render_svg(table, a.spec, &warnings);
  for (const auto& w : warnings) err << "warning: " << w << '\n';
  std::filesystem::path dest = a.out;
  if (dest.empty()) dest = std::filesystem::path(a.csv).replace_extension(".svg");
  write_file_atomic(dest, svg);
  out << "wrote " << dest.string() << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// diagnose
// ---------------------------------------------------------------------------

struct DiagnoseArgs {
  std::string kind;
  std::string d_list;
  std::string out = "diagnostics";
  std::uint64_t seed = 0;
  std::string activation = "relu";
  int contexts = 200;
  int m_calib = 512;
  int nodes = 128;
};

inline int diagnose_hermite(const DiagnoseArgs& a, std::ostream& out) {
  const double inv = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  const HermiteExpansion relu = hermite_coefficients(Activation::relu(), 6, a.nodes);
  const HermiteExpansion tanh = hermite_coefficients(Activation::tanh(), 6, a.nodes);
  std::string csv = "activation,i,c_i,reference\n";
  const double ref[] = {inv, 0.5, inv};
  double err = 0.0;
  out << "relu Hermite coefficients (quadrature vs closed form)\n";
  for (int i = 0; i <= 6; ++i) {
    const bool has_ref = i < 3;
    if (has_ref) err = std::max(err, std::abs(relu.coeffs[i] - ref[i]));
    out << "  c" << i << " = " << std::setprecision(17) << relu.coeffs[i];
    if (has_ref) out << "   closed form " << ref[i];
    out << '\n';
    csv += "relu," + std::to_string(i) + ',' + format_double(relu.coeffs[i]) + ',' +
           (has_ref ? format_double(ref[i]) : "") + '\n';
  }
  double even = 0.0;
  out << "tanh Hermite coefficients\n";
  for (int i = 0; i <= 6; ++i) {
    if (i % 2 == 0) even = std::max(even, std::abs(tanh.coeffs[i]));
    out << "  c" << i << " = " << std::setprecision(17) << tanh.coeffs[i] << '\n';
    csv += "tanh," + std::to_string(i) + ',' + format_double(tanh.coeffs[i]) + ",\n";
  }
  bool monotone = true;
  std::string trail;
  for (const char* name : {"relu", "tanh"}) {
    double prev = INFINITY;
    trail += std::string(name) + " c_star:";
    for (int p = 1; p <= 6; ++p) {
      const double cs = hermite_coefficients(Activation::from_name(name), p, a.nodes).c_star;
      trail += ' ' + detail::fixed(cs, 6);
      csv += std::string(name) + ",c_star_p" + std::to_string(p) + ',' + format_double(cs) + ",\n";
      if (cs > prev + 1e-15) monotone = false;
      prev = cs;
    }
    trail += "; ";
  }
  out << std::setprecision(6);
  write_file_atomic(std::filesystem::path(a.out) / "hermite.csv", csv);
  return detail::finish_checks({{"relu c0, c1, c2 within 1e-10", err <= 1e-10, "max error " + detail::fixed(err, 3)},
                                {"tanh even coefficients below 1e-10", even <= 1e-10, "max " + detail::fixed(even, 3)},
                                {"c_star non-increasing in p", monotone, trail}},
                               out);
}

inline int diagnose_concentration_cmd(const DiagnoseArgs& a, std::ostream& out) {
  const auto ds = detail::parse_int_list(a.d_list.empty() ? "16,32,64" : a.d_list);
  const auto rows = diagnose_concentration(
      [&](int d) {
        return MixtureSpec::uniform({preset_source(SourcePreset::isotropic, d, 0.0, SeedPath{a.seed, {}})});
      },
      [](int d) { return d; }, ds, SeedPath{a.seed, {1}}, a.contexts, a.m_calib);
  std::string csv = "d,t_hat,t_own,mean_ratio,cov_ratio,contexts\n";
  out << "    d        t_hat        t_own   mean ||h||^2/t_hat   CoV\n";
  bool monotone = true, agree = true;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    out << std::setw(5) << r.d << std::setw(13) << detail::fixed(r.t_hat) << std::setw(13) << detail::fixed(r.t_own)
        << std::setw(21) << detail::fixed(r.mean_ratio) << std::setw(10) << detail::fixed(r.cov_ratio) << '\n';
    csv += std::to_string(r.d) + ',' + format_double(r.t_hat) + ',' + format_double(r.t_own) + ',' +
           format_double(r.mean_ratio) + ',' + format_double(r.cov_ratio) + ',' + std::to_string(r.contexts) + '\n';
    if (i > 0 && !(r.cov_ratio < rows[i - 1].cov_ratio)) monotone = false;
    if (std::abs(r.t_own - r.t_hat) > 0.1 * r.t_hat) agree = false;
  }
  write_file_atomic(std::filesystem::path(a.out) / "concentration.csv", csv);
  const auto& last = rows.back();
  return detail::finish_checks(
      {{"coefficient of variation decreasing in d", monotone, "over d = " + a.d_list},
       {"mean ratio at largest d in [0.9, 1.1]", last.mean_ratio >= 0.9 && last.mean_ratio <= 1.1,
        detail::fixed(last.mean_ratio)},
       {"calibrated and in-sample trace within 10%", agree, "all d"}},
      out);
}

inline int diagnose_spike_cmd(const DiagnoseArgs& a, std::ostream& out) {
  const auto ds = detail::parse_int_list(a.d_list.empty() ? "16,64" : a.d_list);
  const Activation act = Activation::from_name(a.activation);
  const auto rows = diagnose_gradient_spike(
      act,
      [&](int d) {
        const ExperimentConfig c = preset("fig1a", d);
        return build_mixture(resolve_grid_point(c, 3, std::nullopt), a.seed);
      },
      [](int d) { return SpikeSizes{d, d * d / 2, d * d / 2}; }, ds, SeedPath{a.seed, {2}}, a.m_calib);
  std::string csv = "d,k,n,alpha,spike_norm,residual_norm,ratio\n";
  out << "alpha = E[sigma'(z)] = " << detail::fixed(rows.front().alpha, 12) << '\n';
  out << "    d      k      n    ||u v^T||   ||G - u v^T||     ratio\n";
  bool below_one = true;
  for (const auto& r : rows) {
    out << std::setw(5) << r.d << std::setw(7) << r.k << std::setw(7) << r.n << std::setw(13)
        << detail::fixed(r.spike_norm) << std::setw(16) << detail::fixed(r.residual_norm) << std::setw(10)
        << detail::fixed(r.ratio) << '\n';
    csv += std::to_string(r.d) + ',' + std::to_string(r.k) + ',' + std::to_string(r.n) + ',' + format_double(r.alpha) +
           ',' + format_double(r.spike_norm) + ',' + format_double(r.residual_norm) + ',' + format_double(r.ratio) + '\n';
    if (r.d >= 32 && !(r.ratio < 1.0)) below_one = false;
  }
  write_file_atomic(std::filesystem::path(a.out) / "gradient_spike.csv", csv);
  std::vector<detail::Check> checks{{"ratio at largest d below ratio at smallest d",
                                     rows.size() < 2 || rows.back().ratio < rows.front().ratio,
                                     detail::fixed(rows.front().ratio) + " -> " + detail::fixed(rows.back().ratio)},
                                    {"ratio below 1 for d >= 32", below_one, "spike dominates"}};
  return detail::finish_checks(checks, out);
}

inline int cmd_diagnose(const DiagnoseArgs& a, std::ostream& out) {
  if (a.kind == "hermite") return diagnose_hermite(a, out);
  if (a.kind == "concentration") return diagnose_concentration_cmd(a, out);
  if (a.kind == "gradient-spike") return diagnose_spike_cmd(a, out);
  throw ArgumentError("unknown diagnostic '" + a.kind + "'; expected concentration, gradient-spike or hermite");
}

// ---------------------------------------------------------------------------
// ingest
// ---------------------------------------------------------------------------

struct IngestArgs {
  std::string csv;
  std::string out = "store";
  IngestOptions opt;
};

inline int cmd_ingest(const IngestArgs& a, std::ostream& out, std::ostream& err) {
  const RawDataset raw = load_csv(a.csv);
  IngestSummary summary;
  const ContextStore store = ingest_dataset(raw, a.opt, &summary);
  for (const auto& w : summary.warnings) err << "warning: " << w << '\n';
  save_store(store, summary, a.opt, a.out);
  out << "read " << raw.size() << " rows, E = " << raw.dim() << "; PCA to d = " << a.opt.dim << " keeps "
      << detail::fixed(100.0 * summary.explained_variance, 4) << "% of variance\n";
  for (std::size_t s = 0; s < summary.source_labels.size(); ++s)
    out << "  source " << s << " (" << summary.source_labels[s] << "): " << summary.rows[s] << " rows, "
        << summary.train_contexts[s] << " train / " << summary.test_contexts[s] << " test contexts\n";
  out << "wrote " << a.out << '\n';
  return kOk;
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"iclmix: in-context learning with data mixtures, simulation harness"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every command");

  RunArgs run;
  auto* r = app.add_subcommand("run", "Run a preset or config sweep; writes results.csv and metadata.json");
  r->add_option("config", run.config, "Experiment config (JSON)");
  r->add_option("--preset", run.preset, "Figure preset: fig1a fig1b fig1c fig2a fig2b fig2c fig3a fig3b");
  r->add_option("--d", run.d, "Input dimension (preset default 32; overrides config d)");
  r->add_option("--out", run.out, "Output directory")->capture_default_str();
  r->add_option("--mc-runs", run.mc_runs, "Override Monte-Carlo runs (default: config, 20 for presets)");
  r->add_option("--threads", run.threads, "Worker threads (default: $ICLMIX_THREADS or 1)");
  r->add_option("--seed", run.seed, "Override master seed (default: config, 0 for presets)");
  r->add_option("--models", run.models, "Comma-separated subset of linear,mlp,surrogate");
  r->add_option("--n-test", run.n_test, "Override test contexts per source (default 2000)");
  r->add_option("--memory-cap-gb", run.memory_cap_gb, "Override memory cap in GiB (default 4)");
  r->add_flag("--print-config", run.print_config, "Print the resolved config as JSON and exit");
  r->add_flag("--quiet", run.quiet, "No progress output");

  PlotArgs plot;
  auto* p = app.add_subcommand("plot", "Render a results CSV to SVG");
  p->add_option("csv", plot.csv, "results.csv")->required();
  p->add_option("--out", plot.out, "SVG path (default: CSV path with .svg)");
  p->add_option("--x", plot.spec.x, "x column")->capture_default_str();
  p->add_option("--y", plot.spec.y, "y column")->capture_default_str();
  p->add_option("--series", plot.spec.series, "Series column")->capture_default_str();
  p->add_option("--error", plot.spec.error, "Error-bar column, empty for none")->capture_default_str();
  p->add_option("--source", plot.spec.source, "Source rows to plot, empty for all")->capture_default_str();
  p->add_option("--x-scale", plot.x_scale, "linear or log")->capture_default_str();
  p->add_option("--y-scale", plot.y_scale, "linear or log")->capture_default_str();
  p->add_option("--title", plot.spec.title, "Chart title");

  DiagnoseArgs diag;
  auto* g = app.add_subcommand("diagnose", "Run a diagnostic; exits 1 if a check fails");
  g->add_option("kind", diag.kind, "concentration, gradient-spike or hermite")->required();
  g->add_option("--d", diag.d_list, "Comma-separated d list (default 16,32,64; gradient-spike 16,64)");
  g->add_option("--out", diag.out, "Report directory")->capture_default_str();
  g->add_option("--seed", diag.seed, "Master seed")->capture_default_str();
  g->add_option("--activation", diag.activation, "MLP activation for gradient-spike")->capture_default_str();
  g->add_option("--contexts", diag.contexts, "Contexts per d for concentration")->capture_default_str();
  g->add_option("--m-calib", diag.m_calib, "Contexts for trace calibration")->capture_default_str();
  g->add_option("--nodes", diag.nodes, "Quadrature nodes for hermite")->capture_default_str();

  IngestArgs ing;
  auto* i = app.add_subcommand("ingest", "Turn an embedding CSV (source,rating,e1..eE) into a context store");
  i->add_option("csv", ing.csv, "Input CSV")->required();
  i->add_option("--dim", ing.opt.dim, "PCA target dimension d")->capture_default_str();
  i->add_option("--ell", ing.opt.ell, "Context length")->capture_default_str();
  i->add_option("--scale-lo", ing.opt.scale_lo, "Lowest rating")->capture_default_str();
  i->add_option("--scale-hi", ing.opt.scale_hi, "Highest rating")->capture_default_str();
  i->add_option("--split", ing.opt.split, "Training fraction of each source's rows")->capture_default_str();
  i->add_option("--seed", ing.opt.seed, "Shuffle seed")->capture_default_str();
  i->add_flag("--standardize", ing.opt.standardize, "Per-feature standardization instead of norm sqrt(d)");
  i->add_option("--out", ing.out, "Store directory")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::Error& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (r->parsed()) return cmd_run(run, out, err);
    if (p->parsed()) return cmd_plot(plot, out, err);
    if (g->parsed()) return cmd_diagnose(diag, out);
    if (i->parsed()) return cmd_ingest(ing, out, err);
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ResourceError& e) {
    err << "error: " << e.what() << '\n';
    return kResource;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumerical;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kResource;
  }
  return kUsage;
}

}  // namespace iclmix
