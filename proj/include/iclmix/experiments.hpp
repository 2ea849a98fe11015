#pragma once

// Declarative experiment configs, figure presets, and the Monte-Carlo sweep
// engine. Every (grid point, run) task is seeded from the grid values and the
// run index only, so results do not depend on sweep order or thread count.

#include <algorithm>
#include <atomic>
#include <bit>
#include <cctype>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "iclmix/attention.hpp"
#include "iclmix/datagen.hpp"
#include "iclmix/errors.hpp"
#include "iclmix/eval.hpp"
#include "iclmix/hermite.hpp"
#include "iclmix/ingest.hpp"
#include "iclmix/io.hpp"
#include "iclmix/mlp.hpp"
#include "iclmix/numerics.hpp"
#include "iclmix/surrogate.hpp"

namespace iclmix {

using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Dimension expressions: numbers, d, + - * / ^ and parentheses.
// ---------------------------------------------------------------------------

namespace detail {

class ExprParser {
 public:
  ExprParser(std::string_view text, double d) : s_(text), d_(d) {}

  double parse() {
    const double v = expr();
    skip();
    if (pos_ != s_.size()) fail("unexpected '" + std::string(1, s_[pos_]) + "'");
    return v;
  }

 private:
  std::string_view s_;
  std::size_t pos_ = 0;
  double d_;

  [[noreturn]] void fail(const std::string& why) const {
    throw ArgumentError("expression '" + std::string(s_) + "': " + why);
  }
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool eat(char c) {
    skip();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  double expr() {
    double v = term();
    for (;;) {
      if (eat('+')) v += term();
      else if (eat('-')) v -= term();
      else return v;
    }
  }
  double term() {
    double v = power();
    for (;;) {
      if (eat('*')) v *= power();
      else if (eat('/')) {
        const double r = power();
        if (r == 0.0) fail("division by zero");
        v /= r;
      } else {
        return v;
      }
    }
  }
  double power() {
    const double base = unary();
    if (eat('^')) return std::pow(base, power());
    return base;
  }
  double unary() {
    if (eat('-')) return -unary();
    if (eat('+')) return unary();
    return primary();
  }
  double primary() {
    skip();
    if (eat('(')) {
      const double v = expr();
      if (!eat(')')) fail("missing ')'");
      return v;
    }
    if (pos_ < s_.size() && s_[pos_] == 'd') {
      ++pos_;
      return d_;
    }
    const char* begin = s_.data() + pos_;
    const char* end = s_.data() + s_.size();
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(begin, end, v);
    if (ec != std::errc() || ptr == begin) fail(pos_ < s_.size() ? "bad token" : "unexpected end");
    pos_ += static_cast<std::size_t>(ptr - begin);
    return v;
  }
};

}  // namespace detail

/// A number, or an arithmetic expression in d kept verbatim.
class DimExpr {
 public:
  DimExpr() = default;
  DimExpr(double v) : value_(v) {}  // NOLINT(google-explicit-constructor)
  DimExpr(const char* text) : DimExpr(std::string(text)) {}  // NOLINT
  DimExpr(std::string text) : text_(std::move(text)), literal_(false) {  // NOLINT
    detail::ExprParser(text_, 16.0).parse();
  }

  double eval(int d) const {
    const double v = literal_ ? value_ : detail::ExprParser(text_, static_cast<double>(d)).parse();
    if (!std::isfinite(v)) throw ArgumentError("expression '" + str() + "' is not finite at d = " + std::to_string(d));
    return v;
  }

  std::string str() const { return literal_ ? format_double(value_) : text_; }
  ojson to_json() const { return literal_ ? ojson(value_) : ojson(text_); }

  static DimExpr from_json(const nlohmann::json& j) {
    if (j.is_number()) return DimExpr(j.get<double>());
    if (j.is_string()) return DimExpr(j.get<std::string>());
    throw ArgumentError("expected a number or an expression string, got " + j.dump());
  }

 private:
  std::string text_;
  double value_ = 0.0;
  bool literal_ = true;
};

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

struct SourceConfig {
  DimExpr theta_x{0.0};   // spike strength of Sigma_x
  DimExpr theta_xi{0.0};  // spike strength of Sigma_xi
  double noise = 0.01;
  std::string target = "relu";
};

struct SweepAxis {
  std::string variable;
  std::vector<DimExpr> values;
};

inline const std::vector<std::string>& sweep_variables() {
  static const std::vector<std::string> v{"n", "ell", "k", "rho", "theta_x", "theta_xi", "delta1", "eta"};
  return v;
}

inline const std::vector<std::string>& model_names() {
  static const std::vector<std::string> v{"linear", "mlp", "surrogate"};
  return v;
}

struct ExperimentConfig {
  std::string name = "custom";
  int d = 32;
  DimExpr ell{"d"};
  DimExpr n{"0.5*d^2"};
  DimExpr k{"0.5*d^2"};
  double lambda = 5e-5;
  DimExpr eta{"d^2"};
  std::string activation = "relu";
  int surrogate_degree = 4;
  std::vector<SourceConfig> sources;
  std::vector<double> train_probs;  // empty: uniform
  SweepAxis sweep;
  std::optional<SweepAxis> series;  // second axis, folded into the model label
  std::vector<std::string> models{"linear", "mlp", "surrogate"};
  int mc_runs = 20;
  std::uint64_t master_seed = 0;
  int n_test = 2000;  // per source
  int m_calib = 512;
  bool independent_surrogate_f = false;
  double memory_cap_gb = 4.0;
  std::string data_store;  // ingested context store directory; empty: synthetic

  bool uses_store() const { return !data_store.empty(); }
  bool wants(std::string_view model) const {
    return std::find(models.begin(), models.end(), model) != models.end();
  }
};

inline ojson config_to_json(const ExperimentConfig& c) {
  ojson j;
  j["name"] = c.name;
  j["d"] = c.d;
  j["ell"] = c.ell.to_json();
  j["n"] = c.n.to_json();
  j["k"] = c.k.to_json();
  j["lambda"] = c.lambda;
  j["eta"] = c.eta.to_json();
  j["activation"] = c.activation;
  j["surrogate_degree"] = c.surrogate_degree;
  j["sources"] = ojson::array();
  for (const auto& s : c.sources) {
    ojson o;
    o["theta_x"] = s.theta_x.to_json();
    o["theta_xi"] = s.theta_xi.to_json();
    o["noise"] = s.noise;
    o["target"] = s.target;
    j["sources"].push_back(o);
  }
  j["train_probs"] = c.train_probs;
  auto axis = [](const SweepAxis& a) {
    ojson o;
    o["variable"] = a.variable;
    o["values"] = ojson::array();
    for (const auto& v : a.values) o["values"].push_back(v.to_json());
    return o;
  };
  j["sweep"] = axis(c.sweep);
  j["series"] = c.series ? axis(*c.series) : ojson(nullptr);
  j["models"] = c.models;
  j["mc_runs"] = c.mc_runs;
  j["master_seed"] = c.master_seed;
  j["n_test"] = c.n_test;
  j["m_calib"] = c.m_calib;
  j["independent_surrogate_f"] = c.independent_surrogate_f;
  j["memory_cap_gb"] = c.memory_cap_gb;
  j["data_store"] = c.data_store;
  return j;
}

inline std::string config_to_string(const ExperimentConfig& c) { return config_to_json(c).dump(2) + "\n"; }

namespace detail {

inline void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed,
                       std::string_view where) {
  if (!j.is_object()) throw ArgumentError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
      throw ArgumentError(std::string(where) + ": unknown key '" + key + "'");
  }
}

inline SweepAxis axis_from_json(const nlohmann::json& j, std::string_view where) {
  check_keys(j, {"variable", "values"}, where);
  SweepAxis a;
  a.variable = j.at("variable").get<std::string>();
  for (const auto& v : j.at("values")) a.values.push_back(DimExpr::from_json(v));
  return a;
}

}  // namespace detail

inline void validate_config(const ExperimentConfig& c);

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    detail::check_keys(j,
                       {"name", "d", "ell", "n", "k", "lambda", "eta", "activation", "surrogate_degree",
                        "sources", "train_probs", "sweep", "series", "models", "mc_runs", "master_seed",
                        "n_test", "m_calib", "independent_surrogate_f", "memory_cap_gb", "data_store"},
                       "config");
    if (j.contains("name")) c.name = j["name"].get<std::string>();
    if (j.contains("d")) c.d = j["d"].get<int>();
    if (j.contains("ell")) c.ell = DimExpr::from_json(j["ell"]);
    if (j.contains("n")) c.n = DimExpr::from_json(j["n"]);
    if (j.contains("k")) c.k = DimExpr::from_json(j["k"]);
    if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
    if (j.contains("eta")) c.eta = DimExpr::from_json(j["eta"]);
    if (j.contains("activation")) c.activation = j["activation"].get<std::string>();
    if (j.contains("surrogate_degree")) c.surrogate_degree = j["surrogate_degree"].get<int>();
    if (j.contains("sources")) {
      for (const auto& s : j["sources"]) {
        detail::check_keys(s, {"theta_x", "theta_xi", "noise", "target"}, "source");
        SourceConfig sc;
        if (s.contains("theta_x")) sc.theta_x = DimExpr::from_json(s["theta_x"]);
        if (s.contains("theta_xi")) sc.theta_xi = DimExpr::from_json(s["theta_xi"]);
        if (s.contains("noise")) sc.noise = s["noise"].get<double>();
        if (s.contains("target")) sc.target = s["target"].get<std::string>();
        c.sources.push_back(sc);
      }
    }
    if (j.contains("train_probs")) c.train_probs = j["train_probs"].get<std::vector<double>>();
    if (j.contains("sweep")) c.sweep = detail::axis_from_json(j["sweep"], "sweep");
    if (j.contains("series") && !j["series"].is_null()) c.series = detail::axis_from_json(j["series"], "series");
    if (j.contains("models")) c.models = j["models"].get<std::vector<std::string>>();
    if (j.contains("mc_runs")) c.mc_runs = j["mc_runs"].get<int>();
    if (j.contains("master_seed")) c.master_seed = j["master_seed"].get<std::uint64_t>();
    if (j.contains("n_test")) c.n_test = j["n_test"].get<int>();
    if (j.contains("m_calib")) c.m_calib = j["m_calib"].get<int>();
    if (j.contains("independent_surrogate_f"))
      c.independent_surrogate_f = j["independent_surrogate_f"].get<bool>();
    if (j.contains("memory_cap_gb")) c.memory_cap_gb = j["memory_cap_gb"].get<double>();
    if (j.contains("data_store")) c.data_store = j["data_store"].get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  validate_config(c);
  return c;
}

inline ExperimentConfig parse_config(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("config: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ArgumentError("cannot open config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

// ---------------------------------------------------------------------------
// Grid resolution
// ---------------------------------------------------------------------------

struct ResolvedSource {
  double theta_x = 0.0;
  double theta_xi = 0.0;
  double noise = 0.01;
  std::string target = "relu";
};

/// Everything one (grid point, run) task needs, as plain numbers.
struct GridPoint {
  double sweep_value = 0.0;
  std::optional<double> series_value;
  int d = 0, ell = 0, n = 0, k = 0;
  double eta = 0.0;
  std::vector<ResolvedSource> sources;
  std::vector<double> train_probs;
};

namespace detail {

inline int resolve_count(const DimExpr& e, int d, std::string_view what) {
  const double v = e.eval(d);
  const double r = std::round(v);
  if (!(r >= 1.0) || r > 1e9)
    throw ArgumentError(std::string(what) + " = " + e.str() + " resolves to " + format_double(v) +
                        " at d = " + std::to_string(d) + "; must be a positive integer");
  return static_cast<int>(r);
}

/// Applies one axis value; returns the resolved value reported in the CSV.
inline double apply_axis(GridPoint& g, const std::string& var, const DimExpr& value) {
  const int d = g.d;
  if (var == "n") return g.n = resolve_count(value, d, "n");
  if (var == "ell") return g.ell = resolve_count(value, d, "ell");
  if (var == "k") return g.k = resolve_count(value, d, "k");
  const double v = value.eval(d);
  if (var == "rho") {
    if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("rho must lie in [0, 1]");
    g.train_probs = {1.0 - v, v};
    return v;
  }
  if (var == "eta") {
    if (!(v >= 0.0)) throw ArgumentError("eta must be non-negative");
    return g.eta = v;
  }
  if (g.sources.size() < 2) throw ArgumentError(var + " sweeps need at least two sources");
  if (var == "theta_x" || var == "theta_xi") {
    if (!(v >= 0.0)) throw ArgumentError(var + " must be non-negative");
    (var == "theta_x" ? g.sources[1].theta_x : g.sources[1].theta_xi) = v;
    return v;
  }
  if (var == "delta1") {
    if (!(v >= 0.0)) throw ArgumentError("delta1 must be non-negative");
    return g.sources[1].noise = v;
  }
  throw ArgumentError("unknown sweep variable '" + var + "'");
}

}  // namespace detail

/// Base values with `sweep.values[i]` and (optionally) `series.values[j]`
/// applied. With a data store, d and ell come from the store.
inline GridPoint resolve_grid_point(const ExperimentConfig& c, std::size_t i, std::optional<std::size_t> j,
                                    const ContextStore* store = nullptr) {
  GridPoint g;
  g.d = store ? store->d : c.d;
  g.ell = store ? store->ell : detail::resolve_count(c.ell, g.d, "ell");
  g.n = detail::resolve_count(c.n, g.d, "n");
  g.k = detail::resolve_count(c.k, g.d, "k");
  g.eta = c.eta.eval(g.d);
  if (!(g.eta >= 0.0)) throw ArgumentError("eta must be non-negative");
  for (const auto& s : c.sources)
    g.sources.push_back(ResolvedSource{s.theta_x.eval(g.d), s.theta_xi.eval(g.d), s.noise, s.target});
  const std::size_t num_sources = store ? store->num_sources() : c.sources.size();
  g.train_probs = c.train_probs.empty()
                      ? std::vector<double>(num_sources, 1.0 / static_cast<double>(num_sources))
                      : c.train_probs;
  g.sweep_value = detail::apply_axis(g, c.sweep.variable, c.sweep.values.at(i));
  if (j) g.series_value = detail::apply_axis(g, c.series->variable, c.series->values.at(*j));
  for (const auto& s : g.sources)
    if (s.theta_x < 0.0 || s.theta_xi < 0.0) throw ArgumentError("spike strengths must be non-negative");
  return g;
}

inline void validate_config(const ExperimentConfig& c) {
  if (c.d < 1) throw ArgumentError("d must be positive");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ArgumentError("lambda must be >= 0");
  Activation::from_name(c.activation);
  if (c.surrogate_degree < 1 || c.surrogate_degree > 16) throw ArgumentError("surrogate_degree must be in 1..16");
  if (c.mc_runs < 1) throw ArgumentError("mc_runs must be positive");
  if (c.n_test < 1) throw ArgumentError("n_test must be positive");
  if (c.m_calib < 16) throw ArgumentError("m_calib must be >= 16");
  if (!(c.memory_cap_gb > 0.0)) throw ArgumentError("memory_cap_gb must be positive");
  if (c.models.empty()) throw ArgumentError("models must name at least one of linear, mlp, surrogate");
  std::set<std::string> seen;
  for (const auto& m : c.models) {
    if (std::find(model_names().begin(), model_names().end(), m) == model_names().end())
      throw ArgumentError("unknown model '" + m + "'");
    if (!seen.insert(m).second) throw ArgumentError("model '" + m + "' listed twice");
  }
  auto check_axis = [&](const SweepAxis& a, std::string_view which) {
    if (std::find(sweep_variables().begin(), sweep_variables().end(), a.variable) == sweep_variables().end())
      throw ArgumentError(std::string(which) + " variable '" + a.variable + "' is not one of n, ell, k, rho, "
                          "theta_x, theta_xi, delta1, eta");
    if (a.values.empty()) throw ArgumentError(std::string(which) + " has no values");
  };
  check_axis(c.sweep, "sweep");
  if (c.series) {
    check_axis(*c.series, "series");
    if (c.series->variable == c.sweep.variable) throw ArgumentError("series and sweep use the same variable");
  }
  if (c.uses_store()) {
    for (const auto* a : {&c.sweep, c.series ? &*c.series : nullptr}) {
      if (a && a->variable != "n" && a->variable != "k" && a->variable != "rho" && a->variable != "eta")
        throw ArgumentError("with a data store only n, k, rho and eta can be swept");
    }
    return;
  }
  if (c.sources.empty()) throw ArgumentError("config needs at least one source");
  for (const auto& s : c.sources) {
    Activation::from_name(s.target);
    if (!(s.noise >= 0.0)) throw ArgumentError("source noise must be non-negative");
  }
  if (!c.train_probs.empty() && c.train_probs.size() != c.sources.size())
    throw ArgumentError("train_probs length must equal the number of sources");
  auto uses = [&](const char* v) { return c.sweep.variable == v || (c.series && c.series->variable == v); };
  if (uses("rho") && c.sources.size() != 2) throw ArgumentError("rho sweeps need exactly two sources");
  // Resolve every grid point once so bad expressions fail before any work.
  const std::size_t ns = c.series ? c.series->values.size() : 1;
  for (std::size_t i = 0; i < c.sweep.values.size(); ++i) {
    for (std::size_t j = 0; j < ns; ++j) {
      const GridPoint g = resolve_grid_point(c, i, c.series ? std::optional<std::size_t>(j) : std::nullopt);
      double total = 0.0;
      for (double p : g.train_probs) {
        if (!(p >= 0.0)) throw ArgumentError("train_probs must be non-negative");
        total += p;
      }
      if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("train_probs must sum to 1");
    }
  }
}

/// Spike directions are fixed per experiment: gamma for source s, input (0)
/// or task (1), comes from (master_seed, tag, s, which).
inline MixtureSpec build_mixture(const GridPoint& g, std::uint64_t master_seed) {
  constexpr std::uint64_t kGammaTag = 0x67616d6d61ULL;
  std::vector<SourceSpec> sources;
  for (std::size_t s = 0; s < g.sources.size(); ++s) {
    const auto& rs = g.sources[s];
    SourceSpec spec = preset_source(SourcePreset::isotropic, g.d, 0.0, SeedPath{master_seed, {}});
    const SeedPath base{master_seed, {kGammaTag, static_cast<std::uint64_t>(s)}};
    if (rs.theta_x > 0.0) spec.cov_x = spiked(g.d, rs.theta_x, Rng(base.child(0)).unit_vector(g.d));
    if (rs.theta_xi > 0.0) spec.cov_xi = spiked(g.d, rs.theta_xi, Rng(base.child(1)).unit_vector(g.d));
    spec.noise_std = rs.noise;
    spec.target = Activation::from_name(rs.target);
    sources.push_back(std::move(spec));
  }
  MixtureSpec mix;
  mix.sources = std::move(sources);
  mix.train_probs = g.train_probs;
  return mix;
}

/// Seed of one task: (master, hash of the grid values, run).
inline SeedPath grid_seed(std::uint64_t master, const GridPoint& g, int run) {
  std::uint64_t key = splitmix64(std::bit_cast<std::uint64_t>(g.sweep_value));
  if (g.series_value) key = splitmix64(key ^ std::bit_cast<std::uint64_t>(*g.series_value));
  return SeedPath{master, {key, static_cast<std::uint64_t>(run)}};
}

/// Child indices of a task seed.
enum class Stage : std::uint64_t {
  calib = 0,
  init = 1,
  stage1 = 2,
  stage2 = 3,
  test = 4,
  surrogate_train = 5,
  surrogate_predict = 6,
  surrogate_init = 7,
  store_queue = 8,
};

inline SeedPath stage_seed(const SeedPath& task, Stage s) { return task.child(static_cast<std::uint64_t>(s)); }

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

inline const std::vector<std::string>& preset_names() {
  static const std::vector<std::string> v{"fig1a", "fig1b", "fig1c", "fig2a", "fig2b", "fig2c", "fig3a", "fig3b"};
  return v;
}

inline ExperimentConfig preset(std::string_view name, int d) {
  if (d < 8) throw ArgumentError("preset: d must be >= 8");
  ExperimentConfig c;
  c.name = std::string(name);
  c.d = d;
  c.ell = "d";
  c.n = "0.5*d^2";
  c.k = "0.5*d^2";
  c.lambda = 5e-5;
  c.eta = "d^2";
  c.activation = "relu";
  c.mc_runs = 20;
  const std::vector<std::string> ratios{"0.0625*d^2", "0.125*d^2", "0.25*d^2", "0.5*d^2",
                                        "d^2",        "2*d^2",     "4*d^2"};
  auto axis = [](std::string var, std::vector<DimExpr> vals) { return SweepAxis{std::move(var), std::move(vals)}; };
  std::vector<DimExpr> rhos;
  for (int i = 0; i <= 10; ++i) rhos.emplace_back(i / 10.0);
  const std::vector<DimExpr> etas{0.0, "0.25*d^2", "d^2", "4*d^2"};

  if (name == "fig1a" || name == "fig1b" || name == "fig1c") {
    c.surrogate_degree = 4;
    c.sources = {SourceConfig{}, SourceConfig{0.0, "d^2", 0.01, "relu"}};
    c.train_probs = {0.5, 0.5};
    c.models = {"linear", "mlp", "surrogate"};
    if (name == "fig1a") c.sweep = axis("n", {ratios.begin(), ratios.end()});
    if (name == "fig1b") c.sweep = axis("ell", {"0.25*d", "0.5*d", "d", "2*d", "4*d", "8*d"});
    if (name == "fig1c") c.sweep = axis("k", {ratios.begin(), ratios.end()});
    return c;
  }
  c.surrogate_degree = 5;
  c.models = {"mlp", "surrogate"};
  c.sources = {SourceConfig{}, SourceConfig{}};
  c.train_probs = {0.5, 0.5};
  c.sweep = axis("rho", rhos);
  if (name == "fig2a") {
    c.series = axis("theta_x", {0.0, "d^0.25-1", "d^0.5-1"});
  } else if (name == "fig2b") {
    c.series = axis("theta_xi", {0.0, "d", "d^2"});
  } else if (name == "fig2c") {
    c.sources[0].noise = 0.2;
    c.series = axis("delta1", {0.01, 0.2, 0.5});
  } else if (name == "fig3a") {
    c.sources[1].theta_x = "d^0.25-1";
    c.series = axis("eta", etas);
  } else if (name == "fig3b") {
    c.sources[1].theta_xi = "d^2-1";
    c.series = axis("eta", etas);
  } else {
    throw ArgumentError("unknown preset '" + std::string(name) + "'; expected one of fig1a, fig1b, fig1c, "
                        "fig2a, fig2b, fig2c, fig3a, fig3b");
  }
  return c;
}

// ---------------------------------------------------------------------------
// Results
// ---------------------------------------------------------------------------

struct SweepRow {
  double sweep_value = 0.0;
  std::string model;
  std::string source;  // source id or "overall"
  double mean_error = 0.0;
  double std = 0.0;
  int runs = 0;
};

struct SweepResult {
  std::vector<SweepRow> rows;

  std::string to_csv() const {
    std::string out = "sweep_value,model,source,mean_error,std,runs\n";
    for (const auto& r : rows) {
      out += format_double(r.sweep_value) + ',' + csv_field(r.model) + ',' + r.source + ',' +
             format_double(r.mean_error) + ',' + format_double(r.std) + ',' + std::to_string(r.runs) + '\n';
    }
    return out;
  }
};

/// Per-run errors of one task: errors[model][source], overall last.
struct TaskResult {
  std::vector<std::vector<double>> errors;
  double t_hat = 0.0;
};

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

/// Rough peak bytes of one task.
inline double estimate_task_bytes(const ExperimentConfig& c, const GridPoint& g, std::size_t num_sources) {
  const double d = g.d, ell = g.ell, n = g.n, k = g.k;
  const double dim = d * (d + 1);
  const double ctx = (ell + 1) * (d + 1);
  double doubles = 2.0 * n * ctx + static_cast<double>(num_sources) * c.n_test * ctx + c.m_calib * ctx;
  const bool heads = c.wants("mlp") || c.wants("surrogate");
  if (heads) {
    doubles += 3.0 * k * dim + 3.0 * k * n + std::pow(std::min(n, k), 2) + 2.0 * k * c.n_test +
               2.0 * kContextBlock * dim + k * kContextBlock;
    if (c.independent_surrogate_f && c.wants("surrogate")) doubles += 2.0 * k * dim;
  }
  if (c.wants("linear")) doubles += std::pow(std::min(n, dim), 2) + kContextBlock * dim + (dim <= n ? 0.0 : n * dim);
  return 8.0 * doubles;
}

struct RunOptions {
  int threads = 1;
  std::function<void(std::size_t done, std::size_t total)> progress;
  const ContextStore* store = nullptr;  // overrides cfg.data_store when set
};

namespace detail {

/// Draws `count` training contexts: source by categorical(rho), then the next
/// unused context of that source.
inline std::vector<Context> draw_from_store(const std::vector<std::vector<const Context*>>& pools,
                                            std::vector<std::size_t>& cursor, const std::vector<double>& probs,
                                            int count, Rng& rng) {
  std::vector<Context> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) {
    const std::size_t s = draw_categorical(probs, rng);
    if (cursor[s] >= pools[s].size())
      throw ArgumentError("data store has too few training contexts for source " + std::to_string(s) + " (" +
                          std::to_string(pools[s].size()) + ")");
    out.push_back(*pools[s][cursor[s]++]);
  }
  return out;
}

}  // namespace detail

/// Trains the requested models for one (grid point, run) and evaluates them.
inline TaskResult run_task(const ExperimentConfig& c, const GridPoint& g, int run, const ContextStore* store) {
  const SeedPath task = grid_seed(c.master_seed, g, run);
  const Activation act = Activation::from_name(c.activation);
  const std::size_t num_sources = store ? store->num_sources() : g.sources.size();

  std::vector<Context> calib, stage1, stage2;
  std::vector<std::vector<Context>> tests;
  if (store) {
    std::vector<std::vector<const Context*>> pools(num_sources);
    for (const auto& ctx : store->train) pools[ctx.source_id].push_back(&ctx);
    for (std::size_t s = 0; s < num_sources; ++s) {
      Rng rng(stage_seed(task, Stage::store_queue).child(s));
      auto& p = pools[s];
      for (std::size_t i = p.size(); i > 1; --i) std::swap(p[i - 1], p[rng.below(i)]);
    }
    std::vector<std::size_t> cursor(num_sources, 0);
    {
      Rng rng(stage_seed(task, Stage::calib));
      for (int m = 0; m < c.m_calib; ++m) {
        const std::size_t s = detail::draw_categorical(g.train_probs, rng);
        if (pools[s].empty()) throw ArgumentError("data store has no training contexts for source " + std::to_string(s));
        calib.push_back(*pools[s][rng.below(pools[s].size())]);
      }
    }
    Rng r1(stage_seed(task, Stage::stage1));
    stage1 = detail::draw_from_store(pools, cursor, g.train_probs, g.n, r1);
    Rng r2(stage_seed(task, Stage::stage2));
    stage2 = detail::draw_from_store(pools, cursor, g.train_probs, g.n, r2);
    tests = store->by_source(store->test);
    for (std::size_t s = 0; s < tests.size(); ++s)
      if (tests[s].empty()) throw ArgumentError("data store has no test contexts for source " + std::to_string(s));
  } else {
    const MixtureSpec mix = build_mixture(g, c.master_seed);
    mix.validate();
    if (c.wants("mlp") || c.wants("surrogate")) calib = sample_batch(mix, g.ell, c.m_calib, stage_seed(task, Stage::calib));
    stage1 = sample_batch(mix, g.ell, g.n, stage_seed(task, Stage::stage1));
    stage2 = sample_batch(mix, g.ell, g.n, stage_seed(task, Stage::stage2));
    tests = sample_test_sets(mix, g.ell, c.n_test, stage_seed(task, Stage::test));
  }

  TaskResult result;
  auto record = [&](std::vector<double> per_source) {
    double acc = 0.0;
    for (double e : per_source) acc += e;
    per_source.push_back(acc / static_cast<double>(num_sources));
    result.errors.push_back(std::move(per_source));
  };
  auto mse = [](const std::vector<Context>& ctxs, const Vector& pred) {
    double acc = 0.0;
    for (std::size_t j = 0; j < ctxs.size(); ++j) {
      const double e = ctxs[j].query_label() - pred(static_cast<Eigen::Index>(j));
      acc += e * e;
    }
    if (!std::isfinite(acc)) throw NumericalError("non-finite test error");
    return acc / static_cast<double>(ctxs.size());
  };
  const Vector y2 = query_labels(stage2);

  std::shared_ptr<const Matrix> f_hat;
  if (c.wants("mlp") || c.wants("surrogate")) {
    result.t_hat = calibrate_trace(calib);
    calib.clear();
    calib.shrink_to_fit();
    const MlpInit init = initialize_mlp(g.k, feature_dim(g.d), result.t_hat, stage_seed(task, Stage::init));
    f_hat = std::make_shared<const Matrix>(one_gradient_step(init, stage1, act, g.eta));
  }
  std::shared_ptr<const Matrix> f_sur = f_hat;
  if (c.wants("surrogate") && c.independent_surrogate_f) {
    const MlpInit init = initialize_mlp(g.k, feature_dim(g.d), result.t_hat, stage_seed(task, Stage::surrogate_init));
    f_sur = std::make_shared<const Matrix>(one_gradient_step(init, stage1, act, g.eta));
  }

  // Preactivations F_hat H^T are shared between heads that use the same F_hat.
  std::shared_ptr<const Matrix> cached_f;
  Matrix pre2;
  std::vector<Matrix> pre_test;
  auto preactivations = [&](const std::shared_ptr<const Matrix>& f) {
    if (cached_f != f) {
      pre2 = batch_preactivations(*f, stage2);
      pre_test.clear();
      for (const auto& t : tests) pre_test.push_back(batch_preactivations(*f, t));
      cached_f = f;
    }
  };

  for (const auto& model : c.models) {
    std::vector<double> per;
    if (model == "linear") {
      const LinearModel lm = train_linear(stage2, c.lambda);
      for (const auto& t : tests) per.push_back(mse(t, predict_linear(lm, t)));
    } else if (model == "mlp") {
      preactivations(f_hat);
      const Vector w = ridge_solve(mlp_design(pre2, act), y2, c.lambda);
      for (std::size_t s = 0; s < tests.size(); ++s) per.push_back(mse(tests[s], mlp_design(pre_test[s], act) * w));
    } else {
      preactivations(f_sur);
      const HermiteExpansion e = hermite_coefficients(act, c.surrogate_degree);
      const Vector w = ridge_solve(surrogate_design(pre2, e, stage_seed(task, Stage::surrogate_train)), y2, c.lambda);
      for (std::size_t s = 0; s < tests.size(); ++s) {
        const Matrix a = surrogate_design(pre_test[s], e, stage_seed(task, Stage::surrogate_predict).child(s));
        per.push_back(mse(tests[s], a * w));
      }
    }
    record(std::move(per));
  }
  return result;
}

struct ExperimentOutput {
  SweepResult result;
  ojson metadata;
  std::vector<std::string> warnings;
  int threads_used = 1;
};

/// Runs every (grid point, run) task on a pool of workers and reduces in a
/// fixed order.
inline ExperimentOutput run_experiment(const ExperimentConfig& c, const RunOptions& opt = {}) {
  validate_config(c);
  std::unique_ptr<ContextStore> owned_store;
  const ContextStore* store = opt.store;
  if (!store && c.uses_store()) {
    owned_store = std::make_unique<ContextStore>(load_store(c.data_store));
    store = owned_store.get();
  }
  if (store && !c.train_probs.empty() && c.train_probs.size() != store->num_sources())
    throw ArgumentError("train_probs length must equal the number of store sources");
  const std::size_t num_sources = store ? store->num_sources() : c.sources.size();

  const std::size_t n_sweep = c.sweep.values.size();
  const std::size_t n_series = c.series ? c.series->values.size() : 1;
  std::vector<GridPoint> grid;
  for (std::size_t i = 0; i < n_sweep; ++i)
    for (std::size_t j = 0; j < n_series; ++j)
      grid.push_back(resolve_grid_point(c, i, c.series ? std::optional<std::size_t>(j) : std::nullopt, store));

  ExperimentOutput out;
  if (!store) {
    std::set<std::string> seen;
    for (const auto& g : grid)
      for (auto& w : build_mixture(g, c.master_seed).validate())
        if (seen.insert(w).second) out.warnings.push_back(w);
  }

  double peak = 0.0;
  for (const auto& g : grid) peak = std::max(peak, estimate_task_bytes(c, g, num_sources));
  const double cap = c.memory_cap_gb * 1024.0 * 1024.0 * 1024.0;
  if (peak > cap)
    throw ResourceError("estimated peak memory " + format_double(std::round(peak / 1048576.0)) +
                        " MiB per task exceeds the cap of " + format_double(c.memory_cap_gb) + " GiB");
  const std::size_t total = grid.size() * static_cast<std::size_t>(c.mc_runs);
  std::size_t threads = static_cast<std::size_t>(std::max(1, opt.threads));
  threads = std::min({threads, total, static_cast<std::size_t>(cap / peak)});
  threads = std::max<std::size_t>(threads, 1);
  out.threads_used = static_cast<int>(threads);

  std::vector<TaskResult> results(total);
  std::vector<std::exception_ptr> errors(total);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::mutex progress_mu;
  std::size_t done = 0;
  auto worker = [&] {
    for (;;) {
      const std::size_t t = next.fetch_add(1);
      if (t >= total || failed.load()) return;
      try {
        results[t] = run_task(c, grid[t / c.mc_runs], static_cast<int>(t % c.mc_runs), store);
      } catch (...) {
        errors[t] = std::current_exception();
        failed.store(true);
      }
      if (opt.progress) {
        std::lock_guard<std::mutex> lock(progress_mu);
        opt.progress(++done, total);
      }
    }
  };
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);

  const auto runs = static_cast<std::size_t>(c.mc_runs);
  ojson grid_meta = ojson::array();
  for (std::size_t gi = 0; gi < grid.size(); ++gi) {
    const GridPoint& g = grid[gi];
    std::string suffix;
    if (c.series) suffix = "@" + c.series->variable + "=" + format_double(*g.series_value);
    double t_hat = 0.0;
    for (std::size_t r = 0; r < runs; ++r) t_hat += results[gi * runs + r].t_hat;
    for (std::size_t m = 0; m < c.models.size(); ++m) {
      for (std::size_t s = 0; s <= num_sources; ++s) {
        double mean = 0.0;
        for (std::size_t r = 0; r < runs; ++r) mean += results[gi * runs + r].errors[m][s];
        mean /= static_cast<double>(runs);
        double var = 0.0;
        for (std::size_t r = 0; r < runs; ++r) {
          const double dev = results[gi * runs + r].errors[m][s] - mean;
          var += dev * dev;
        }
        var = runs > 1 ? var / static_cast<double>(runs - 1) : 0.0;
        out.result.rows.push_back(SweepRow{g.sweep_value, c.models[m] + suffix,
                                           s == num_sources ? "overall" : std::to_string(s), mean, std::sqrt(var),
                                           c.mc_runs});
      }
    }
    ojson gm;
    gm["sweep_value"] = g.sweep_value;
    gm["series_value"] = g.series_value ? ojson(*g.series_value) : ojson(nullptr);
    gm["d"] = g.d;
    gm["ell"] = g.ell;
    gm["n"] = g.n;
    gm["k"] = g.k;
    gm["eta"] = g.eta;
    gm["train_probs"] = g.train_probs;
    gm["mean_t_hat"] = t_hat / static_cast<double>(runs);
    gm["seed_key"] = grid_seed(c.master_seed, g, 0).indices.front();
    grid_meta.push_back(gm);
  }
  out.metadata["config"] = config_to_json(c);
  out.metadata["seed_scheme"] =
      "task seed = (master_seed, splitmix64 of grid values, run); children: 0 calibration, 1 init, 2 stage 1, "
      "3 stage 2, 4 test, 5 surrogate train noise, 6 surrogate predict noise, 7 independent surrogate init, "
      "8 store queue";
  out.metadata["grid"] = grid_meta;
  out.metadata["sources"] = store ? ojson(store->source_labels) : ojson(num_sources);
  out.metadata["warnings"] = out.warnings;
  return out;
}

/// Writes results.csv and metadata.json into `dir`.
inline void write_experiment(const ExperimentOutput& out, const std::filesystem::path& dir) {
  write_file_atomic(dir / "results.csv", out.result.to_csv());
  write_file_atomic(dir / "metadata.json", out.metadata.dump(2) + "\n");
}

}  // namespace iclmix
