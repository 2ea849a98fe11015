#pragma once

// Monte-Carlo ICL error (uniform average of per-source query errors) and the
// norm-concentration / gradient-spike diagnostics.

#include <cmath>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "iclmix/attention.hpp"
#include "iclmix/datagen.hpp"
#include "iclmix/hermite.hpp"
#include "iclmix/mlp.hpp"
#include "iclmix/numerics.hpp"

namespace iclmix {

/// Batch predictor; the seed feeds any prediction-time randomness.
using BatchPredictor = std::function<Vector(std::span<const Context>, const SeedPath&)>;

struct IclReport {
  std::vector<double> per_source;
  std::vector<double> std_err;
  std::vector<int> n_test;
  double overall = 0.0;  // uniform mean of per_source
};

/// Errors on fixed per-source test sets. Source s predictions use
/// seed.child(s).
inline IclReport icl_error_on(const BatchPredictor& predict,
                              const std::vector<std::vector<Context>>& per_source,
                              const SeedPath& seed) {
  if (per_source.empty()) throw ArgumentError("icl_error: no sources");
  IclReport r;
  for (std::size_t s = 0; s < per_source.size(); ++s) {
    const auto& ctxs = per_source[s];
    if (ctxs.empty()) throw ArgumentError("icl_error: source " + std::to_string(s) + " has no test contexts");
    const Vector pred = predict(ctxs, seed.child(s));
    if (pred.size() != static_cast<Eigen::Index>(ctxs.size()))
      throw ArgumentError("icl_error: predictor returned wrong number of predictions");
    const auto n = static_cast<double>(ctxs.size());
    double sum = 0.0, sum_sq = 0.0;
    for (std::size_t j = 0; j < ctxs.size(); ++j) {
      const double e = ctxs[j].query_label() - pred(static_cast<Eigen::Index>(j));
      const double se = e * e;
      sum += se;
      sum_sq += se * se;
    }
    if (!std::isfinite(sum)) throw NumericalError("icl_error: non-finite prediction error");
    const double mean = sum / n;
    const double var = ctxs.size() > 1 ? std::max(0.0, (sum_sq - n * mean * mean) / (n - 1.0)) : 0.0;
    r.per_source.push_back(mean);
    r.std_err.push_back(std::sqrt(var / n));
    r.n_test.push_back(static_cast<int>(ctxs.size()));
  }
  double acc = 0.0;
  for (double e : r.per_source) acc += e;
  r.overall = acc / static_cast<double>(r.per_source.size());
  return r;
}

/// Test contexts for source s are drawn with s forced, from seed.child(s).
inline std::vector<std::vector<Context>> sample_test_sets(const MixtureSpec& mix, int ell,
                                                          int n_test_per_source,
                                                          const SeedPath& seed) {
  if (n_test_per_source < 1) throw ArgumentError("icl_error: n_test_per_source must be positive");
  std::vector<std::vector<Context>> sets;
  for (std::size_t s = 0; s < mix.size(); ++s)
    sets.push_back(sample_batch_for_source(mix, static_cast<int>(s), ell, n_test_per_source, seed.child(s)));
  return sets;
}

/// Training probabilities play no role: every source gets n_test contexts.
inline IclReport icl_error(const BatchPredictor& predict, const MixtureSpec& mix, int ell,
                           int n_test_per_source, const SeedPath& seed) {
  const auto sets = sample_test_sets(mix, ell, n_test_per_source, seed.child(0));
  return icl_error_on(predict, sets, seed.child(1));
}

inline std::string icl_report_csv_header() { return "model,source,mean_error,std_err,n_test"; }

/// One row per source plus an "overall" row.
inline std::string icl_report_csv(const std::string& model, const IclReport& r) {
  std::ostringstream os;
  os.precision(17);
  int total = 0;
  double pooled = 0.0;
  for (std::size_t s = 0; s < r.per_source.size(); ++s) {
    os << model << ',' << s << ',' << r.per_source[s] << ',' << r.std_err[s] << ',' << r.n_test[s] << '\n';
    total += r.n_test[s];
    pooled += r.std_err[s] * r.std_err[s];
  }
  const double k = static_cast<double>(r.per_source.size());
  os << model << ",overall," << r.overall << ',' << std::sqrt(pooled) / k << ',' << total << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

struct ConcentrationRow {
  int d = 0;
  double t_hat = 0.0;       // calibrate_trace on an independent batch
  double t_own = 0.0;       // mean ||h||^2 over the diagnostic's own contexts
  double mean_ratio = 0.0;  // mean of ||h||^2 / t_hat
  double cov_ratio = 0.0;   // coefficient of variation of ||h||^2 / t_hat
  int contexts = 0;
};

using MixtureForDim = std::function<MixtureSpec(int d)>;
using EllForDim = std::function<int(int d)>;

inline std::vector<ConcentrationRow> diagnose_concentration(const MixtureForDim& mix_for_d,
                                                            const EllForDim& ell_for_d,
                                                            const std::vector<int>& d_list,
                                                            const SeedPath& seed,
                                                            int contexts = 200, int m_calib = 512) {
  std::vector<ConcentrationRow> rows;
  for (int d : d_list) {
    if (d < 8) throw ArgumentError("diagnose_concentration: d must be >= 8");
    const MixtureSpec mix = mix_for_d(d);
    const int ell = ell_for_d(d);
    const SeedPath sd = seed.child(static_cast<std::uint64_t>(d));
    ConcentrationRow row;
    row.d = d;
    row.contexts = contexts;
    row.t_hat = calibrate_trace(mix, ell, m_calib, sd.child(0));
    const auto batch = sample_batch(mix, ell, contexts, sd.child(1));
    std::vector<double> ratios;
    double own = 0.0;
    for (const auto& c : batch) {
      const AttnFeatures f = featurize(c);
      const double h2 = f.b.squaredNorm() * f.x_query.squaredNorm();
      own += h2;
      ratios.push_back(h2 / row.t_hat);
    }
    row.t_own = own / contexts;
    double mean = 0.0;
    for (double r : ratios) mean += r;
    mean /= contexts;
    double var = 0.0;
    for (double r : ratios) var += (r - mean) * (r - mean);
    var /= std::max(1, contexts - 1);
    row.mean_ratio = mean;
    row.cov_ratio = std::sqrt(var) / mean;
    rows.push_back(row);
  }
  return rows;
}

struct SpikeRow {
  int d = 0;
  int k = 0;
  int n = 0;
  double alpha = 0.0;          // E[sigma'(z)]
  double spike_norm = 0.0;     // ||u v^T|| = ||u|| ||v||
  double residual_norm = 0.0;  // ||G - u v^T||
  double ratio = 0.0;
};

/// G = u v^T + Delta with u = alpha w0, v = H^T y / (n sqrt(k)).
inline SpikeRow gradient_spike_decomposition(const MlpInit& init, std::span<const Context> stage1,
                                             const Activation& act) {
  const Matrix g = first_layer_gradient(init.F, init.w0, stage1, act);
  const auto n = static_cast<Eigen::Index>(stage1.size());
  const double k = static_cast<double>(init.F.rows());
  Vector v = Vector::Zero(init.F.cols());
  const Vector y = query_labels(stage1);
  for (Eigen::Index b = 0; b < n; b += kContextBlock) {
    const Eigen::Index e = std::min(n, b + kContextBlock);
    v.noalias() += feature_rows(stage1, b, e).transpose() * y.segment(b, e - b);
  }
  v /= static_cast<double>(n) * std::sqrt(k);
  SpikeRow row;
  row.k = static_cast<int>(init.F.rows());
  row.n = static_cast<int>(n);
  row.d = stage1.front().d;
  row.alpha = mean_slope(act);
  const Vector u = row.alpha * init.w0;
  Matrix resid = g;
  resid.noalias() -= u * v.transpose();
  row.spike_norm = u.norm() * v.norm();
  row.residual_norm = operator_norm(resid, {1e-9, 5000});
  row.ratio = row.residual_norm / row.spike_norm;
  return row;
}

struct SpikeSizes {
  int ell = 0;
  int n = 0;
  int k = 0;
};

/// For each d: calibrate t_hat, initialize, draw a stage-1 batch, decompose G.
inline std::vector<SpikeRow> diagnose_gradient_spike(
    const Activation& act, const MixtureForDim& mix_for_d,
    const std::function<SpikeSizes(int d)>& sizes_for_d, const std::vector<int>& d_list,
    const SeedPath& seed, int m_calib = 512) {
  std::vector<SpikeRow> rows;
  for (int d : d_list) {
    if (d < 8) throw ArgumentError("diagnose_gradient_spike: d must be >= 8");
    const MixtureSpec mix = mix_for_d(d);
    const SpikeSizes sz = sizes_for_d(d);
    const SeedPath sd = seed.child(static_cast<std::uint64_t>(d));
    const double t_hat = calibrate_trace(mix, sz.ell, m_calib, sd.child(0));
    const MlpInit init = initialize_mlp(sz.k, feature_dim(d), t_hat, sd.child(1));
    const auto stage1 = sample_batch(mix, sz.ell, sz.n, sd.child(2));
    rows.push_back(gradient_spike_decomposition(init, stage1, act));
  }
  return rows;
}

}  // namespace iclmix
