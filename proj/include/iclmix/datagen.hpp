#pragma once

// Multi-source data model: each context draws a source s ~ Categorical(rho),
// a task vector xi | s, then ell + 1 inputs x_i | s with labels
//   y_i = phi_s( xi^T x_i / (||xi|| * ||Sigma_x||^{1/2}) ) + eps_i.
// The last input/label pair is the query.

#include <cmath>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "iclmix/errors.hpp"
#include "iclmix/hermite.hpp"
#include "iclmix/numerics.hpp"

namespace iclmix {

struct SourceSpec {
  Vector mu_x;
  SpikedCovariance cov_x;
  Vector mu_xi;
  SpikedCovariance cov_xi;
  Activation target = Activation::relu();
  double noise_std = 0.0;

  Eigen::Index dim() const noexcept { return cov_x.dim(); }

  /// Throws on inconsistent dimensions; returns soft warnings.
  std::vector<std::string> validate() const {
    const Eigen::Index d = cov_x.dim();
    if (d <= 0) throw ArgumentError("SourceSpec: empty input covariance");
    if (mu_x.size() != d || mu_xi.size() != d || cov_xi.dim() != d)
      throw ArgumentError("SourceSpec: all dimensions must equal d = " + std::to_string(d));
    if (!(noise_std >= 0.0) || !std::isfinite(noise_std))
      throw ArgumentError("SourceSpec: noise_std must be finite and non-negative");
    std::vector<std::string> warnings;
    const double s = spectral_norm(cov_x);
    if (s * s > static_cast<double>(d)) {
      warnings.push_back("input covariance has ||Sigma_x||^2 = " + std::to_string(s * s) +
                         " > d = " + std::to_string(d) +
                         "; label normalization leaves the O(d) regime");
    }
    return warnings;
  }
};

struct MixtureSpec {
  std::vector<SourceSpec> sources;
  std::vector<double> train_probs;

  static MixtureSpec uniform(std::vector<SourceSpec> sources) {
    MixtureSpec m;
    const double p = 1.0 / static_cast<double>(sources.size());
    m.train_probs.assign(sources.size(), p);
    m.sources = std::move(sources);
    return m;
  }

  std::size_t size() const noexcept { return sources.size(); }
  Eigen::Index dim() const { return sources.empty() ? 0 : sources.front().dim(); }

  std::vector<std::string> validate() const {
    if (sources.empty()) throw ArgumentError("MixtureSpec: need at least one source");
    if (train_probs.size() != sources.size())
      throw ArgumentError("MixtureSpec: train_probs length must equal number of sources");
    double total = 0.0;
    for (double p : train_probs) {
      if (!(p >= 0.0) || !std::isfinite(p))
        throw ArgumentError("MixtureSpec: probabilities must be non-negative");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-9) throw ArgumentError("MixtureSpec: probabilities must sum to 1");
    std::vector<std::string> warnings;
    for (std::size_t s = 0; s < sources.size(); ++s) {
      if (sources[s].dim() != sources.front().dim())
        throw ArgumentError("MixtureSpec: sources have different dimensions");
      for (auto& w : sources[s].validate()) warnings.push_back("source " + std::to_string(s) + ": " + w);
    }
    return warnings;
  }
};

/// One ICL instance. Column i of `inputs` is x_{i+1}; column `ell` is the
/// query. `task` is empty for contexts built from real data.
struct Context {
  int d = 0;
  int ell = 0;
  Matrix inputs;  // d x (ell + 1)
  Vector labels;  // ell + 1
  int source_id = 0;
  std::optional<Vector> task;

  auto query() const { return inputs.col(ell); }
  double query_label() const { return labels(ell); }
};

namespace detail {

inline std::size_t draw_categorical(const std::vector<double>& probs, Rng& rng) {
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last_positive = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] > 0.0) last_positive = i;
    cum += probs[i];
    if (u < cum) return i;
  }
  return last_positive;
}

}  // namespace detail

/// Draws xi, then the ell + 1 inputs, then the label noise, from `rng`.
inline Context sample_context_from_source(const SourceSpec& src, int source_id, int ell, Rng& rng) {
  if (ell <= 0) throw ArgumentError("sample_context: ell must be positive");
  const Eigen::Index d = src.dim();
  Context c;
  c.d = static_cast<int>(d);
  c.ell = ell;
  c.source_id = source_id;
  Vector xi = sample_gaussian_spiked_columns(src.mu_xi, src.cov_xi, 1, rng).col(0);
  const double scale = xi.norm() * std::sqrt(spectral_norm(src.cov_x));
  if (!(scale > 0.0)) throw NumericalError("sample_context: degenerate task vector");
  c.inputs = sample_gaussian_spiked_columns(src.mu_x, src.cov_x, ell + 1, rng);
  c.labels.resize(ell + 1);
  const Vector proj = c.inputs.transpose() * xi;
  for (int i = 0; i <= ell; ++i) {
    double y = src.target.value(proj(i) / scale);
    if (src.noise_std > 0.0) y += src.noise_std * rng.normal();
    c.labels(i) = y;
  }
  c.task = std::move(xi);
  return c;
}

inline Context sample_context(const MixtureSpec& mix, int ell, const SeedPath& seed) {
  if (ell <= 0) throw ArgumentError("sample_context: ell must be positive");
  Rng rng(seed);
  const std::size_t s = detail::draw_categorical(mix.train_probs, rng);
  return sample_context_from_source(mix.sources[s], static_cast<int>(s), ell, rng);
}

/// Same as sample_context with the source forced to `source`.
inline Context sample_context_for_source(const MixtureSpec& mix, int source, int ell,
                                         const SeedPath& seed) {
  if (source < 0 || static_cast<std::size_t>(source) >= mix.size())
    throw ArgumentError("sample_context_for_source: source index out of range");
  Rng rng(seed);
  return sample_context_from_source(mix.sources[source], source, ell, rng);
}

/// Context j is drawn from seed.child(j).
inline std::vector<Context> sample_batch(const MixtureSpec& mix, int ell, int count,
                                         const SeedPath& seed) {
  if (count < 1) throw ArgumentError("sample_batch: count must be positive");
  if (ell <= 0) throw ArgumentError("sample_batch: ell must be positive");
  std::vector<Context> out;
  out.reserve(count);
  for (int j = 0; j < count; ++j) out.push_back(sample_context(mix, ell, seed.child(j)));
  return out;
}

inline std::vector<Context> sample_batch_for_source(const MixtureSpec& mix, int source, int ell,
                                                    int count, const SeedPath& seed) {
  if (count < 1) throw ArgumentError("sample_batch: count must be positive");
  std::vector<Context> out;
  out.reserve(count);
  for (int j = 0; j < count; ++j)
    out.push_back(sample_context_for_source(mix, source, ell, seed.child(j)));
  return out;
}

// ---------------------------------------------------------------------------
// Caption presets
// ---------------------------------------------------------------------------

enum class SourcePreset { isotropic, spiked_task, spiked_input, noisy };

inline SourcePreset source_preset_from_name(std::string_view name) {
  if (name == "isotropic") return SourcePreset::isotropic;
  if (name == "spiked_task") return SourcePreset::spiked_task;
  if (name == "spiked_input") return SourcePreset::spiked_input;
  if (name == "noisy") return SourcePreset::noisy;
  throw ArgumentError("unknown source preset '" + std::string(name) + "'");
}

/// theta such that ||I + theta gamma gamma^T||_2^2 equals `norm_sq`.
inline double theta_for_norm_sq(double norm_sq) {
  if (!(norm_sq >= 1.0)) throw ArgumentError("theta_for_norm_sq: target must be >= 1");
  return std::sqrt(norm_sq) - 1.0;
}

/// Rank-one spiked covariance; theta == 0 gives the identity.
inline SpikedCovariance spiked(Eigen::Index d, double theta, const Vector& gamma) {
  if (theta < 0.0) throw ArgumentError("spike strength must be non-negative");
  if (theta == 0.0) return SpikedCovariance::identity(d);
  return SpikedCovariance(d, {Spike{theta, gamma}});
}

/// isotropic: zero means, identity covariances, ReLU target, noise 0.01.
/// spiked_task / spiked_input add one spike of strength `value` along a unit
/// direction drawn from `gamma_seed`; noisy sets the noise level to `value`.
inline SourceSpec preset_source(SourcePreset kind, int d, double value, const SeedPath& gamma_seed) {
  if (d <= 0) throw ArgumentError("preset_source: d must be positive");
  SourceSpec s;
  s.mu_x = Vector::Zero(d);
  s.mu_xi = Vector::Zero(d);
  s.cov_x = SpikedCovariance::identity(d);
  s.cov_xi = SpikedCovariance::identity(d);
  s.target = Activation::relu();
  s.noise_std = 0.01;
  switch (kind) {
    case SourcePreset::isotropic: break;
    case SourcePreset::spiked_task: {
      Rng rng(gamma_seed);
      s.cov_xi = spiked(d, value, rng.unit_vector(d));
      break;
    }
    case SourcePreset::spiked_input: {
      Rng rng(gamma_seed);
      s.cov_x = spiked(d, value, rng.unit_vector(d));
      break;
    }
    case SourcePreset::noisy:
      if (!(value >= 0.0)) throw ArgumentError("preset_source: noise must be non-negative");
      s.noise_std = value;
      break;
  }
  return s;
}

}  // namespace iclmix
