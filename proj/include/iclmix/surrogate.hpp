#pragma once

// Equivalent polynomial model: same F_hat as the trained MLP, sigma replaced
// by sigma_hat_p, second layer refit by ridge regression.

#include <memory>
#include <span>

#include "iclmix/hermite.hpp"
#include "iclmix/mlp.hpp"

namespace iclmix {

struct SurrogateModel {
  std::shared_ptr<const Matrix> f_hat;
  HermiteExpansion expansion;
  Vector w_poly;
  double lambda = 0.0;

  Eigen::Index k() const { return f_hat ? f_hat->rows() : 0; }
};

/// Rows [begin, end) of sigma_hat_p(F_hat h_j)^T / sqrt(k); residual noise
/// comes from `noise`.
inline Matrix surrogate_features(const Matrix& f_hat, const HermiteExpansion& e,
                                 std::span<const Context> batch, Eigen::Index begin,
                                 Eigen::Index end, const SeedPath& noise) {
  Matrix a = hidden_preactivations(f_hat, batch, begin, end);
  Rng rng(noise);
  surrogate_apply_inplace(e, a, rng);
  a /= std::sqrt(static_cast<double>(f_hat.rows()));
  return a.transpose();
}

/// Surrogate design from precomputed preactivations (k x n); columns
/// [256 b, 256 (b + 1)) draw their residual noise from seed.child(b), matching
/// train_surrogate and predict_surrogate.
inline Matrix surrogate_design(const Matrix& pre, const HermiteExpansion& e, const SeedPath& seed) {
  const Eigen::Index n = pre.cols();
  const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(pre.rows()));
  Matrix out(n, pre.rows());
  for (Eigen::Index b = 0; b < n; b += kContextBlock) {
    const Eigen::Index end = std::min(n, b + kContextBlock);
    Matrix blk = pre.middleCols(b, end - b);
    Rng rng(seed.child(static_cast<std::uint64_t>(b / kContextBlock)));
    surrogate_apply_inplace(e, blk, rng);
    out.middleRows(b, end - b) = inv_sqrt_k * blk.transpose();
  }
  return out;
}

/// Block b of contexts draws its residual noise from seed.child(b).
inline SurrogateModel train_surrogate(std::shared_ptr<const Matrix> f_hat, const Activation& act,
                                      int p, std::span<const Context> stage2, double lambda,
                                      const SeedPath& seed) {
  if (p < 1) throw ArgumentError("train_surrogate: degree p must be >= 1");
  if (!f_hat) throw ArgumentError("train_surrogate: missing F_hat");
  if (stage2.empty()) throw ArgumentError("train_surrogate: empty stage-2 batch");
  SurrogateModel m;
  m.f_hat = std::move(f_hat);
  m.expansion = hermite_coefficients(act, p);
  m.lambda = lambda;
  const Matrix& f = *m.f_hat;
  m.w_poly = ridge_solve_blocked(
      static_cast<Eigen::Index>(stage2.size()), f.rows(),
      [&](Eigen::Index b, Eigen::Index e) {
        return surrogate_features(f, m.expansion, stage2, b, e,
                                  seed.child(static_cast<std::uint64_t>(b / kContextBlock)));
      },
      query_labels(stage2), lambda, kContextBlock);
  return m;
}

inline double predict_surrogate(const SurrogateModel& m, const AttnFeatures& feats,
                                const SeedPath& seed) {
  if (!m.f_hat || m.f_hat->cols() != feats.dim())
    throw ArgumentError("predict_surrogate: feature dimension does not match F_hat");
  if (m.w_poly.size() != m.f_hat->rows())
    throw ArgumentError("predict_surrogate: w_poly length must equal k");
  Matrix pre = (*m.f_hat) * feats.expand();
  Rng rng(seed);
  surrogate_apply_inplace(m.expansion, pre, rng);
  return m.w_poly.dot(pre.col(0)) / std::sqrt(static_cast<double>(m.k()));
}

inline Vector predict_surrogate(const SurrogateModel& m, std::span<const Context> batch,
                                const SeedPath& seed) {
  if (!m.f_hat) throw ArgumentError("predict_surrogate: model has no first layer");
  const auto n = static_cast<Eigen::Index>(batch.size());
  Vector out(n);
  for (Eigen::Index b = 0; b < n; b += kContextBlock) {
    const Eigen::Index e = std::min(n, b + kContextBlock);
    out.segment(b, e - b) =
        surrogate_features(*m.f_hat, m.expansion, batch, b, e,
                           seed.child(static_cast<std::uint64_t>(b / kContextBlock))) *
        m.w_poly;
  }
  return out;
}

}  // namespace iclmix
