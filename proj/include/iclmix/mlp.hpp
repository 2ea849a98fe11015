#pragma once

// Nonlinear head  y_hat = (1/sqrt(k)) w^T sigma(F vec(H_Z)),  trained in two
// stages: one gradient step on F with w frozen at initialization, then ridge
// regression for w on a fresh batch.

#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "iclmix/attention.hpp"
#include "iclmix/datagen.hpp"
#include "iclmix/errors.hpp"
#include "iclmix/hermite.hpp"
#include "iclmix/numerics.hpp"

namespace iclmix {

inline constexpr Eigen::Index kContextBlock = 256;

struct MlpInit {
  Matrix F;       // k x D, entries N(0, 1 / t_hat)
  Vector w0;      // k, entries N(0, 1 / k)
  double t_hat = 0.0;
};

/// Draws F (column-major) then w0 from one stream.
inline MlpInit initialize_mlp(int k, Eigen::Index dim, double t_hat, const SeedPath& seed) {
  if (k < 1 || dim < 1) throw ArgumentError("initialize_mlp: k and D must be positive");
  if (!(t_hat > 0.0) || !std::isfinite(t_hat))
    throw ArgumentError("initialize_mlp: t_hat must be positive");
  MlpInit init;
  init.t_hat = t_hat;
  Rng rng(seed);
  init.F.resize(k, dim);
  rng.fill_normal(init.F, 1.0 / std::sqrt(t_hat));
  init.w0 = rng.normal_vector(k, 1.0 / std::sqrt(static_cast<double>(k)));
  return init;
}

/// Mean of ||vec(H_Z)||^2 over the given contexts: the non-central second
/// moment trace E||h||^2, which equals Tr Cov(h) for zero-mean features.
inline double calibrate_trace(std::span<const Context> contexts) {
  if (contexts.empty()) throw ArgumentError("calibrate_trace: no contexts");
  double acc = 0.0;
  for (const auto& c : contexts) {
    const AttnFeatures f = featurize(c);
    acc += f.b.squaredNorm() * f.x_query.squaredNorm();
  }
  const double t = acc / static_cast<double>(contexts.size());
  if (!(t >= 1e-12) || !std::isfinite(t))
    throw NumericalError("calibrate_trace: degenerate trace " + std::to_string(t));
  return t;
}

/// Trace calibration on m_calib fresh contexts from the training mixture.
inline double calibrate_trace(const MixtureSpec& mix, int ell, int m_calib, const SeedPath& seed) {
  if (m_calib < 16) throw ArgumentError("calibrate_trace: m_calib must be >= 16");
  const auto batch = sample_batch(mix, ell, m_calib, seed);
  return calibrate_trace(batch);
}

/// F H^T for rows [begin, end) of the batch (k x (end - begin)).
inline Matrix hidden_preactivations(const Matrix& F, std::span<const Context> batch,
                                    Eigen::Index begin, Eigen::Index end) {
  const Matrix h = feature_rows(batch, begin, end);
  if (h.cols() != F.cols())
    throw ArgumentError("hidden_preactivations: F has " + std::to_string(F.cols()) +
                        " columns, features have " + std::to_string(h.cols()));
  return F * h.transpose();
}

/// G = (1/n) [ (1/sqrt(k)) (w y^T - (1/sqrt(k)) w w^T sigma(F H^T)) (.) sigma'(F H^T) ] H.
///
/// Entry (i, j) of the bracket is (1/sqrt(k)) w_i (y_j - y_hat_j) sigma'(f_i^T h_j),
/// so G = -dL/dF for L = (1/(2n)) sum_j (y_j - y_hat_j)^2. Accumulated over
/// blocks of contexts; peak memory is two k x D matrices plus one block.
inline Matrix first_layer_gradient(const Matrix& F, const Vector& w,
                                   std::span<const Context> stage1, const Activation& act) {
  if (stage1.empty()) throw ArgumentError("one_gradient_step: empty stage-1 batch");
  if (w.size() != F.rows()) throw ArgumentError("one_gradient_step: w length must equal k");
  const auto n = static_cast<Eigen::Index>(stage1.size());
  const double inv_sqrt_k = 1.0 / std::sqrt(static_cast<double>(F.rows()));
  Matrix g = Matrix::Zero(F.rows(), F.cols());
  for (Eigen::Index b = 0; b < n; b += kContextBlock) {
    const Eigen::Index e = std::min(n, b + kContextBlock);
    const Matrix h = feature_rows(stage1, b, e);
    if (h.cols() != F.cols()) throw ArgumentError("one_gradient_step: feature dimension mismatch");
    const Matrix pre = F * h.transpose();
    Matrix act_out = pre;
    act.apply_inplace(act_out);
    const Vector y_hat = inv_sqrt_k * (act_out.transpose() * w);
    Matrix m = act.slope(pre);
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double resid = stage1[b + j].query_label() - y_hat(j);
      m.col(j).array() *= inv_sqrt_k * resid * w.array();
    }
    g.noalias() += m * h;
  }
  g /= static_cast<double>(n);
  if (!g.allFinite()) throw NumericalError("one_gradient_step: non-finite gradient");
  return g;
}

/// F_hat = F + eta G.
inline Matrix one_gradient_step(const MlpInit& init, std::span<const Context> stage1,
                                const Activation& act, double eta) {
  if (!(eta >= 0.0) || !std::isfinite(eta)) throw ArgumentError("one_gradient_step: eta must be >= 0");
  if (stage1.empty()) throw ArgumentError("one_gradient_step: empty stage-1 batch");
  if (eta == 0.0) return init.F;
  Matrix f_hat = first_layer_gradient(init.F, init.w0, stage1, act);
  f_hat *= eta;
  f_hat += init.F;
  return f_hat;
}

/// Rows [begin, end) of the second-layer design sigma(F_hat h_j)^T / sqrt(k).
inline Matrix hidden_features(const Matrix& f_hat, const Activation& act,
                              std::span<const Context> batch, Eigen::Index begin, Eigen::Index end) {
  Matrix a = hidden_preactivations(f_hat, batch, begin, end);
  act.apply_inplace(a);
  a /= std::sqrt(static_cast<double>(f_hat.rows()));
  return a.transpose();
}

/// F_hat H^T for a whole batch (k x n), assembled block by block.
inline Matrix batch_preactivations(const Matrix& f_hat, std::span<const Context> batch) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  Matrix pre(f_hat.rows(), n);
  for (Eigen::Index b = 0; b < n; b += kContextBlock) {
    const Eigen::Index e = std::min(n, b + kContextBlock);
    pre.middleCols(b, e - b) = hidden_preactivations(f_hat, batch, b, e);
  }
  return pre;
}

/// Second-layer design sigma(pre)^T / sqrt(k) (n x k).
inline Matrix mlp_design(const Matrix& pre, const Activation& act) {
  Matrix a = pre;
  act.apply_inplace(a);
  a /= std::sqrt(static_cast<double>(pre.rows()));
  return a.transpose();
}

inline Vector train_second_layer(const Matrix& f_hat, const Activation& act,
                                 std::span<const Context> stage2, double lambda) {
  if (stage2.empty()) throw ArgumentError("train_second_layer: empty stage-2 batch");
  return ridge_solve_blocked(
      static_cast<Eigen::Index>(stage2.size()), f_hat.rows(),
      [&](Eigen::Index b, Eigen::Index e) { return hidden_features(f_hat, act, stage2, b, e); },
      query_labels(stage2), lambda, kContextBlock);
}

/// A trained head. F_hat is shared (never copied) with a paired surrogate.
struct MlpModel {
  std::shared_ptr<const Matrix> f_hat;
  Vector w_hat;
  Activation activation = Activation::relu();
  double eta = 0.0;
  double lambda = 0.0;
  double t_hat = 0.0;

  Eigen::Index k() const { return f_hat ? f_hat->rows() : 0; }
};

inline double predict_mlp(const MlpModel& m, const AttnFeatures& f) {
  if (!m.f_hat || m.f_hat->cols() != f.dim())
    throw ArgumentError("predict_mlp: feature dimension does not match F_hat");
  if (m.w_hat.size() != m.f_hat->rows()) throw ArgumentError("predict_mlp: w_hat length must equal k");
  Matrix pre = (*m.f_hat) * f.expand();
  m.activation.apply_inplace(pre);
  return m.w_hat.dot(pre.col(0)) / std::sqrt(static_cast<double>(m.k()));
}

inline Vector predict_mlp(const MlpModel& m, std::span<const Context> batch) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  if (!m.f_hat) throw ArgumentError("predict_mlp: model has no first layer");
  Vector out(n);
  for (Eigen::Index b = 0; b < n; b += kContextBlock) {
    const Eigen::Index e = std::min(n, b + kContextBlock);
    out.segment(b, e - b) = hidden_features(*m.f_hat, m.activation, batch, b, e) * m.w_hat;
  }
  return out;
}

/// Stage-2 data must not share seed lineage with stage 1: neither path may be
/// a prefix of the other.
inline void check_stage_lineage(const SeedPath& stage1, const SeedPath& stage2) {
  if (stage1.master != stage2.master) return;
  const auto& a = stage1.indices;
  const auto& b = stage2.indices;
  const std::size_t m = std::min(a.size(), b.size());
  if (std::equal(a.begin(), a.begin() + static_cast<std::ptrdiff_t>(m), b.begin()))
    throw ArgumentError("stage-2 contexts would reuse the stage-1 seed lineage");
}

}  // namespace iclmix
