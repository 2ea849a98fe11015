#pragma once

// Reparameterized linear attention. With v21 = 0 the attention prediction is
// vec(Gamma)^T vec(H_Z), where
//   H_Z = x_query [ (1/ell) sum_i y_i x_i^T , (1/ell) sum_i y_i^2 ] = x_query b^T,
// so vec(H_Z) = b (x) x_query (column-major vec, Kronecker product).

#include <span>
#include <string>
#include <vector>

#include "iclmix/datagen.hpp"
#include "iclmix/errors.hpp"
#include "iclmix/numerics.hpp"

namespace iclmix {

/// Attention output kept in factored form; `expand()` materializes
/// h = vec(H_Z) of length d (d + 1).
struct AttnFeatures {
  Vector b;        // d + 1: context summary, query label excluded
  Vector x_query;  // d

  Eigen::Index dim() const noexcept { return b.size() * x_query.size(); }

  Vector expand() const {
    const Eigen::Index d = x_query.size();
    Vector h(dim());
    for (Eigen::Index j = 0; j < b.size(); ++j) h.segment(j * d, d) = b(j) * x_query;
    return h;
  }
};

inline Eigen::Index feature_dim(int d) { return static_cast<Eigen::Index>(d) * (d + 1); }

inline AttnFeatures featurize(const Context& ctx) {
  const int d = ctx.d, ell = ctx.ell;
  if (ctx.inputs.rows() != d || ctx.inputs.cols() != ell + 1 || ctx.labels.size() != ell + 1)
    throw ArgumentError("featurize: context shape does not match (d, ell)");
  AttnFeatures f;
  f.b.resize(d + 1);
  const auto labels = ctx.labels.head(ell);
  f.b.head(d).noalias() = ctx.inputs.leftCols(ell) * labels;
  f.b(d) = labels.squaredNorm();
  f.b /= static_cast<double>(ell);
  f.x_query = ctx.inputs.col(ell);
  return f;
}

/// Rows [begin, end) of the n x D matrix whose j-th row is vec(H_{Z_j})^T.
inline Matrix feature_rows(std::span<const Context> batch, Eigen::Index begin, Eigen::Index end) {
  if (batch.empty()) throw ArgumentError("feature_rows: empty batch");
  const int d = batch.front().d;
  Matrix h(end - begin, feature_dim(d));
  for (Eigen::Index j = begin; j < end; ++j) {
    if (batch[j].d != d) throw ArgumentError("feature_rows: contexts have different d");
    const AttnFeatures f = featurize(batch[j]);
    for (Eigen::Index c = 0; c <= d; ++c)
      h.row(j - begin).segment(c * d, d) = f.b(c) * f.x_query.transpose();
  }
  return h;
}

inline Matrix feature_matrix(std::span<const Context> batch) {
  return feature_rows(batch, 0, static_cast<Eigen::Index>(batch.size()));
}

inline Vector query_labels(std::span<const Context> batch) {
  Vector y(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) y(j) = batch[j].query_label();
  return y;
}

// ---------------------------------------------------------------------------
// Linear Transformer baseline
// ---------------------------------------------------------------------------

struct LinearModel {
  Vector gamma;  // vec(Gamma)
  double lambda = 0.0;
};

/// Ridge regression of the query labels on vec(H_Z).
inline LinearModel train_linear(std::span<const Context> batch, double lambda) {
  if (batch.empty()) throw ArgumentError("train_linear: empty batch");
  const auto n = static_cast<Eigen::Index>(batch.size());
  const Eigen::Index dim = feature_dim(batch.front().d);
  LinearModel m;
  m.lambda = lambda;
  m.gamma = ridge_solve_blocked(
      n, dim, [&](Eigen::Index b, Eigen::Index e) { return feature_rows(batch, b, e); },
      query_labels(batch), lambda);
  return m;
}

inline double predict_linear(const LinearModel& m, const AttnFeatures& f) {
  if (m.gamma.size() != f.dim())
    throw ArgumentError("predict_linear: model has dimension " + std::to_string(m.gamma.size()) +
                        ", features " + std::to_string(f.dim()));
  // gamma . (b (x) x) without expanding h.
  const Eigen::Index d = f.x_query.size();
  double acc = 0.0;
  for (Eigen::Index j = 0; j < f.b.size(); ++j) acc += f.b(j) * m.gamma.segment(j * d, d).dot(f.x_query);
  return acc;
}

inline Vector predict_linear(const LinearModel& m, std::span<const Context> batch) {
  Vector out(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t j = 0; j < batch.size(); ++j) out(j) = predict_linear(m, featurize(batch[j]));
  return out;
}

}  // namespace iclmix
