#pragma once

// Shared numerical kernels: seeded random streams, spiked-Gaussian sampling,
// ridge solvers, norms, Gaussian quadrature and a small symmetric eigensolver
// wrapper. Everything here is a pure function of its inputs (and seed).

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "iclmix/errors.hpp"

namespace iclmix {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Seeds and random streams
// ---------------------------------------------------------------------------

constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Hierarchical seed: a master seed plus a path of indices (grid point,
/// Monte-Carlo run, stage, ...). The derived stream seed depends only on the
/// full path, so sibling paths give unrelated streams.
struct SeedPath {
  std::uint64_t master = 0;
  std::vector<std::uint64_t> indices;

  SeedPath() = default;
  explicit SeedPath(std::uint64_t m, std::vector<std::uint64_t> idx = {})
      : master(m), indices(std::move(idx)) {}

  SeedPath child(std::uint64_t i) const {
    SeedPath p = *this;
    p.indices.push_back(i);
    return p;
  }

  std::uint64_t stream_seed() const noexcept {
    std::uint64_t h = splitmix64(master ^ 0x6A09E667F3BCC908ULL);
    for (std::uint64_t idx : indices) {
      h = splitmix64(h ^ splitmix64(idx + 0x3C6EF372FE94F82BULL));
    }
    return h;
  }

  bool operator==(const SeedPath&) const = default;
};

/// mt19937_64 with hand-written uniform/normal transforms. The standard
/// distributions are implementation-defined, these are not.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  explicit Rng(const SeedPath& path) : engine_(path.stream_seed()) {}

  std::uint64_t bits() { return engine_(); }

  /// Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw ArgumentError("Rng::below: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return static_cast<std::size_t>(r % n);
  }

  /// Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * std::numbers::pi * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  template <typename Derived>
  void fill_normal(Eigen::DenseBase<Derived>& m, double scale = 1.0) {
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = scale * normal();
  }

  Vector normal_vector(Eigen::Index n, double scale = 1.0) {
    Vector v(n);
    fill_normal(v, scale);
    return v;
  }

  Vector unit_vector(Eigen::Index n) {
    Vector v;
    double norm = 0.0;
    do {
      v = normal_vector(n);
      norm = v.norm();
    } while (norm == 0.0);
    return v / norm;
  }

 private:
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Spiked covariance  I + sum_q theta_q gamma_q gamma_q^T
// ---------------------------------------------------------------------------

struct Spike {
  double theta = 0.0;
  Vector gamma;
};

class SpikedCovariance {
 public:
  SpikedCovariance() = default;
  explicit SpikedCovariance(Eigen::Index dim, std::vector<Spike> spikes = {})
      : dim_(dim), spikes_(std::move(spikes)) {
    if (dim_ <= 0) throw ArgumentError("SpikedCovariance: dim must be positive");
    for (std::size_t q = 0; q < spikes_.size(); ++q) {
      const auto& s = spikes_[q];
      if (!(s.theta > 0.0) || !std::isfinite(s.theta))
        throw ArgumentError("SpikedCovariance: theta must be positive");
      if (s.gamma.size() != dim_)
        throw ArgumentError("SpikedCovariance: gamma has wrong dimension");
      if (std::abs(s.gamma.norm() - 1.0) > 1e-10)
        throw ArgumentError("SpikedCovariance: gamma must have unit norm");
      for (std::size_t r = 0; r < q; ++r) {
        if (std::abs(s.gamma.dot(spikes_[r].gamma)) > 1e-10)
          throw ArgumentError("SpikedCovariance: spikes must be orthogonal");
      }
    }
  }

  static SpikedCovariance identity(Eigen::Index dim) {
    return SpikedCovariance(dim);
  }

  Eigen::Index dim() const noexcept { return dim_; }
  const std::vector<Spike>& spikes() const noexcept { return spikes_; }

  /// Maps z ~ N(0, I) to a draw from N(0, Sigma) without forming Sigma.
  template <typename Derived>
  void apply_sqrt_inplace(Eigen::MatrixBase<Derived>& z) const {
    for (const auto& s : spikes_) {
      const double c = std::sqrt(1.0 + s.theta) - 1.0;
      z.noalias() += (c * s.gamma) * (s.gamma.transpose() * z);
    }
  }

  /// Sigma = I + sum theta gamma gamma^T as a dense matrix (tests, small dims).
  Matrix dense() const {
    Matrix m = Matrix::Identity(dim_, dim_);
    for (const auto& s : spikes_) m.noalias() += s.theta * s.gamma * s.gamma.transpose();
    return m;
  }

  double trace() const {
    double t = static_cast<double>(dim_);
    for (const auto& s : spikes_) t += s.theta;
    return t;
  }

 private:
  Eigen::Index dim_ = 0;
  std::vector<Spike> spikes_;
};

/// Draws `count` i.i.d. columns (dim x count) from N(mean, cov).
inline Matrix sample_gaussian_spiked_columns(const Vector& mean,
                                             const SpikedCovariance& cov,
                                             Eigen::Index count, Rng& rng) {
  if (mean.size() != cov.dim())
    throw ArgumentError("sample_gaussian_spiked: mean length " +
                        std::to_string(mean.size()) + " != cov dim " +
                        std::to_string(cov.dim()));
  if (count <= 0) throw ArgumentError("sample_gaussian_spiked: count must be positive");
  Matrix z(cov.dim(), count);
  rng.fill_normal(z);
  cov.apply_sqrt_inplace(z);
  z.colwise() += mean;
  return z;
}

/// Draws `count` i.i.d. rows (count x dim) from N(mean, cov).
inline Matrix sample_gaussian_spiked(const Vector& mean,
                                     const SpikedCovariance& cov,
                                     Eigen::Index count, Rng& rng) {
  return sample_gaussian_spiked_columns(mean, cov, count, rng).transpose();
}

inline Matrix sample_gaussian_spiked(const Vector& mean,
                                     const SpikedCovariance& cov,
                                     Eigen::Index count, const SeedPath& seed) {
  Rng rng(seed);
  return sample_gaussian_spiked(mean, cov, count, rng);
}

// ---------------------------------------------------------------------------
// Norms
// ---------------------------------------------------------------------------

/// Exact for the structured representation: 1 + max theta.
inline double spectral_norm(const SpikedCovariance& cov) {
  double m = 0.0;
  for (const auto& s : cov.spikes()) m = std::max(m, s.theta);
  return 1.0 + m;
}

struct PowerIterationOptions {
  double tolerance = 1e-10;
  int max_iterations = 10000;
};

/// Largest |eigenvalue| of a dense symmetric matrix by power iteration.
inline double spectral_norm_dense(const Matrix& m,
                                  PowerIterationOptions opt = {}) {
  if (m.rows() != m.cols()) throw ArgumentError("spectral_norm_dense: matrix must be square");
  if (m.size() == 0) return 0.0;
  Rng rng(0x5EEDULL);
  Vector v = rng.unit_vector(m.rows());
  double est = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    Vector mv = m * v;
    const double nrm = mv.norm();
    if (nrm == 0.0) return 0.0;
    v = mv / nrm;
    if (std::abs(nrm - est) <= opt.tolerance * nrm) return nrm;
    est = nrm;
  }
  return est;
}

/// Largest singular value of a rectangular matrix (power iteration on A^T A).
inline double operator_norm(const Matrix& a, PowerIterationOptions opt = {}) {
  if (a.size() == 0) return 0.0;
  Rng rng(0x5EEDULL);
  Vector v = rng.unit_vector(a.cols());
  double est = 0.0;
  for (int it = 0; it < opt.max_iterations; ++it) {
    Vector av = a * v;
    Vector atav = a.transpose() * av;
    const double nrm = atav.norm();
    if (nrm == 0.0) return 0.0;
    v = atav / nrm;
    if (std::abs(nrm - est) <= opt.tolerance * nrm) return std::sqrt(nrm);
    est = nrm;
  }
  return std::sqrt(est);
}

// ---------------------------------------------------------------------------
// Ridge regression:  argmin_w (1/n)||y - A w||^2 + lambda ||w||^2
// ---------------------------------------------------------------------------

namespace detail {

inline void check_ridge_inputs(const Matrix& a, const Vector& y, double lambda) {
  if (a.rows() < 1 || a.cols() < 1) throw ArgumentError("ridge_solve: empty design matrix");
  if (a.rows() != y.size())
    throw ArgumentError("ridge_solve: " + std::to_string(a.rows()) + " rows but " +
                        std::to_string(y.size()) + " targets");
  if (!std::isfinite(lambda) || lambda < 0.0)
    throw ArgumentError("ridge_solve: lambda must be finite and non-negative");
  if (!a.allFinite() || !y.allFinite())
    throw ArgumentError("ridge_solve: non-finite features or targets");
}

inline Vector spd_solve(Matrix& sys, const Vector& rhs) {
  Eigen::LLT<Matrix> llt(sys);
  if (llt.info() == Eigen::Success) return llt.solve(rhs);
  Eigen::LDLT<Matrix> ldlt(sys);
  if (ldlt.info() != Eigen::Success) throw NumericalError("ridge_solve: factorization failed");
  return ldlt.solve(rhs);
}

inline Vector finite_or_throw(Vector w) {
  if (!w.allFinite()) throw NumericalError("ridge_solve: non-finite solution");
  return w;
}

}  // namespace detail

/// Solves (G + n lambda I) w = rhs where G = A^T A was accumulated elsewhere.
inline Vector ridge_solve_gram(Matrix gram, const Vector& aty, Eigen::Index n,
                               double lambda) {
  if (gram.rows() != gram.cols() || gram.rows() != aty.size())
    throw ArgumentError("ridge_solve_gram: dimension mismatch");
  if (lambda == 0.0) {
    return detail::finite_or_throw(gram.completeOrthogonalDecomposition().solve(aty));
  }
  gram.diagonal().array() += static_cast<double>(n) * lambda;
  return detail::finite_or_throw(detail::spd_solve(gram, aty));
}

/// D x D system: (A^T A + n lambda I) w = A^T y.
inline Vector ridge_solve_primal(const Matrix& a, const Vector& y, double lambda) {
  detail::check_ridge_inputs(a, y, lambda);
  Matrix gram = Matrix::Zero(a.cols(), a.cols());
  gram.selfadjointView<Eigen::Lower>().rankUpdate(a.transpose());
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  return ridge_solve_gram(std::move(gram), a.transpose() * y, a.rows(), lambda);
}

/// n x n system: w = A^T (A A^T + n lambda I)^{-1} y.
inline Vector ridge_solve_dual(const Matrix& a, const Vector& y, double lambda) {
  detail::check_ridge_inputs(a, y, lambda);
  if (lambda == 0.0) {
    return detail::finite_or_throw(a.completeOrthogonalDecomposition().solve(y));
  }
  Matrix k = Matrix::Zero(a.rows(), a.rows());
  k.selfadjointView<Eigen::Lower>().rankUpdate(a);
  k.triangularView<Eigen::StrictlyUpper>() = k.transpose();
  k.diagonal().array() += static_cast<double>(a.rows()) * lambda;
  Vector alpha = detail::spd_solve(k, y);
  return detail::finite_or_throw(a.transpose() * alpha);
}

/// Chooses the smaller system. At lambda = 0 returns the minimum-norm
/// least-squares solution, including for singular designs.
inline Vector ridge_solve(const Matrix& a, const Vector& y, double lambda) {
  detail::check_ridge_inputs(a, y, lambda);
  if (lambda == 0.0) {
    return detail::finite_or_throw(a.completeOrthogonalDecomposition().solve(y));
  }
  return a.cols() <= a.rows() ? ridge_solve_primal(a, y, lambda)
                              : ridge_solve_dual(a, y, lambda);
}

/// Ridge over rows produced block by block: `block(begin, end)` returns rows
/// [begin, end) of the n x D design. When D <= n only the D x D Gram matrix is
/// held in memory; otherwise the (smaller) full design is assembled and the
/// dual system is solved.
template <typename BlockFn>
Vector ridge_solve_blocked(Eigen::Index n, Eigen::Index dim, const BlockFn& block,
                           const Vector& y, double lambda, Eigen::Index block_rows = 256) {
  if (n < 1 || dim < 1) throw ArgumentError("ridge_solve: empty design matrix");
  if (y.size() != n) throw ArgumentError("ridge_solve: target length mismatch");
  if (!std::isfinite(lambda) || lambda < 0.0)
    throw ArgumentError("ridge_solve: lambda must be finite and non-negative");
  if (!y.allFinite()) throw ArgumentError("ridge_solve: non-finite targets");
  if (dim > n) {
    Matrix a(n, dim);
    for (Eigen::Index b = 0; b < n; b += block_rows) {
      const Eigen::Index e = std::min(n, b + block_rows);
      a.middleRows(b, e - b) = block(b, e);
    }
    return ridge_solve(a, y, lambda);
  }
  Matrix gram = Matrix::Zero(dim, dim);
  Vector aty = Vector::Zero(dim);
  for (Eigen::Index b = 0; b < n; b += block_rows) {
    const Eigen::Index e = std::min(n, b + block_rows);
    const Matrix rows = block(b, e);
    if (!rows.allFinite()) throw ArgumentError("ridge_solve: non-finite features");
    gram.selfadjointView<Eigen::Lower>().rankUpdate(rows.transpose());
    aty.noalias() += rows.transpose() * y.segment(b, e - b);
  }
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  return ridge_solve_gram(std::move(gram), aty, n, lambda);
}

inline double ridge_objective(const Matrix& a, const Vector& y, const Vector& w,
                              double lambda) {
  return (y - a * w).squaredNorm() / static_cast<double>(a.rows()) +
         lambda * w.squaredNorm();
}

// ---------------------------------------------------------------------------
// Gaussian quadrature
// ---------------------------------------------------------------------------

struct QuadratureRule {
  Vector nodes;
  Vector weights;
};

/// Gauss-Hermite rule for the standard normal measure (weights sum to 1).
/// Nodes from the Jacobi matrix, polished by Newton on the orthonormal
/// recurrence; weights from the Christoffel function.
inline QuadratureRule gauss_hermite_rule(int n) {
  if (n < 2) throw ArgumentError("gauss_hermite_rule: need at least 2 nodes");
  Matrix jac = Matrix::Zero(n, n);
  for (int j = 1; j < n; ++j) {
    jac(j, j - 1) = jac(j - 1, j) = std::sqrt(static_cast<double>(j));
  }
  Eigen::SelfAdjointEigenSolver<Matrix> es(jac, Eigen::EigenvaluesOnly);
  Vector x = es.eigenvalues();

  // p_j orthonormal under N(0,1): p_{j+1} = (x p_j - sqrt(j) p_{j-1}) / sqrt(j+1).
  // Returns (p_n, p_{n-1}, sum_{j<n} p_j^2) with overflow rescaling.
  auto eval = [n](double t) {
    double pm1 = 0.0, p = 1.0, sum = 0.0, log_scale = 0.0;
    for (int j = 0; j < n; ++j) {
      sum += p * p;
      const double next = (t * p - std::sqrt(static_cast<double>(j)) * pm1) /
                          std::sqrt(static_cast<double>(j + 1));
      pm1 = p;
      p = next;
      if (std::abs(p) > 1e100) {
        p *= 1e-100;
        pm1 *= 1e-100;
        sum *= 1e-200;
        log_scale += 100.0 * std::log(10.0);
      }
    }
    return std::tuple<double, double, double, double>{p, pm1, sum, log_scale};
  };

  QuadratureRule rule{Vector(n), Vector(n)};
  for (int i = 0; i < n; ++i) {
    double t = x(i);
    for (int it = 0; it < 8; ++it) {
      auto [p, pm1, sum, ls] = eval(t);
      const double dp = std::sqrt(static_cast<double>(n)) * pm1;
      if (dp == 0.0) break;
      const double step = p / dp;
      t -= step;
      if (std::abs(step) <= 1e-15 * std::max(1.0, std::abs(t))) break;
    }
    auto [p, pm1, sum, ls] = eval(t);
    rule.nodes(i) = t;
    rule.weights(i) = std::exp(-2.0 * ls) / sum;
  }
  // Symmetrize.
  for (int i = 0; i < n / 2; ++i) {
    const int j = n - 1 - i;
    const double a = 0.5 * (rule.nodes(j) - rule.nodes(i));
    const double w = 0.5 * (rule.weights(i) + rule.weights(j));
    rule.nodes(i) = -a;
    rule.nodes(j) = a;
    rule.weights(i) = rule.weights(j) = w;
  }
  if (n % 2 == 1) rule.nodes(n / 2) = 0.0;
  rule.weights /= rule.weights.sum();
  return rule;
}

/// Gauss-Legendre rule on [-1, 1].
inline QuadratureRule gauss_legendre_rule(int n) {
  if (n < 1) throw ArgumentError("gauss_legendre_rule: need at least 1 node");
  QuadratureRule rule{Vector(n), Vector(n)};
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double t = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 1.0;
    for (int it = 0; it < 100; ++it) {
      double p0 = 1.0, p1 = t;
      for (int j = 2; j <= n; ++j) {
        const double p2 = ((2.0 * j - 1.0) * t * p1 - (j - 1.0) * p0) / j;
        p0 = p1;
        p1 = p2;
      }
      dp = n * (t * p1 - p0) / (t * t - 1.0);
      const double step = p1 / dp;
      t -= step;
      if (std::abs(step) < 1e-16) break;
    }
    const double w = 2.0 / ((1.0 - t * t) * dp * dp);
    rule.nodes(i) = t;
    rule.nodes(n - 1 - i) = -t;
    rule.weights(i) = rule.weights(n - 1 - i) = w;
  }
  if (n % 2 == 1) rule.nodes(n / 2) = 0.0;
  return rule;
}

namespace detail {

template <typename F>
double checked_eval(const F& f, double z) {
  const double v = f(z);
  if (!std::isfinite(v))
    throw NumericalError("quadrature: non-finite integrand at z = " + std::to_string(z));
  return v;
}

}  // namespace detail

/// E_{z ~ N(0,1)}[f(z)].
///
/// Smooth integrands use an `nodes`-point Gauss-Hermite rule. When `kinks`
/// lists points where f is not smooth (ReLU at 0), Gauss-Hermite converges
/// only algebraically, so the line is split there and each piece is
/// integrated against the Gaussian density with composite Gauss-Legendre
/// panels of `nodes` points on [-40, 40].
template <typename F>
double gauss_hermite_expectation(const F& f, int nodes = 128,
                                 std::span<const double> kinks = {}) {
  if (nodes < 2) throw ArgumentError("gauss_hermite_expectation: nodes must be >= 2");
  if (kinks.empty()) {
    const QuadratureRule rule = gauss_hermite_rule(nodes);
    double acc = 0.0;
    for (int i = 0; i < nodes; ++i) acc += rule.weights(i) * detail::checked_eval(f, rule.nodes(i));
    return acc;
  }
  constexpr double kCut = 40.0;
  constexpr double kPanel = 1.0;
  std::vector<double> edges{-kCut};
  std::vector<double> sorted(kinks.begin(), kinks.end());
  std::sort(sorted.begin(), sorted.end());
  for (double k : sorted)
    if (k > edges.back() && k < kCut) edges.push_back(k);
  edges.push_back(kCut);

  const QuadratureRule gl = gauss_legendre_rule(nodes);
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  double acc = 0.0;
  for (std::size_t e = 0; e + 1 < edges.size(); ++e) {
    const double lo = edges[e], hi = edges[e + 1];
    const int panels = std::max(1, static_cast<int>(std::ceil((hi - lo) / kPanel)));
    const double h = (hi - lo) / panels;
    for (int p = 0; p < panels; ++p) {
      const double a = lo + p * h;
      for (int i = 0; i < nodes; ++i) {
        const double z = a + 0.5 * h * (gl.nodes(i) + 1.0);
        const double dens = inv_sqrt_2pi * std::exp(-0.5 * z * z);
        if (dens == 0.0) continue;
        acc += 0.5 * h * gl.weights(i) * dens * detail::checked_eval(f, z);
      }
    }
  }
  return acc;
}

// ---------------------------------------------------------------------------
// Symmetric eigendecomposition (top-k)
// ---------------------------------------------------------------------------

struct EigenPairs {
  Vector values;   // descending
  Matrix vectors;  // m x k, orthonormal columns
};

inline EigenPairs symmetric_eig_topk(const Matrix& m, Eigen::Index k) {
  if (m.rows() != m.cols()) throw ArgumentError("symmetric_eig_topk: matrix must be square");
  if (k < 1 || k > m.rows())
    throw ArgumentError("symmetric_eig_topk: k must be in [1, " + std::to_string(m.rows()) + "]");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw ArgumentError("symmetric_eig_topk: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(m);
  if (es.info() != Eigen::Success) throw NumericalError("symmetric_eig_topk: eigensolver failed");
  const Eigen::Index n = m.rows();
  EigenPairs out{Vector(k), Matrix(n, k)};
  for (Eigen::Index j = 0; j < k; ++j) {
    out.values(j) = es.eigenvalues()(n - 1 - j);
    out.vectors.col(j) = es.eigenvectors().col(n - 1 - j);
  }
  return out;
}

}  // namespace iclmix
