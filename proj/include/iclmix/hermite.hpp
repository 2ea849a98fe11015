#pragma once

// Probabilist's Hermite polynomials, Hermite coefficients of activations and
// the degree-p polynomial-plus-noise surrogate activation.

#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "iclmix/errors.hpp"
#include "iclmix/numerics.hpp"

namespace iclmix {

enum class ActivationKind { relu, tanh, identity, custom };

/// Scalar nonlinearity used both as MLP activation and as target function.
/// Built-ins are dispatched by kind on hot paths; custom ones go through
/// std::function.
class Activation {
 public:
  static Activation relu() { return Activation(ActivationKind::relu, "relu", {0.0}); }
  static Activation tanh() { return Activation(ActivationKind::tanh, "tanh", {}); }
  static Activation identity() { return Activation(ActivationKind::identity, "identity", {}); }

  /// `kinks` lists points where f is not smooth; quadrature splits there.
  static Activation custom(std::string name, std::function<double(double)> f,
                           std::function<double(double)> df,
                           std::vector<double> kinks = {}) {
    if (!f || !df) throw ArgumentError("custom activation needs f and f'");
    Activation a(ActivationKind::custom, std::move(name), std::move(kinks));
    a.f_ = std::move(f);
    a.df_ = std::move(df);
    const double power = gauss_hermite_expectation(
        [&a](double z) { const double v = a.value(z); return v * v; }, 128, a.kinks());
    if (!std::isfinite(power))
      throw ArgumentError("custom activation '" + a.name_ + "' has infinite second moment");
    return a;
  }

  static Activation from_name(std::string_view name) {
    if (name == "relu") return relu();
    if (name == "tanh") return tanh();
    if (name == "identity" || name == "linear") return identity();
    throw ArgumentError("unknown activation '" + std::string(name) +
                        "' (expected relu, tanh or identity)");
  }

  ActivationKind kind() const noexcept { return kind_; }
  const std::string& name() const noexcept { return name_; }
  std::span<const double> kinks() const noexcept { return kinks_; }

  double value(double x) const {
    switch (kind_) {
      case ActivationKind::relu: return x > 0.0 ? x : 0.0;
      case ActivationKind::tanh: return std::tanh(x);
      case ActivationKind::identity: return x;
      case ActivationKind::custom: return f_(x);
    }
    return 0.0;
  }

  double slope(double x) const {
    switch (kind_) {
      case ActivationKind::relu: return x > 0.0 ? 1.0 : 0.0;
      case ActivationKind::tanh: {
        const double t = std::tanh(x);
        return 1.0 - t * t;
      }
      case ActivationKind::identity: return 1.0;
      case ActivationKind::custom: return df_(x);
    }
    return 0.0;
  }

  double operator()(double x) const { return value(x); }

  void apply_inplace(Matrix& m) const {
    switch (kind_) {
      case ActivationKind::relu: m = m.cwiseMax(0.0); break;
      case ActivationKind::tanh: m = m.array().tanh().matrix(); break;
      case ActivationKind::identity: break;
      case ActivationKind::custom: m = m.unaryExpr(f_); break;
    }
  }

  Matrix slope(const Matrix& m) const {
    return m.unaryExpr([this](double x) { return slope(x); });
  }

  bool same_as(const Activation& o) const {
    return kind_ == o.kind_ && name_ == o.name_;
  }

 private:
  Activation(ActivationKind k, std::string name, std::vector<double> kinks)
      : kind_(k), name_(std::move(name)), kinks_(std::move(kinks)) {}

  ActivationKind kind_;
  std::string name_;
  std::vector<double> kinks_;
  std::function<double(double)> f_;
  std::function<double(double)> df_;
};

/// H_j(x) by the three-term recurrence H_{j+1} = x H_j - j H_{j-1}.
inline double hermite_poly(int j, double x) {
  if (j < 0 || j > 64) throw ArgumentError("hermite_poly: degree must be in [0, 64]");
  if (j == 0) return 1.0;
  double prev = 1.0, cur = x;
  for (int i = 1; i < j; ++i) {
    const double next = x * cur - i * prev;
    prev = cur;
    cur = next;
  }
  return cur;
}

/// sigma(x) ~ sum_{i<=p} (c_i / i!) H_i(x) + c_star z.
struct HermiteExpansion {
  int degree = 0;
  std::vector<double> coeffs;  // c_i = E[H_i(z) sigma(z)]
  double c_star = 0.0;
  double total_power = 0.0;    // E[sigma(z)^2]
  std::string activation;

  /// Deterministic part sum_i (c_i / i!) H_i(x).
  double polynomial(double x) const {
    double prev = 0.0, cur = 1.0, fact = 1.0;
    double acc = coeffs.empty() ? 0.0 : coeffs[0];
    for (int i = 1; i <= degree; ++i) {
      const double next = x * cur - (i - 1) * prev;  // H_i from H_{i-1}, H_{i-2}
      prev = cur;
      cur = next;
      fact *= i;
      acc += coeffs[i] / fact * cur;
    }
    return acc;
  }

  /// E[sigma_hat(z)^2] implied by the truncation (matches total_power).
  double implied_power() const {
    double s = c_star * c_star, fact = 1.0;
    for (int i = 0; i <= degree; ++i) {
      if (i > 0) fact *= i;
      s += coeffs[i] * coeffs[i] / fact;
    }
    return s;
  }
};

/// E_{z~N(0,1)}[sigma'(z)], the average slope.
inline double mean_slope(const Activation& act, int nodes = 128) {
  return gauss_hermite_expectation([&act](double z) { return act.slope(z); }, nodes,
                                   act.kinks());
}

namespace detail {

inline HermiteExpansion compute_hermite(const Activation& act, int p, int nodes) {
  HermiteExpansion e;
  e.degree = p;
  e.activation = act.name();
  e.coeffs.resize(p + 1);
  for (int i = 0; i <= p; ++i) {
    e.coeffs[i] = gauss_hermite_expectation(
        [&](double z) { return hermite_poly(i, z) * act.value(z); }, nodes, act.kinks());
  }
  e.total_power = gauss_hermite_expectation(
      [&](double z) { const double v = act.value(z); return v * v; }, nodes, act.kinks());
  double explained = 0.0, fact = 1.0;
  for (int i = 0; i <= p; ++i) {
    if (i > 0) fact *= i;
    explained += e.coeffs[i] * e.coeffs[i] / fact;
  }
  double resid = e.total_power - explained;
  if (!std::isfinite(resid)) throw NumericalError("hermite_coefficients: non-finite quadrature");
  if (resid < 0.0) {
    if (resid < -1e-10)
      throw NumericalError("hermite_coefficients: truncation exceeds E[sigma^2] by " +
                           std::to_string(-resid));
    resid = 0.0;
  }
  e.c_star = std::sqrt(resid);
  return e;
}

}  // namespace detail

/// Coefficients c_0..c_p, residual c_star and E[sigma^2]. Built-in
/// activations are cached per (kind, p, nodes).
inline HermiteExpansion hermite_coefficients(const Activation& act, int p, int nodes = 128) {
  if (p < 0 || p > 16) throw ArgumentError("hermite_coefficients: p must be in [0, 16]");
  if (act.kind() == ActivationKind::custom) return detail::compute_hermite(act, p, nodes);
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, HermiteExpansion> cache;
  const auto key = std::make_tuple(static_cast<int>(act.kind()), p, nodes);
  {
    std::lock_guard<std::mutex> lock(mu);
    if (auto it = cache.find(key); it != cache.end()) return it->second;
  }
  HermiteExpansion e = detail::compute_hermite(act, p, nodes);
  std::lock_guard<std::mutex> lock(mu);
  cache.emplace(key, e);
  return e;
}

/// Elementwise sigma_hat_p with fresh N(0,1) residual noise per entry, drawn
/// in column-major order from `rng`.
inline void surrogate_apply_inplace(const HermiteExpansion& e, Matrix& x, Rng& rng) {
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double v = e.polynomial(x(i, j));
      if (e.c_star > 0.0) v += e.c_star * rng.normal();
      x(i, j) = v;
    }
  }
}

inline Matrix surrogate_apply(const HermiteExpansion& e, const Matrix& x, const SeedPath& seed) {
  if (!x.allFinite()) throw ArgumentError("surrogate_apply: non-finite input");
  Matrix out = x;
  Rng rng(seed);
  surrogate_apply_inplace(e, out, rng);
  return out;
}

}  // namespace iclmix
