#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "iclmix/hermite.hpp"

using namespace iclmix;

namespace {

const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);

double factorial(int n) {
  double f = 1.0;
  for (int i = 2; i <= n; ++i) f *= i;
  return f;
}

// He_n(0): zero for odd n, (-1)^{n/2} (n-1)!! for even n.
double hermite_at_zero(int n) {
  if (n % 2 == 1) return 0.0;
  double v = 1.0;
  for (int k = n - 1; k > 0; k -= 2) v *= k;
  return (n / 2) % 2 == 0 ? v : -v;
}

// E[He_n(z) relu(z)] = He_{n-2}(0) phi(0) for n >= 2.
double relu_coeff(int n) {
  if (n == 0) return kInvSqrt2Pi;
  if (n == 1) return 0.5;
  return hermite_at_zero(n - 2) * kInvSqrt2Pi;
}

Activation square_activation() {
  return Activation::custom("square", [](double x) { return x * x; }, [](double x) { return 2 * x; });
}

}  // namespace

TEST(HermitePoly, LowDegreeValues) {
  EXPECT_DOUBLE_EQ(hermite_poly(2, 0.0), -1.0);
  EXPECT_DOUBLE_EQ(hermite_poly(3, 2.0), 2.0);
  EXPECT_DOUBLE_EQ(hermite_poly(4, 1.0), -2.0);
  EXPECT_DOUBLE_EQ(hermite_poly(0, 7.0), 1.0);
  EXPECT_DOUBLE_EQ(hermite_poly(1, 7.0), 7.0);
}

TEST(HermitePoly, MatchesExplicitPolynomials) {
  for (double x : {-2.5, -0.3, 0.0, 1.1, 3.0}) {
    EXPECT_NEAR(hermite_poly(5, x), std::pow(x, 5) - 10 * std::pow(x, 3) + 15 * x, 1e-10);
    EXPECT_NEAR(hermite_poly(6, x), std::pow(x, 6) - 15 * std::pow(x, 4) + 45 * x * x - 15, 1e-9);
  }
  for (int n = 0; n <= 12; ++n) EXPECT_DOUBLE_EQ(hermite_poly(n, 0.0), hermite_at_zero(n)) << n;
}

TEST(HermitePoly, RejectsDegreeOutOfRange) {
  EXPECT_THROW(hermite_poly(65, 0.0), ArgumentError);
  EXPECT_THROW(hermite_poly(-1, 0.0), ArgumentError);
}

TEST(HermitePoly, Orthogonality) {
  for (int i = 0; i <= 8; ++i) {
    for (int j = 0; j <= 8; ++j) {
      const double v = gauss_hermite_expectation([&](double z) { return hermite_poly(i, z) * hermite_poly(j, z); });
      EXPECT_NEAR(v, i == j ? factorial(i) : 0.0, 1e-8) << i << "," << j;
    }
  }
}

TEST(HermiteCoefficients, ReluClosedForm) {
  const HermiteExpansion e = hermite_coefficients(Activation::relu(), 8);
  ASSERT_EQ(e.coeffs.size(), 9u);
  for (int n = 0; n <= 8; ++n) EXPECT_NEAR(e.coeffs[n], relu_coeff(n), 1e-10) << n;
  EXPECT_NEAR(e.coeffs[0], 0.398942, 1e-6);
  EXPECT_NEAR(e.coeffs[4], -kInvSqrt2Pi, 1e-10);
  EXPECT_NEAR(e.total_power, 0.5, 1e-10);
}

TEST(HermiteCoefficients, ReluResidualAtDegreeOne) {
  const HermiteExpansion e = hermite_coefficients(Activation::relu(), 1);
  EXPECT_NEAR(e.c_star, std::sqrt(0.5 - 0.25 - 1.0 / (2.0 * std::numbers::pi)), 1e-10);
}

TEST(HermiteCoefficients, TanhParityAndSlope) {
  const HermiteExpansion e = hermite_coefficients(Activation::tanh(), 6);
  for (int m = 0; m <= 6; m += 2) EXPECT_LE(std::abs(e.coeffs[m]), 1e-10) << m;
  EXPECT_GT(e.coeffs[1], 0.0);
  // Stein: E[z sigma(z)] = E[sigma'(z)].
  EXPECT_NEAR(e.coeffs[1], mean_slope(Activation::tanh()), 1e-10);
}

TEST(HermiteCoefficients, IdentityIsExact) {
  const HermiteExpansion e = hermite_coefficients(Activation::identity(), 3);
  EXPECT_NEAR(e.coeffs[0], 0.0, 1e-12);
  EXPECT_NEAR(e.coeffs[1], 1.0, 1e-12);
  EXPECT_NEAR(e.coeffs[2], 0.0, 1e-12);
  EXPECT_EQ(e.c_star, 0.0);
}

TEST(HermiteCoefficients, CustomQuadraticActivation) {
  // z^2 = He_2 + 1: c0 = 1, c2 = 2, residual clamped to zero.
  const HermiteExpansion e = hermite_coefficients(square_activation(), 4);
  EXPECT_NEAR(e.coeffs[0], 1.0, 1e-10);
  EXPECT_NEAR(e.coeffs[1], 0.0, 1e-10);
  EXPECT_NEAR(e.coeffs[2], 2.0, 1e-10);
  EXPECT_NEAR(e.total_power, 3.0, 1e-10);
  EXPECT_LT(e.c_star, 1e-4);
}

TEST(HermiteCoefficients, ResidualNonIncreasingInDegree) {
  for (const Activation& act : {Activation::relu(), Activation::tanh()}) {
    double prev = INFINITY;
    for (int p = 0; p <= 10; ++p) {
      const double c = hermite_coefficients(act, p).c_star;
      EXPECT_LE(c, prev + 1e-12) << act.name() << " p=" << p;
      prev = c;
    }
  }
}

TEST(HermiteCoefficients, ImpliedPowerMatchesTotalPower) {
  for (const Activation& act : {Activation::relu(), Activation::tanh(), Activation::identity()}) {
    for (int p = 1; p <= 6; ++p) {
      const HermiteExpansion e = hermite_coefficients(act, p);
      EXPECT_NEAR(e.implied_power(), e.total_power, 1e-10) << act.name() << " p=" << p;
    }
  }
}

TEST(HermiteCoefficients, RejectsBadDegree) {
  EXPECT_THROW(hermite_coefficients(Activation::relu(), 17), ArgumentError);
  EXPECT_THROW(hermite_coefficients(Activation::relu(), -1), ArgumentError);
}

TEST(HermiteCoefficients, NonFiniteQuadratureIsNumericalError) {
  const Activation wild = Activation::custom(
      "wild", [](double z) { return std::abs(z) > 25.0 ? INFINITY : 0.0; }, [](double) { return 0.0; });
  EXPECT_THROW(hermite_coefficients(wild, 2, 256), NumericalError);
}

TEST(Activation, CustomRequiresFiniteSecondMoment) {
  EXPECT_THROW(Activation::custom("exp2", [](double z) { return std::exp(z * z); }, [](double z) {
                 return 2 * z * std::exp(z * z);
               }),
               std::exception);
  EXPECT_THROW(Activation::from_name("softmax"), ArgumentError);
  EXPECT_EQ(Activation::from_name("relu").kind(), ActivationKind::relu);
}

TEST(SurrogateApply, IdentityExpansionIsIdentity) {
  HermiteExpansion e;
  e.degree = 1;
  e.coeffs = {0.0, 1.0};
  e.c_star = 0.0;
  Matrix x(2, 3);
  x << 1, -2, 3, 0.5, 0, -7;
  EXPECT_EQ(surrogate_apply(e, x, SeedPath{1, {}}), x);
}

TEST(SurrogateApply, ReluDeterministicPartAtZero) {
  HermiteExpansion e = hermite_coefficients(Activation::relu(), 4);
  e.c_star = 0.0;
  const double expected = e.coeffs[0] - e.coeffs[2] / 2.0 + e.coeffs[4] / 24.0 * 3.0;
  EXPECT_NEAR(e.polynomial(0.0), expected, 1e-14);
  const Matrix out = surrogate_apply(e, Matrix::Zero(1, 1), SeedPath{1, {}});
  EXPECT_NEAR(out(0, 0), expected, 1e-14);
}

TEST(SurrogateApply, SecondMomentMatchesByMonteCarlo) {
  for (const Activation& act : {Activation::relu(), Activation::tanh()}) {
    for (int p : {1, 4}) {
      const HermiteExpansion e = hermite_coefficients(act, p);
      Rng rng(SeedPath{2, {static_cast<std::uint64_t>(p)}});
      Matrix x(1000, 1000);
      rng.fill_normal(x);
      const Matrix y = surrogate_apply(e, x, SeedPath{3, {static_cast<std::uint64_t>(p)}});
      const double m2 = y.squaredNorm() / static_cast<double>(y.size());
      EXPECT_NEAR(m2, e.total_power, 0.01 * e.total_power) << act.name() << " p=" << p;
    }
  }
}

TEST(SurrogateApply, SeedDeterminesNoise) {
  const HermiteExpansion e = hermite_coefficients(Activation::relu(), 2);
  const Matrix x = Matrix::Constant(4, 4, 0.3);
  EXPECT_EQ(surrogate_apply(e, x, SeedPath{5, {1}}), surrogate_apply(e, x, SeedPath{5, {1}}));
  EXPECT_NE(surrogate_apply(e, x, SeedPath{5, {1}}), surrogate_apply(e, x, SeedPath{5, {2}}));
}

TEST(SurrogateApply, RejectsNonFiniteInput) {
  const HermiteExpansion e = hermite_coefficients(Activation::relu(), 2);
  Matrix x = Matrix::Zero(2, 2);
  x(1, 1) = NAN;
  EXPECT_THROW(surrogate_apply(e, x, SeedPath{}), ArgumentError);
}
