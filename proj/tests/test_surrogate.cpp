#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "iclmix/surrogate.hpp"

using namespace iclmix;

namespace {

struct Fixture {
  std::vector<Context> stage2;
  std::shared_ptr<const Matrix> f_hat;
};

Fixture make_setup(int d, int n, int k, std::uint64_t seed, double eta = -1.0, int ell = 0) {
  if (ell == 0) ell = d;
  const MixtureSpec mix = MixtureSpec::uniform({preset_source(SourcePreset::isotropic, d, 0.0, SeedPath{})});
  const auto stage1 = sample_batch(mix, ell, n, SeedPath{seed, {1}});
  Fixture s;
  s.stage2 = sample_batch(mix, ell, n, SeedPath{seed, {2}});
  const MlpInit init = initialize_mlp(k, feature_dim(d), calibrate_trace(stage1), SeedPath{seed, {3}});
  s.f_hat = std::make_shared<const Matrix>(one_gradient_step(init, stage1, Activation::relu(), eta < 0 ? double(d) * d : eta));
  return s;
}

}  // namespace

TEST(TrainSurrogate, ExactForPolynomialActivation) {
  const Fixture s = make_setup(4, 120, 30, 1);
  const Activation act = Activation::identity();
  const SurrogateModel sur = train_surrogate(s.f_hat, act, 2, s.stage2, 5e-5, SeedPath{1, {4}});
  EXPECT_EQ(sur.expansion.c_star, 0.0);
  const Vector w = train_second_layer(*s.f_hat, act, s.stage2, 5e-5);
  EXPECT_LE((sur.w_poly - w).norm(), 1e-8 * w.norm());
  EXPECT_EQ(sur.f_hat.get(), s.f_hat.get());
}

TEST(TrainSurrogate, HugeLambdaAndDeterminism) {
  const Fixture s = make_setup(4, 100, 20, 2);
  const auto a = train_surrogate(s.f_hat, Activation::relu(), 4, s.stage2, 1e8, SeedPath{2, {4}});
  EXPECT_LT(a.w_poly.norm(), 1e-6);
  const auto b = train_surrogate(s.f_hat, Activation::relu(), 4, s.stage2, 1e-3, SeedPath{2, {5}});
  const auto c = train_surrogate(s.f_hat, Activation::relu(), 4, s.stage2, 1e-3, SeedPath{2, {5}});
  EXPECT_EQ(b.w_poly, c.w_poly);
  EXPECT_THROW(train_surrogate(s.f_hat, Activation::relu(), 0, s.stage2, 1e-3, SeedPath{}), ArgumentError);
}

TEST(TrainSurrogate, DesignFromPreactivationsMatchesTraining) {
  const Fixture s = make_setup(3, 600, 12, 3);
  const HermiteExpansion e = hermite_coefficients(Activation::relu(), 4);
  const SeedPath seed{3, {9}};
  const Matrix design = surrogate_design(batch_preactivations(*s.f_hat, s.stage2), e, seed);
  const Vector w = ridge_solve(design, query_labels(s.stage2), 1e-3);
  const auto sur = train_surrogate(s.f_hat, Activation::relu(), 4, s.stage2, 1e-3, seed);
  EXPECT_LT((w - sur.w_poly).norm(), 1e-9 * w.norm());
  const Vector batch_pred = predict_surrogate(sur, s.stage2, seed);
  EXPECT_LT((batch_pred - design * sur.w_poly).norm(), 1e-10 * batch_pred.norm());
}

TEST(PredictSurrogate, TrivialCases) {
  const Fixture s = make_setup(3, 50, 10, 4);
  SurrogateModel m;
  m.f_hat = s.f_hat;
  m.expansion = hermite_coefficients(Activation::relu(), 3);
  m.w_poly = Vector::Zero(10);
  const AttnFeatures f = featurize(s.stage2[0]);
  EXPECT_EQ(predict_surrogate(m, f, SeedPath{1, {}}), 0.0);

  m.expansion.c_star = 0.0;
  m.w_poly = Vector::Ones(10);
  EXPECT_EQ(predict_surrogate(m, f, SeedPath{1, {}}), predict_surrogate(m, f, SeedPath{2, {}}));

  m.w_poly = Vector::Ones(11);
  EXPECT_THROW(predict_surrogate(m, f, SeedPath{}), ArgumentError);
}

TEST(PredictSurrogate, ResidualNoiseVariance) {
  const Fixture s = make_setup(3, 50, 40, 5);
  SurrogateModel m;
  m.f_hat = s.f_hat;
  m.expansion = hermite_coefficients(Activation::relu(), 2);
  Rng rng(SeedPath{5, {7}});
  m.w_poly = rng.normal_vector(40);
  const AttnFeatures f = featurize(s.stage2[0]);
  const int reps = 20000;
  double sum = 0, sum2 = 0;
  for (int r = 0; r < reps; ++r) {
    const double v = predict_surrogate(m, f, SeedPath{5, {8, static_cast<std::uint64_t>(r)}});
    sum += v;
    sum2 += v * v;
  }
  const double var = (sum2 - sum * sum / reps) / (reps - 1);
  const double expected = m.expansion.c_star * m.expansion.c_star * m.w_poly.squaredNorm() / 40.0;
  EXPECT_NEAR(var, expected, 0.05 * expected);
}

TEST(Surrogate, TracksMlpErrorOnHeldOutData) {
  // ||h||^2 must concentrate for the equivalence; small d needs long contexts.
  const int d = 24, ell = 4 * d, n = 1200, k = 300;
  const MixtureSpec mix = MixtureSpec::uniform({preset_source(SourcePreset::isotropic, d, 0.0, SeedPath{})});
  double e_mlp = 0, e_sur = 0;
  for (std::uint64_t run = 0; run < 4; ++run) {
    const Fixture s = make_setup(d, n, k, 100 + run, d, ell);
    const auto test = sample_batch(mix, ell, 2000, SeedPath{200 + run, {}});
    const Vector y = query_labels(test);
    MlpModel m{s.f_hat, train_second_layer(*s.f_hat, Activation::relu(), s.stage2, 1e-3), Activation::relu(), d,
               1e-3, 1};
    const auto sur = train_surrogate(s.f_hat, Activation::relu(), 4, s.stage2, 1e-3, SeedPath{300 + run, {}});
    e_mlp += (predict_mlp(m, test) - y).squaredNorm() / 2000.0;
    e_sur += (predict_surrogate(sur, test, SeedPath{400 + run, {}}) - y).squaredNorm() / 2000.0;
  }
  EXPECT_NEAR(e_sur / e_mlp, 1.0, 0.15);
}
