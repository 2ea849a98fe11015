#include <gtest/gtest.h>

#include <cmath>
#include <memory>

#include "iclmix/attention.hpp"
#include "iclmix/mlp.hpp"

using namespace iclmix;

namespace {

MixtureSpec isotropic_mix(int d) {
  return MixtureSpec::uniform({preset_source(SourcePreset::isotropic, d, 0.0, SeedPath{})});
}

MixtureSpec spiked_task_mix(int d) {
  return MixtureSpec::uniform({preset_source(SourcePreset::isotropic, d, 0.0, SeedPath{}),
                               preset_source(SourcePreset::spiked_task, d, double(d) * d, SeedPath{1, {}})});
}

// (1/(2n)) sum_j (y_j - w^T sigma(F h_j) / sqrt(k))^2
double squared_loss(const Matrix& F, const Vector& w, const Matrix& h, const Vector& y, const Activation& act) {
  Matrix pre = F * h.transpose();
  act.apply_inplace(pre);
  const Vector y_hat = pre.transpose() * w / std::sqrt(static_cast<double>(F.rows()));
  return (y - y_hat).squaredNorm() / (2.0 * static_cast<double>(y.size()));
}

Context scalar_context(double x1, double x2, double xq, double y1, double y2, double yq) {
  Context c;
  c.d = 1;
  c.ell = 2;
  c.inputs.resize(1, 3);
  c.inputs << x1, x2, xq;
  c.labels.resize(3);
  c.labels << y1, y2, yq;
  return c;
}

}  // namespace

TEST(InitializeMlp, VariancesFollowTrace) {
  const MlpInit init = initialize_mlp(300, 400, 25.0, SeedPath{1, {}});
  ASSERT_EQ(init.F.rows(), 300);
  ASSERT_EQ(init.F.cols(), 400);
  const double var_f = init.F.squaredNorm() / static_cast<double>(init.F.size());
  EXPECT_NEAR(var_f, 1.0 / 25.0, 0.02 / 25.0);
  EXPECT_NEAR(init.w0.squaredNorm(), 1.0, 0.3);
  EXPECT_THROW(initialize_mlp(3, 3, 0.0, SeedPath{}), ArgumentError);
  EXPECT_EQ(initialize_mlp(4, 5, 2.0, SeedPath{2, {}}).F, initialize_mlp(4, 5, 2.0, SeedPath{2, {}}).F);
}

TEST(CalibrateTrace, MatchesSmallCaseOracle) {
  // d = 1, x ~ N(0,1), y = 1: b = (mean x, 1), ||h||^2 = (xbar^2 + 1) x_q^2,
  // so E||h||^2 = 1 + 1 / ell.
  SourceSpec s = preset_source(SourcePreset::isotropic, 1, 0.0, SeedPath{});
  s.target = Activation::custom("one", [](double) { return 1.0; }, [](double) { return 0.0; });
  s.noise_std = 0.0;
  const MixtureSpec mix = MixtureSpec::uniform({s});
  const double t = calibrate_trace(mix, 4, 100000, SeedPath{3, {}});
  EXPECT_NEAR(t, 1.25, 0.03);
}

TEST(CalibrateTrace, DegenerateLabelsRaise) {
  SourceSpec s = preset_source(SourcePreset::isotropic, 3, 0.0, SeedPath{});
  s.target = Activation::custom("zero", [](double) { return 0.0; }, [](double) { return 0.0; });
  s.noise_std = 0.0;
  EXPECT_THROW(calibrate_trace(MixtureSpec::uniform({s}), 4, 32, SeedPath{}), NumericalError);
  EXPECT_THROW(calibrate_trace(MixtureSpec::uniform({s}), 4, 8, SeedPath{}), ArgumentError);
}

TEST(CalibrateTrace, GrowsLinearlyInDimension) {
  const double t32 = calibrate_trace(isotropic_mix(32), 32, 512, SeedPath{4, {32}});
  const double t64 = calibrate_trace(isotropic_mix(64), 64, 512, SeedPath{4, {64}});
  const double r32 = t32 / 32.0, r64 = t64 / 64.0;
  EXPECT_NEAR(r64 / r32, 1.0, 0.1);
}

TEST(OneGradientStep, ZeroStepAndZeroWeights) {
  const auto batch = sample_batch(isotropic_mix(3), 4, 10, SeedPath{5, {}});
  MlpInit init = initialize_mlp(6, feature_dim(3), 2.0, SeedPath{5, {1}});
  EXPECT_EQ(one_gradient_step(init, batch, Activation::relu(), 0.0), init.F);
  init.w0.setZero();
  EXPECT_EQ(first_layer_gradient(init.F, init.w0, batch, Activation::relu()).norm(), 0.0);
  EXPECT_THROW(one_gradient_step(init, batch, Activation::relu(), -1.0), ArgumentError);
}

TEST(OneGradientStep, MatchesFiniteDifferenceOfSquaredLoss) {
  // k = 2, D = 2 (d = 1), n = 1, tanh: G = -dL/dF.
  const std::vector<Context> batch{scalar_context(0.7, -1.3, 0.9, 0.4, -0.8, 0.3)};
  const Activation act = Activation::tanh();
  const MlpInit init = initialize_mlp(2, 2, 1.0, SeedPath{6, {}});
  const Matrix g = first_layer_gradient(init.F, init.w0, batch, act);
  const Matrix h = feature_matrix(batch);
  const Vector y = query_labels(batch);
  const double eps = 1e-6;
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 2; ++j) {
      Matrix fp = init.F, fm = init.F;
      fp(i, j) += eps;
      fm(i, j) -= eps;
      const double fd = (squared_loss(fp, init.w0, h, y, act) - squared_loss(fm, init.w0, h, y, act)) / (2 * eps);
      EXPECT_NEAR(g(i, j), -fd, 1e-6) << i << "," << j;
    }
  }
}

TEST(OneGradientStep, MatchesFiniteDifferenceOnLargerBatch) {
  const auto batch = sample_batch(isotropic_mix(2), 3, 300, SeedPath{7, {}});
  const Activation act = Activation::tanh();
  const MlpInit init = initialize_mlp(5, feature_dim(2), 1.5, SeedPath{7, {1}});
  const Matrix g = first_layer_gradient(init.F, init.w0, batch, act);
  const Matrix h = feature_matrix(batch);
  const Vector y = query_labels(batch);
  const double eps = 1e-6;
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 6; ++j) {
      Matrix fp = init.F, fm = init.F;
      fp(i, j) += eps;
      fm(i, j) -= eps;
      const double fd = (squared_loss(fp, init.w0, h, y, act) - squared_loss(fm, init.w0, h, y, act)) / (2 * eps);
      EXPECT_NEAR(g(i, j), -fd, 1e-7);
    }
  }
  const Matrix f_hat = one_gradient_step(init, batch, act, 3.0);
  EXPECT_LT((f_hat - init.F - 3.0 * g).norm(), 1e-12);
}

TEST(SecondLayer, ShrinksAndFits) {
  const int d = 4;
  const auto stage1 = sample_batch(isotropic_mix(d), 8, 200, SeedPath{8, {1}});
  const auto stage2 = sample_batch(isotropic_mix(d), 8, 200, SeedPath{8, {2}});
  const double t = calibrate_trace(stage1);
  const MlpInit init = initialize_mlp(200, feature_dim(d), t, SeedPath{8, {3}});
  const Matrix f_hat = one_gradient_step(init, stage1, Activation::relu(), 16.0);

  EXPECT_LT(train_second_layer(f_hat, Activation::relu(), stage2, 1e8).norm(), 1e-6);

  const Vector w = train_second_layer(f_hat, Activation::relu(), stage2, 5e-5);
  EXPECT_EQ(w, train_second_layer(f_hat, Activation::relu(), stage2, 5e-5));
  MlpModel m{std::make_shared<const Matrix>(f_hat), w, Activation::relu(), 16.0, 5e-5, t};
  const Vector y = query_labels(stage2);
  const double var = (y.array() - y.mean()).square().mean();
  EXPECT_LT((predict_mlp(m, stage2) - y).squaredNorm() / 200.0, var);

  // Batch prediction agrees with the single-context path.
  for (int j = 0; j < 5; ++j) EXPECT_NEAR(predict_mlp(m, featurize(stage2[j])), predict_mlp(m, stage2)(j), 1e-12);
  const Matrix design = mlp_design(batch_preactivations(f_hat, stage2), Activation::relu());
  EXPECT_LT((design - hidden_features(f_hat, Activation::relu(), stage2, 0, 200)).norm(), 1e-12);
}

TEST(PredictMlp, TrivialCases) {
  Context c = scalar_context(1, 2, 3, 1, -1, 0);
  const AttnFeatures f = featurize(c);  // h = (-1.5, 3)
  Matrix row(1, 2);
  row << 1, 0;
  MlpModel m{std::make_shared<const Matrix>(row), Vector::Constant(1, 2.0), Activation::identity(), 0, 0, 1};
  EXPECT_DOUBLE_EQ(predict_mlp(m, f), -3.0);
  m.w_hat.setZero();
  EXPECT_EQ(predict_mlp(m, f), 0.0);
  m.f_hat = std::make_shared<const Matrix>(Matrix::Ones(1, 3));
  EXPECT_THROW(predict_mlp(m, f), ArgumentError);
}

TEST(PredictMlp, ErrorAboveNoiseFloor) {
  const int d = 6;
  SourceSpec s = preset_source(SourcePreset::noisy, d, 0.3, SeedPath{});
  const MixtureSpec mix = MixtureSpec::uniform({s});
  const auto stage1 = sample_batch(mix, 6, 300, SeedPath{9, {1}});
  const auto stage2 = sample_batch(mix, 6, 300, SeedPath{9, {2}});
  const auto test = sample_batch(mix, 6, 2000, SeedPath{9, {3}});
  const double t = calibrate_trace(stage1);
  const MlpInit init = initialize_mlp(100, feature_dim(d), t, SeedPath{9, {4}});
  const auto f_hat = std::make_shared<const Matrix>(one_gradient_step(init, stage1, Activation::relu(), 36.0));
  MlpModel m{f_hat, train_second_layer(*f_hat, Activation::relu(), stage2, 1e-3), Activation::relu(), 36, 1e-3, t};
  const double err = (predict_mlp(m, test) - query_labels(test)).squaredNorm() / 2000.0;
  EXPECT_TRUE(std::isfinite(err));
  EXPECT_GE(err, 0.09 * 0.9);
}

TEST(Preactivations, GaussianScaleMixtureAtInit) {
  // F h | h ~ N(0, ||h||^2 / t_hat): unit variance on average, excess
  // kurtosis 3 CoV^2(||h||^2) when pooled over contexts.
  const int d = 64, contexts = 400;
  const auto calib = sample_batch(isotropic_mix(d), d, 512, SeedPath{10, {0}});
  const auto batch = sample_batch(isotropic_mix(d), d, contexts, SeedPath{10, {1}});
  const double t = calibrate_trace(calib);
  const MlpInit init = initialize_mlp(64, feature_dim(d), t, SeedPath{10, {2}});
  Matrix pre = batch_preactivations(init.F, batch);
  const Eigen::ArrayXd v = Eigen::Map<const Eigen::ArrayXd>(pre.data(), pre.size());
  const double mean = v.mean();
  const double var = (v - mean).square().mean();
  const double kurt = (v - mean).pow(4).mean() / (var * var) - 3.0;
  Eigen::ArrayXd norms(contexts);
  for (int j = 0; j < contexts; ++j) norms(j) = feature_matrix(std::span(&batch[j], 1)).squaredNorm() / t;
  const double cov2 = (norms - norms.mean()).square().mean() / (norms.mean() * norms.mean());
  EXPECT_LE(std::abs(mean), 0.05);
  EXPECT_LE(std::abs(var - 1.0), 0.1);
  EXPECT_NEAR(kurt, 3.0 * cov2, 0.25);

  for (int j = 0; j < contexts; ++j) pre.col(j) /= std::sqrt(norms(j));
  const Eigen::ArrayXd z = Eigen::Map<const Eigen::ArrayXd>(pre.data(), pre.size());
  EXPECT_NEAR(z.square().mean(), 1.0, 0.05);
  EXPECT_NEAR(z.pow(4).mean() / std::pow(z.square().mean(), 2) - 3.0, 0.0, 0.2);
}

TEST(StageLineage, RejectsSharedPrefixes) {
  const SeedPath run{1, {4, 2}};
  EXPECT_NO_THROW(check_stage_lineage(run.child(2), run.child(3)));
  EXPECT_THROW(check_stage_lineage(run.child(2), run.child(2)), ArgumentError);
  EXPECT_THROW(check_stage_lineage(run, run.child(3)), ArgumentError);
  EXPECT_NO_THROW(check_stage_lineage(SeedPath{1, {2}}, SeedPath{2, {2}}));
}

TEST(GradientSpike, SpikeDominatesAtModerateDimension) {
  // ||G - u v^T|| / ||u v^T|| with u = alpha w0, v = H^T y / (n sqrt(k)).
  auto ratio = [](int d) {
    const MixtureSpec mix = spiked_task_mix(d);
    const int n = d * d / 2, k = d * d / 2;
    const auto stage1 = sample_batch(mix, d, n, SeedPath{11, {static_cast<std::uint64_t>(d), 1}});
    const double t = calibrate_trace(mix, d, 256, SeedPath{11, {static_cast<std::uint64_t>(d), 0}});
    const MlpInit init = initialize_mlp(k, feature_dim(d), t, SeedPath{11, {static_cast<std::uint64_t>(d), 2}});
    const Matrix g = first_layer_gradient(init.F, init.w0, stage1, Activation::relu());
    const Vector u = 0.5 * init.w0;
    const Vector v = feature_matrix(stage1).transpose() * query_labels(stage1) / (n * std::sqrt(double(k)));
    const Matrix spike = u * v.transpose();
    return operator_norm(g - spike) / operator_norm(spike);
  };
  const double r16 = ratio(16), r32 = ratio(32);
  EXPECT_LT(r32, 1.0);
  EXPECT_LT(r32, r16);
}
