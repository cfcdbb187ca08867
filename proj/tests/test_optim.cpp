#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "uar/optim.hpp"

using namespace uar;

TEST(AdamW, FirstStepMatchesHandComputation) {
  ag::Parameter p(Matrix::Constant(1, 2, 1.0));
  p.grad = Matrix(1, 2);
  p.grad << 0.5, -2.0;
  std::vector<optim::NamedParameter> params{{"w", &p, true}};
  optim::AdamW adam(optim::AdamW::Options{0.9, 0.999, 1e-8, 0.1});
  adam.step(params, 0.01);
  // Bias-corrected first step moves by lr * g / (|g| + eps) after decay.
  const double decayed = 1.0 * (1.0 - 0.01 * 0.1);
  EXPECT_NEAR(p.value(0, 0), decayed - 0.01 * 0.5 / (0.5 + 1e-8), 1e-12);
  EXPECT_NEAR(p.value(0, 1), decayed + 0.01 * 2.0 / (2.0 + 1e-8), 1e-12);
  EXPECT_EQ(adam.state(&p)->step, 1);
}

TEST(AdamW, NoDecayForExcludedParameters) {
  ag::Parameter p(Matrix::Constant(1, 1, 3.0));
  p.grad = Matrix::Zero(1, 1);
  std::vector<optim::NamedParameter> params{{"b", &p, false}};
  optim::AdamW adam(optim::AdamW::Options{0.9, 0.999, 1e-8, 0.5});
  adam.step(params, 0.1);
  EXPECT_EQ(p.value(0, 0), 3.0);
}

TEST(AdamW, SkipsParametersWithoutGradient) {
  ag::Parameter a(Matrix::Ones(2, 2)), b(Matrix::Ones(2, 2));
  a.grad = Matrix::Ones(2, 2);
  std::vector<optim::NamedParameter> params{{"a", &a, true}, {"b", &b, true}};
  optim::AdamW adam(optim::AdamW::Options{0.9, 0.999, 1e-8, 0.01});
  const Matrix before = b.value;
  adam.step(params, 0.1);
  EXPECT_EQ(b.value, before);
  EXPECT_EQ(adam.state(&b), nullptr);
  // Later arrivals start their own step count.
  b.grad = Matrix::Ones(2, 2);
  adam.step(params, 0.1);
  EXPECT_EQ(adam.state(&a)->step, 2);
  EXPECT_EQ(adam.state(&b)->step, 1);
}

TEST(AdamW, SnapshotRoundTripsByName) {
  ag::Parameter a(Matrix::Ones(2, 3));
  a.grad = Matrix::Constant(2, 3, 0.3);
  std::vector<optim::NamedParameter> params{{"a", &a, true}};
  optim::AdamW adam(optim::AdamW::Options{0.8, 0.99, 1e-7, 0.02});
  adam.step(params, 0.1);
  adam.step(params, 0.1);
  const auto snap = adam.snapshot(params);

  ag::Parameter moved = a;  // same tensor at a different address
  std::vector<optim::NamedParameter> moved_params{{"a", &moved, true}};
  optim::AdamW restored = optim::AdamW::restore(snap, moved_params);
  ASSERT_NE(restored.state(&moved), nullptr);
  EXPECT_EQ(restored.state(&moved)->step, 2);
  EXPECT_EQ(restored.state(&moved)->m, adam.state(&a)->m);
  EXPECT_EQ(restored.options().beta1, 0.8);

  adam.step(params, 0.05);
  restored.step(moved_params, 0.05);
  EXPECT_EQ(moved.value, a.value);
}

TEST(ClipGradNorm, PostClipNormBounded) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 10.0);
  for (int trial = 0; trial < 50; ++trial) {
    ag::Parameter a(Matrix::Zero(3, 4)), b(Matrix::Zero(5, 1));
    a.grad = Matrix(3, 4);
    b.grad = Matrix(5, 1);
    for (Index i = 0; i < a.grad.size(); ++i) a.grad.data()[i] = n(rng);
    for (Index i = 0; i < b.grad.size(); ++i) b.grad.data()[i] = n(rng);
    std::vector<optim::NamedParameter> params{{"a", &a, true}, {"b", &b, true}};
    const double max_norm = 0.1 + trial * 0.5;
    const double before = optim::global_grad_norm(params);
    EXPECT_NEAR(optim::clip_grad_norm(params, max_norm), before, 1e-12);
    EXPECT_LE(optim::global_grad_norm(params), max_norm + 1e-6);
  }
}

TEST(ClipGradNorm, SmallGradientsUntouched) {
  ag::Parameter a(Matrix::Zero(1, 2));
  a.grad = Matrix(1, 2);
  a.grad << 0.3, 0.4;
  std::vector<optim::NamedParameter> params{{"a", &a, true}};
  optim::clip_grad_norm(params, 1.0);
  EXPECT_EQ(a.grad(0, 0), 0.3);
  EXPECT_EQ(a.grad(0, 1), 0.4);
}
