#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "uar/errors.hpp"
#include "uar/lsu.hpp"
#include "uar/trainer.hpp"

using namespace uar;

namespace {

ModelConfig toy_config() {
  ModelConfig c;
  c.width = 16;
  c.heads = 2;
  c.layers = 1;
  c.ffn_width = 32;
  c.dropout = 0.1;
  c.max_text = 12;
  c.max_visual = 16;
  c.visual_vocab = 20;
  return c;
}

// Learnable toy data: the report words are a function of the visual tokens.
std::vector<ModelSample> toy_samples(int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<ModelSample> out;
  for (int i = 0; i < n; ++i) {
    ModelSample s;
    const int a = static_cast<int>(rng() % 3), b = static_cast<int>(rng() % 3);
    for (int j = 0; j < 8; ++j) s.visual_tokens.push_back(j < 4 ? a : 10 + b);
    s.text = {lsu::TextVocabulary::kBos, 4 + a, 7, 4 + b, lsu::TextVocabulary::kEos};
    out.push_back(std::move(s));
  }
  return out;
}

train::TrainingData toy_data() {
  train::TrainingData d;
  d.train = toy_samples(24, 1);
  d.val = toy_samples(6, 2);
  d.generate_on_validation = false;
  return d;
}

train::OptimizerConfig toy_optimizer() {
  train::OptimizerConfig o;
  o.learning_rate = 3e-3;
  o.batch_size = 4;
  o.warmup_steps = 2;
  o.seed = 5;
  return o;
}

std::vector<Matrix> mask_values(UarModel& m) {
  std::vector<Matrix> out;
  for (ag::Parameter* p : m.mask_parameters()) out.push_back(p->value);
  return out;
}

}  // namespace

TEST(TotalLoss, Examples) {
  EXPECT_EQ(train::total_loss({1, 1, 0}, {2, 3, 5}), 5.0);
  EXPECT_EQ(train::total_loss({1, 1, 1}, {2, 3, 5}), 10.0);
  EXPECT_EQ(train::total_loss({0, 0, 0}, {2, 3, 5}), 0.0);
  EXPECT_EQ(train::total_loss({0.5, 2, 0.25}, {2, 3, 4}), 8.0);
}

TEST(Schedule, DefaultsAndValidation) {
  const auto s = train::StageSchedule::two_stage(15, 15);
  ASSERT_EQ(s.stages.size(), 2u);
  EXPECT_EQ(s.stages[0].lambda_mask, 0.0);
  EXPECT_FALSE(s.stages[0].mask_enabled);
  EXPECT_EQ(s.stages[1].lambda_mask, 1.0);
  EXPECT_TRUE(s.stages[1].mask_enabled);
  EXPECT_EQ(s.stages[1].lr_mult, 0.5);
  // Only the mask weight and flag change between the stages.
  EXPECT_EQ(s.stages[0].lambda_ce, s.stages[1].lambda_ce);
  EXPECT_EQ(s.stages[0].lambda_global, s.stages[1].lambda_global);

  EXPECT_THROW(train::StageSchedule{}.validate(), ConfigError);
  auto neg = s;
  neg.stages[0].lambda_global = -1.0;
  EXPECT_THROW(neg.validate(), ConfigError);
  train::OptimizerConfig o;
  o.clip_norm = 0.0;
  EXPECT_THROW(o.validate(), ConfigError);
  o = {};
  o.learning_rate = 0.0;
  EXPECT_THROW(o.validate(), ConfigError);
}

TEST(FiniteDifference, QuadraticIsExact) {
  Eigen::VectorXd theta(3);
  theta << 1, 2, 3;
  const auto f = [](const Eigen::VectorXd& x) { return x.squaredNorm(); };
  const auto r = train::finite_difference_check(f, theta, 2.0 * theta, 1e-6);
  EXPECT_EQ(r.coordinates, 3);
  EXPECT_LE(r.max_relative_error, 1e-8);
  // A wrong gradient is caught.
  EXPECT_GT(train::finite_difference_check(f, theta, 3.0 * theta, 1e-4).max_relative_error, 0.3);
}

TEST(FiniteDifference, NonFiniteAndEpsilonRange) {
  Eigen::VectorXd theta = Eigen::VectorXd::Ones(2);
  const auto nan = [](const Eigen::VectorXd&) { return std::numeric_limits<double>::quiet_NaN(); };
  EXPECT_THROW(train::finite_difference_check(nan, theta, theta, 1e-5), NonFinite);
  // Finite at theta but blowing up at the probe.
  const auto edge = [](const Eigen::VectorXd& x) { return x(0) > 1.0 ? std::numeric_limits<double>::infinity() : 0.0; };
  EXPECT_THROW(train::finite_difference_check(edge, theta, theta, 1e-5), NonFinite);
  const auto f = [](const Eigen::VectorXd& x) { return x.sum(); };
  EXPECT_THROW(train::finite_difference_check(f, theta, theta, 1e-7), ConfigError);
  EXPECT_THROW(train::finite_difference_check(f, theta, theta, 1e-2), ConfigError);

  ag::Parameter p(Matrix::Ones(2, 2));
  std::vector<optim::NamedParameter> params{{"p", &p, true}};
  const auto build_nan = [&](ag::Tape& t) {
    return ag::scale(ag::sum_all(t.parameter(p)), std::numeric_limits<double>::quiet_NaN());
  };
  EXPECT_THROW(train::finite_difference_check(build_nan, params), NonFinite);
}

TEST(FiniteDifference, TapeFormOnSmoothFunction) {
  ag::Parameter p(Matrix::Constant(3, 2, 0.3));
  p.value(1, 1) = -0.7;
  std::vector<optim::NamedParameter> params{{"p", &p, true}};
  const auto build = [&](ag::Tape& t) {
    const ag::Var x = t.parameter(p);
    return ag::sum_all(ag::hadamard(x, x));
  };
  const auto r = train::finite_difference_check(build, params, {1e-5, 50, 3});
  EXPECT_EQ(r.coordinates, 6);
  EXPECT_LE(r.max_relative_error, 1e-8);
}

TEST(TrainTwoStage, SeededRunsAreBitIdentical) {
  auto run = [] {
    auto model = UarModel::initialize(toy_config(), 10, 3);
    auto data = toy_data();
    // 9 epochs of 6 steps: a 54-step run.
    return train::train_two_stage(model, data, train::StageSchedule::two_stage(5, 4), toy_optimizer());
  };
  const auto a = run(), b = run();
  ASSERT_EQ(a.step_losses.size(), 54u);
  EXPECT_EQ(a.step_losses, b.step_losses);
  EXPECT_EQ(a.initial_val_ce, b.initial_val_ce);
  EXPECT_EQ(a.to_json().dump(), b.to_json().dump());
}

TEST(TrainTwoStage, StageOneLeavesMaskBitIdentical) {
  auto model = UarModel::initialize(toy_config(), 10, 4);
  const auto before = mask_values(model);
  auto data = toy_data();
  std::vector<Matrix> at_stage1_end;
  train::TrainHooks hooks;
  hooks.on_stage_end = [&](int stage, const UarModel& m) {
    if (stage != 1) return;
    for (const auto& l : m.transformer.decoder) at_stage1_end.push_back(l.mask.logits.value);
  };
  const auto r = train::train_two_stage(model, data, train::StageSchedule::two_stage(4, 3), toy_optimizer(), hooks);
  ASSERT_EQ(r.mask_after_stage.size(), 2u);
  ASSERT_EQ(at_stage1_end.size(), before.size());
  for (size_t i = 0; i < before.size(); ++i) {
    EXPECT_TRUE((at_stage1_end[i].array() == before[i].array()).all());
    EXPECT_TRUE((r.mask_after_stage[0][i].array() == before[i].array()).all());
    // The mask term drives the logits once it is switched on.
    EXPECT_FALSE((r.mask_after_stage[1][i].array() == before[i].array()).all());
  }
  for (const auto& e : r.epochs) EXPECT_EQ(e.mask != 0.0, e.stage == 2) << "epoch " << e.epoch;
}

TEST(TrainTwoStage, EmptyStageOneIsPureStageTwo) {
  auto model = UarModel::initialize(toy_config(), 10, 6);
  auto data = toy_data();
  const auto r = train::train_two_stage(model, data, train::StageSchedule::two_stage(0, 2), toy_optimizer());
  ASSERT_EQ(r.epochs.size(), 2u);
  for (const auto& e : r.epochs) {
    EXPECT_EQ(e.stage, 2);
    EXPECT_GT(e.mask, 0.0);
  }
}

TEST(TrainTwoStage, LearnsToyData) {
  auto model = UarModel::initialize(toy_config(), 10, 7);
  auto data = toy_data();
  const auto r = train::train_two_stage(model, data, train::StageSchedule::two_stage(8, 0), toy_optimizer());
  ASSERT_EQ(r.epochs.size(), 8u);
  EXPECT_LT(r.epochs.back().val_ce, r.initial_val_ce);
  EXPECT_LT(r.epochs.back().ce, r.epochs.front().ce);
  for (double l : r.step_losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(TrainTwoStage, SelectsBestValidationBleu) {
  auto model = UarModel::initialize(toy_config(), 10, 8);
  auto data = toy_data();
  lsu::TextVocabulary vocab = lsu::build_vocabulary({{"a", "b", "c", "of", "x", "y"}}, 0);
  ASSERT_EQ(vocab.size(), 10);
  for (const auto& s : data.val) data.val_references.push_back(vocab.decode(s.text));
  data.vocab = &vocab;
  data.max_len = 8;
  data.generate_on_validation = true;
  int best_calls = 0;
  train::TrainHooks hooks;
  hooks.on_best = [&](const UarModel&, const train::EpochLog&) { ++best_calls; };
  const auto r = train::train_two_stage(model, data, train::StageSchedule::two_stage(3, 2), toy_optimizer(), hooks);
  double best = -1.0;
  int best_epoch = 0;
  for (const auto& e : r.epochs) {
    if (e.val_metrics.bleu[3] > best) {
      best = e.val_metrics.bleu[3];
      best_epoch = e.epoch;
    }
  }
  EXPECT_EQ(r.best_val_bleu4, best);
  EXPECT_EQ(r.best_epoch, best_epoch);
  EXPECT_GE(best_calls, 1);
  // The returned model is the selected one.
  const auto cands = train::generate_reports(model, data.val, &vocab, 8, 1);
  EXPECT_EQ(eval::evaluate(cands, data.val_references).bleu[3], best);
}

TEST(TrainTwoStage, RejectsBadInputs) {
  auto model = UarModel::initialize(toy_config(), 10, 9);
  auto data = toy_data();
  EXPECT_THROW(train::train_two_stage(model, data, train::StageSchedule{}, toy_optimizer()), ConfigError);
  data.train.clear();
  EXPECT_THROW(train::train_two_stage(model, data, train::StageSchedule::two_stage(1, 1), toy_optimizer()),
               EmptyCorpus);
}
