// Copyright 2026 The CHiP Authors
// SPDX-License-Identifier: Apache-2.0

#include <chip/synthetic.hpp>
#include <chip/trainer.hpp>

#include <cmath>

#include <gtest/gtest.h>

using namespace chip;

namespace {

ModelConfig small_model(std::uint64_t seed = 1) {
  ModelConfig mc;
  mc.hidden_dim = 16;
  mc.layer_count = 1;
  mc.image_side = 8;
  mc.patch_side = 4;
  mc.seed = seed;
  return mc;
}

std::vector<PreferenceSample> small_data(const ModelConfig& mc, std::size_t n = 8) {
  SyntheticOptions so;
  so.sample_count = n;
  so.class_count = 4;
  so.image_side = mc.image_side;
  so.patch_side = mc.patch_side;
  so.channels = mc.channels;
  DatasetOptions o;
  o.image_side = mc.image_side;
  o.channels = mc.channels;
  return synthetic_dataset(so, o).samples;
}

ChipConfig small_chip(std::size_t steps, std::size_t batch = 4) {
  ChipConfig c;
  c.lambda_seg = 3.0;
  c.train.steps = steps;
  c.train.batch_size = batch;
  c.train.learning_rate = 1e-3;
  return c;
}

bool same_weights(const ModelParams& a, const ModelParams& b) {
  if (a.weights.size() != b.weights.size()) return false;
  for (const auto& [name, t] : a.weights) {
    auto v = t.values();
    auto w = b.weights.at(name).values();
    if (!std::equal(v.begin(), v.end(), w.begin(), w.end())) return false;
  }
  return true;
}

}  // namespace

TEST(Adam, ZeroGradientLeavesParameters) {
  TrainState st = make_train_state(init_model(small_model(), 1));
  GradientsByName g;
  for (const auto& [name, t] : st.policy.weights) g[name].assign(t.size(), 0.0);
  const ModelParams before = st.policy;
  adam_step(st, g, TrainerSettings{});
  EXPECT_EQ(st.step, 1u);
  EXPECT_TRUE(same_weights(before, st.policy));
}

TEST(Adam, FirstStepMovesByLearningRate) {
  TrainState st = make_train_state(init_model(small_model(), 1));
  const std::string name = st.policy.weights.begin()->first;
  GradientsByName g;
  g[name].assign(st.policy.weights.at(name).size(), 0.0);
  g[name][0] = 1.0;
  g[name][1] = -2.0;
  const double x0 = st.policy.weights.at(name).values()[0];
  const double x1 = st.policy.weights.at(name).values()[1];
  TrainerSettings s;
  s.learning_rate = 0.01;
  adam_step(st, g, s);
  // Bias correction makes the first update lr * g / (|g| + eps).
  EXPECT_NEAR(st.policy.weights.at(name).values()[0] - x0, -0.01, 1e-9);
  EXPECT_NEAR(st.policy.weights.at(name).values()[1] - x1, 0.01, 1e-9);
}

TEST(Adam, FreezeVision) {
  TrainState st = make_train_state(init_model(small_model(), 1));
  GradientsByName g;
  for (const auto& [name, t] : st.policy.weights) g[name].assign(t.size(), 0.5);
  const ModelParams before = st.policy;
  TrainerSettings s;
  s.freeze_vision = true;
  adam_step(st, g, s);
  std::size_t vision = 0;
  for (const auto& [name, t] : st.policy.weights) {
    auto v = t.values();
    auto w = before.weights.at(name).values();
    if (is_vision_parameter(name)) {
      ++vision;
      EXPECT_TRUE(std::equal(v.begin(), v.end(), w.begin(), w.end())) << name;
    } else {
      EXPECT_NE(v[0], w[0]) << name;
    }
  }
  EXPECT_GE(vision, 2u);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  TrainState st = make_train_state(init_model(small_model(), 1));
  const std::string name = st.policy.weights.rbegin()->first;
  GradientsByName g;
  g[name].assign(st.policy.weights.at(name).size(), 0.0);
  g[name][0] = std::nan("");
  try {
    adam_step(st, g, TrainerSettings{});
    FAIL();
  } catch (const numeric_error& e) {
    EXPECT_NE(std::string(e.what()).find(name), std::string::npos);
  }
}

TEST(Adam, ClipGlobalNorm) {
  GradientsByName g{{"a", {3.0}}, {"b", {4.0}}};
  clip_global_norm(g, 1.0);
  EXPECT_NEAR(g["a"][0], 0.6, 1e-15);
  EXPECT_NEAR(g["b"][0], 0.8, 1e-15);
  clip_global_norm(g, 2.0);
  EXPECT_NEAR(g["a"][0], 0.6, 1e-15);
}

TEST(MarginAccuracy, TiesCountHalf) {
  std::vector<double> m{1.0, -1.0, 0.0, 2.0};
  EXPECT_DOUBLE_EQ(margin_accuracy(m), 0.625);
  EXPECT_EQ(margin_accuracy(std::vector<double>{}), 0.0);
}

TEST(Train, ZeroStepsKeepsInitialization) {
  ModelConfig mc = small_model();
  TrainResult r = train(small_chip(0), mc, small_data(mc));
  EXPECT_TRUE(r.metrics.empty());
  EXPECT_TRUE(same_weights(r.policy, init_model(mc, mc.seed)));
  EXPECT_EQ(r.reference.role, Role::reference);
}

TEST(Train, StepZeroMetricsAtEqualPolicy) {
  ModelConfig mc = small_model();
  TrainResult r = train(small_chip(1), mc, small_data(mc));
  ASSERT_EQ(r.metrics.size(), 1u);
  const StepMetrics& m = r.metrics[0];
  EXPECT_EQ(m.step, 0u);
  EXPECT_EQ(m.margin_accuracy, 0.5);
  EXPECT_NEAR(m.loss_response, std::log(2.0), 1e-12);
  EXPECT_NEAR(m.loss_visual, std::log(2.0), 1e-12);
  EXPECT_NEAR(m.loss_segment, std::log(2.0), 1e-12);
  EXPECT_NEAR(m.loss_token, 0.0, 1e-12);
}

TEST(Train, OneStepRaisesTheMargin) {
  ModelConfig mc = small_model();
  auto data = small_data(mc, 1);
  ChipConfig c = small_chip(1, 1);
  TrainResult r = train(c, mc, data);
  EvalReport after = evaluate(r.policy, r.reference, data, c);
  EXPECT_GT(after.margin_text, 0.0);
  EXPECT_GT(after.margin_visual, 0.0);
  EXPECT_LT(after.total, r.metrics[0].total);
}

TEST(Train, ReferenceFrozenAndRunsDeterministic) {
  ModelConfig mc = small_model();
  auto data = small_data(mc);
  ChipConfig c = small_chip(4);
  TrainResult a = train(c, mc, data), b = train(c, mc, data);
  EXPECT_TRUE(same_weights(a.reference, init_model(mc, mc.seed)));
  EXPECT_TRUE(same_weights(a.policy, b.policy));
  ASSERT_EQ(a.metrics.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(a.metrics[i].total, b.metrics[i].total);
  EXPECT_FALSE(same_weights(a.policy, a.reference));
}

TEST(Train, DataSeedChangesOrder) {
  ModelConfig mc = small_model();
  auto data = small_data(mc);
  ChipConfig c = small_chip(2);
  ChipConfig d = c;
  d.train.data_seed = 9;
  EXPECT_FALSE(same_weights(train(c, mc, data).policy, train(d, mc, data).policy));
}

TEST(Train, EpochsWhenStepsUnset) {
  ModelConfig mc = small_model();
  ChipConfig c = small_chip(0, 3);
  c.train.steps.reset();
  c.train.epochs = 2;
  EXPECT_EQ(train(c, mc, small_data(mc)).metrics.size(), 6u);
}

TEST(Train, Errors) {
  ModelConfig mc = small_model();
  EXPECT_THROW(train(small_chip(1), mc, {}), std::invalid_argument);
  ChipConfig c = small_chip(1);
  c.train.learning_rate = 0;
  EXPECT_THROW(train(c, mc, small_data(mc)), std::invalid_argument);
}

TEST(GradCheck, QuadraticIsExact) {
  auto f = [](std::span<const double> x) { return 3 * x[0] * x[0] + x[0] * x[1] - 2 * x[1] * x[1]; };
  std::vector<double> x{0.7, -1.3};
  std::vector<double> g{6 * x[0] + x[1], x[0] - 4 * x[1]};
  std::size_t coords[] = {0, 1};
  for (const auto& p : check_gradient(f, x, g, coords, 1e-4)) EXPECT_LT(p.rel_error, 1e-8);
  EXPECT_NEAR(relative_error(1.0, 1.1), 0.1 / 1.1, 1e-15);
  EXPECT_DOUBLE_EQ(relative_error(0.0, 1e-9), 1e-3);
}

TEST(GradCheck, FullLossMatchesFiniteDifferences) {
  ModelConfig mc = small_model(2);
  auto data = small_data(mc, 2);
  ChipConfig c = small_chip(1);
  GradCheckReport r = grad_check(c, mc, data[1], {}, 1e-5, 1e-4, 20, 3);
  EXPECT_EQ(r.probes.size(), 20u);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_EQ(r.sg_analytic_max_abs, 0.0);
  EXPECT_GT(r.sg_argument_fd_max_abs, 0.0);
  EXPECT_TRUE(r.passed);
  GradCheckReport v = grad_check(c, mc, data[0], {"vision."}, 1e-5, 1e-4, 10, 4);
  for (const auto& p : v.probes) EXPECT_EQ(p.parameter.rfind("vision.", 0), 0u);
  EXPECT_TRUE(v.passed);
}

TEST(GradCheck, Errors) {
  ModelConfig mc = small_model();
  auto data = small_data(mc, 1);
  EXPECT_THROW(grad_check(ChipConfig{}, mc, data[0], {}, 0.0, 1e-4), std::invalid_argument);
  EXPECT_THROW(grad_check(ChipConfig{}, mc, data[0], {"nope."}, 1e-5, 1e-4), std::invalid_argument);
}

TEST(Config, Validation) {
  ChipConfig c;
  EXPECT_NO_THROW(c.validate());
  c.beta = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ChipConfig{};
  c.lambda_seg = -1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ChipConfig{};
  c.train.batch_size = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ChipConfig{};
  c.train.adam_beta2 = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = ChipConfig{};
  c.corruption.noise_step = 0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Config, JsonRoundTrip) {
  ChipConfig c;
  c.lambda_seg = 2.5;
  c.objective = Objective::hdpo;
  c.token_variant = TokenVariant::sigmoid;
  c.train.steps = 17;
  c.corruption.strategy = CorruptionStrategy::crop;
  nlohmann::json j = c;
  ChipConfig d = j.get<ChipConfig>();
  EXPECT_EQ(nlohmann::json(d), j);
  EXPECT_EQ(d.train.steps, std::optional<std::size_t>(17));
}
