#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "asa/optim.hpp"

using namespace asa;

TEST(Rng, SameSeedSameStream) {
  Rng a(11), b(11);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(Rng, UniformMeanIsCentred) {
  Rng rng(12);
  double acc = 0.0;
  for (int i = 0; i < 10000; ++i) acc += rng.uniform(-1.0, 1.0);
  EXPECT_NEAR(acc / 10000.0, 0.0, 0.01);
}

TEST(Rng, StateRoundTrips) {
  Rng a(13);
  a.uniform();
  Rng b(0);
  b.set_state(a.state());
  EXPECT_EQ(a.uniform(), b.uniform());
}

TEST(Rng, DerivedSeedsSeparateStreams) {
  EXPECT_EQ(derive_seed(1, {2, 3}), derive_seed(1, {2, 3}));
  EXPECT_NE(derive_seed(1, {2, 3}), derive_seed(1, {3, 2}));
  EXPECT_NE(derive_seed(1, {0, 1}), derive_seed(1, {1, 0}));
  EXPECT_NE(derive_seed(1, {2}), derive_seed(2, {2}));
}

TEST(Xavier, RespectsBoundAndIsDeterministic) {
  const auto w = xavier_uniform({64, 16}, 5);
  const double bound = std::sqrt(6.0 / (64.0 + 16.0));
  for (double x : w.data()) EXPECT_LE(std::fabs(x), bound);
  const auto w2 = xavier_uniform({64, 16}, 5);
  EXPECT_TRUE(std::equal(w.data().begin(), w.data().end(), w2.data().begin()));
  EXPECT_THROW(xavier_uniform({4}, 1), ContractViolation);
}

TEST(Schedule, WarmupThenCosine) {
  OptimizerConfig cfg;
  cfg.base_lr = 1e-3;
  cfg.warmup_start_lr = 1e-6;
  cfg.warmup_steps = 10;
  cfg.total_steps = 110;
  EXPECT_DOUBLE_EQ(lr_at(0, cfg), 1e-6);
  EXPECT_DOUBLE_EQ(lr_at(5, cfg), 1e-6 + (1e-3 - 1e-6) * 0.5);
  EXPECT_DOUBLE_EQ(lr_at(10, cfg), 1e-3);
  EXPECT_NEAR(lr_at(60, cfg), 0.5e-3, 1e-18);
  EXPECT_NEAR(lr_at(110, cfg), 0.0, 1e-20);
  for (std::size_t s = 10; s < 110; ++s) EXPECT_GE(lr_at(s, cfg), lr_at(s + 1, cfg));
}

TEST(AdamW, FirstStepMatchesHandComputation) {
  OptimizerConfig cfg;
  cfg.weight_decay = 0.1;
  Tensor w({2, 1}, {1.0, -2.0}, true);
  Tensor b({1}, {0.5}, true);
  std::vector<NamedParameter> params{{"w", w, true}, {"b", b, false}};
  w.zero_grad();
  b.zero_grad();
  w.mutable_grad()[0] = 0.2;
  w.mutable_grad()[1] = -0.4;
  b.mutable_grad()[0] = 1.0;
  AdamState st;
  const double lr = 0.01;
  adamw_step(params, st, cfg, 1, lr);
  // Step 1: mhat = g, vhat = g², update = g / (|g| + eps) = sign(g) up to eps.
  auto expect = [&](double p, double g, bool decay) {
    double out = p - (decay ? lr * cfg.weight_decay * p : 0.0);
    return out - lr * g / (std::fabs(g) + cfg.eps);
  };
  EXPECT_DOUBLE_EQ(w.data()[0], expect(1.0, 0.2, true));
  EXPECT_DOUBLE_EQ(w.data()[1], expect(-2.0, -0.4, true));
  EXPECT_DOUBLE_EQ(b.data()[0], expect(0.5, 1.0, false));
}

TEST(AdamW, MissingGradientIsAContractViolation) {
  Tensor w({2, 2}, {1, 2, 3, 4}, true);
  std::vector<NamedParameter> params{{"w", w, true}};
  AdamState st;
  EXPECT_THROW(adamw_step(params, st, OptimizerConfig{}, 1, 1e-3), ContractViolation);
  w.zero_grad();
  EXPECT_THROW(adamw_step(params, st, OptimizerConfig{}, 0, 1e-3), ContractViolation);
}

TEST(Sgd, NesterovTwoSteps) {
  SgdConfig cfg;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.0;
  Tensor w({1, 1}, {1.0}, true);
  std::vector<NamedParameter> params{{"w", w, true}};
  SgdState st;
  w.zero_grad();
  w.mutable_grad()[0] = 1.0;
  sgd_step(params, st, cfg, 0.1);  // buf = 1, update = 1 + 0.9
  EXPECT_DOUBLE_EQ(w.data()[0], 1.0 - 0.1 * 1.9);
  sgd_step(params, st, cfg, 0.1);  // buf = 1.9, update = 1 + 0.9 * 1.9
  EXPECT_DOUBLE_EQ(w.data()[0], 1.0 - 0.1 * 1.9 - 0.1 * (1.0 + 0.9 * 1.9));
}

TEST(Sgd, PolyDecay) {
  SgdConfig cfg;
  cfg.base_lr = 0.01;
  cfg.total_steps = 100;
  EXPECT_DOUBLE_EQ(poly_lr(0, cfg), 0.01);
  EXPECT_DOUBLE_EQ(poly_lr(50, cfg), 0.01 * std::pow(0.5, 0.9));
  EXPECT_EQ(poly_lr(100, cfg), 0.0);
}
