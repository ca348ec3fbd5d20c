#include <gtest/gtest.h>

#include <cmath>

#include "asa/asa_model.hpp"

using namespace asa;

namespace {

Tensor random(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(shape_numel(s));
  for (auto& x : v) x = rng.uniform(-1, 1);
  return Tensor(s, v);
}

bool rows_equal(const Tensor& a, const Tensor& b, std::size_t row) {
  const std::size_t D = a.dim(1);
  return std::equal(a.data().begin() + row * D, a.data().begin() + (row + 1) * D, b.data().begin() + row * D);
}

ModelConfig tiny() {
  ModelConfig cfg;
  cfg.volume = {16, 16, 16};
  cfg.patch = 4;
  cfg.encoder = {16, 2, 8, 2, 2};
  cfg.decoder = {8, 2, 8, 2, 2};
  return cfg;
}

}  // namespace

TEST(Attention, ConfigValidation) {
  EXPECT_THROW((AttentionConfig{10, 4, 4, 2, 4}).validate(), ContractViolation);  // heads do not divide dim
  EXPECT_THROW((AttentionConfig{8, 2, 4, 3, 4}).validate(), ContractViolation);   // odd depth
  EXPECT_NO_THROW((AttentionConfig{8, 2, 4, 2, 4}).validate());
}

TEST(Attention, LwMsaIsLocalToWindows) {
  const AttentionConfig cfg{8, 2, 4, 2, 2};
  Rng rng(1);
  const auto w = MsaWeights::xavier(cfg.dim, rng);
  const auto x = random({8, 8}, 2);
  auto changed = random({8, 8}, 2);
  changed.mutable_data()[6 * 8 + 3] += 0.5;  // token 6, second window
  const auto a = lw_msa(x, cfg, w), b = lw_msa(changed, cfg, w);
  for (std::size_t r = 0; r < 4; ++r) EXPECT_TRUE(rows_equal(a, b, r));
  EXPECT_FALSE(rows_equal(a, b, 6));
}

TEST(Attention, SlwMsaWindowsStraddleTheLwBoundary) {
  const AttentionConfig cfg{8, 2, 4, 2, 2};
  Rng rng(3);
  const auto w = MsaWeights::xavier(cfg.dim, rng);
  const auto x = random({8, 8}, 4);
  auto changed = random({8, 8}, 4);
  changed.mutable_data()[4 * 8] += 0.5;  // token 4
  const auto a = slw_msa(x, cfg, w), b = slw_msa(changed, cfg, w);
  // Shift 2: windows {2,3,4,5} and {6,7,0,1}.
  EXPECT_FALSE(rows_equal(a, b, 3));
  EXPECT_TRUE(rows_equal(a, b, 0));
  EXPECT_TRUE(rows_equal(a, b, 7));
}

TEST(Attention, MaskedKeysAreIgnored) {
  // Tokens 6 and 7 are padding: rows 4 and 5 must equal attention over {4, 5} alone.
  const AttentionConfig cfg{8, 2, 4, 2, 2};
  Rng rng(5);
  const auto w = MsaWeights::xavier(cfg.dim, rng);
  const auto x = concat_rows({random({6, 8}, 6), random({2, 8}, 60)});
  std::vector<bool> valid(8, true);
  valid[6] = valid[7] = false;
  const auto a = window_attention(x, cfg, w, valid);
  const AttentionConfig pair{8, 2, 2, 2, 2};
  const auto b = window_attention(slice_rows(x, 4, 6), pair, w);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 8; ++c) EXPECT_NEAR(a.data()[(4 + r) * 8 + c], b.data()[r * 8 + c], 1e-14);
}

TEST(Attention, SwVitHandlesRaggedSequences) {
  const AttentionConfig cfg{8, 2, 4, 2, 2};
  Rng rng(5);
  const auto vit = SwVitWeights::xavier(cfg, rng);
  const auto x = random({6, 8}, 6);
  const auto y = swvit_forward(x, cfg, vit);
  EXPECT_EQ(y.shape(), (Shape{6, 8}));
  for (double v : y.data()) EXPECT_TRUE(std::isfinite(v));
  const auto y2 = swvit_forward(x, cfg, vit);
  EXPECT_TRUE(std::equal(y.data().begin(), y.data().end(), y2.data().begin()));
}

TEST(Attention, SwVitRecordsOneTapPerBlock) {
  const AttentionConfig cfg{8, 2, 4, 4, 2};
  Rng rng(7);
  const auto vit = SwVitWeights::xavier(cfg, rng);
  const auto out = swvit_forward_with_taps(random({8, 8}, 8), cfg, vit);
  EXPECT_EQ(out.block_outputs.size(), 4u);
}

TEST(AsaModel, ReconstructionShapeAndParameterNames) {
  const auto model = AsaModel::init(tiny(), 1);
  const auto grid = tiny().grid();
  const auto plan = make_mask_plan(grid.count(), 0.75, 2);
  const auto y = asa_forward(random({grid.count(), grid.patch_voxels()}, 3), plan, model);
  EXPECT_EQ(y.shape(), (Shape{grid.count(), grid.patch_voxels()}));
  bool has_mask_token = false;
  for (const auto& p : model.parameters()) {
    has_mask_token = has_mask_token || p.name == "mask_token";
    EXPECT_EQ(p.decay, p.tensor.rank() > 1) << p.name;
  }
  EXPECT_TRUE(has_mask_token);
}

TEST(AsaModel, OutputIgnoresMaskedPatchContent) {
  const auto model = AsaModel::init(tiny(), 4);
  const auto grid = tiny().grid();
  const auto plan = make_mask_plan(grid.count(), 0.75, 5);
  auto a = random({grid.count(), grid.patch_voxels()}, 6);
  auto b = random({grid.count(), grid.patch_voxels()}, 6);
  for (auto i : plan.masked) b.mutable_data()[i * grid.patch_voxels()] += 3.0;
  const auto ya = asa_forward(a, plan, model), yb = asa_forward(b, plan, model);
  EXPECT_TRUE(std::equal(ya.data().begin(), ya.data().end(), yb.data().begin()));
}

TEST(AsaModel, InitIsSeededAndMaskTokenIsSmall) {
  const auto a = AsaModel::init(tiny(), 9), b = AsaModel::init(tiny(), 9), c = AsaModel::init(tiny(), 10);
  EXPECT_TRUE(std::equal(a.mask_token.data().begin(), a.mask_token.data().end(), b.mask_token.data().begin()));
  EXPECT_FALSE(std::equal(a.mask_token.data().begin(), a.mask_token.data().end(), c.mask_token.data().begin()));
  for (double x : a.mask_token.data()) EXPECT_LT(std::fabs(x), 0.2);
}

TEST(ArLoss, HandExample) {
  std::vector<double> r(3 * 8, 0.0);
  for (std::size_t j = 0; j < 8; ++j) {
    r[j] = 1.0;
    r[8 + j] = 2.0;
  }
  const auto loss = ar_loss(Tensor({3, 8}, r), Tensor::zeros({3, 8}), mask_plan_from(3, {0, 1}),
                            std::vector<double>{0.75, 0.25});
  EXPECT_EQ(loss.item(), 1.75);
}

TEST(ArLoss, ChecksWeights) {
  const auto plan = mask_plan_from(3, {0, 1});
  const auto x = Tensor::zeros({3, 8});
  EXPECT_THROW(ar_loss(x, x, plan, std::vector<double>{1.0}), ContractViolation);
  EXPECT_THROW(ar_loss(x, x, plan, std::vector<double>{0.5, 0.6}), ContractViolation);
}

TEST(ArLoss, VisiblePatchesGetNoGradient) {
  Tensor recon = random({4, 8}, 11);
  recon = Tensor(recon.shape(), {recon.data().begin(), recon.data().end()}, true);
  const auto plan = mask_plan_from(4, {1, 3});
  ar_loss(recon, Tensor::zeros({4, 8}), plan, std::vector<double>{0.5, 0.5}).backward();
  for (std::size_t j = 0; j < 8; ++j) {
    EXPECT_EQ(recon.grad()[0 * 8 + j], 0.0);
    EXPECT_EQ(recon.grad()[2 * 8 + j], 0.0);
    EXPECT_NE(recon.grad()[1 * 8 + j], 0.0);
  }
}

TEST(Pretrainer, LossDecreasesAndRunsAreIdentical) {
  PretrainConfig cfg;
  cfg.model = tiny();
  cfg.optimizer.base_lr = 1e-3;
  cfg.optimizer.total_steps = 30;
  cfg.optimizer.warmup_steps = 2;
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  const std::vector<Volume> batch{gen_phantom(spec)};
  auto run = [&] {
    Pretrainer t(cfg);
    std::vector<double> losses;
    for (std::size_t s = 0; s < 30; ++s) losses.push_back(t.step(batch, s));
    return losses;
  };
  const auto a = run(), b = run();
  EXPECT_EQ(a, b);
  EXPECT_LT(a.back(), a.front());
}

TEST(Pretrainer, UniformAndAttentiveLossesDifferOnTexture) {
  PretrainConfig cfg;
  cfg.model = tiny();
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  const auto v = gen_phantom(spec);
  const auto att = prepare_sample(v, cfg, 0, 0);
  cfg.loss = LossKind::uniform;
  const auto uni = prepare_sample(v, cfg, 0, 0);
  EXPECT_EQ(att.plan.masked, uni.plan.masked);
  EXPECT_NE(att.weights, uni.weights);
  for (double w : uni.weights) EXPECT_EQ(w, 1.0 / static_cast<double>(uni.weights.size()));
}

TEST(Pretrainer, MaskSeedsDependOnStepAndVolume) {
  EXPECT_NE(mask_seed(42, 0, 0), mask_seed(42, 1, 0));
  EXPECT_NE(mask_seed(42, 0, 0), mask_seed(42, 0, 1));
  EXPECT_EQ(mask_seed(42, 3, 2), mask_seed(42, 3, 2));
}
