#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>

#include "asa/pipeline.hpp"
#include "oracles.hpp"

using namespace asa;

namespace {

std::vector<std::uint8_t> cube(const Dims& d, std::size_t lo, std::size_t hi, std::size_t shift_w = 0) {
  std::vector<std::uint8_t> lab(d.count(), 0);
  for (std::size_t t = lo; t < hi; ++t)
    for (std::size_t h = lo; h < hi; ++h)
      for (std::size_t w = lo; w < hi; ++w) lab[(t * d.h + h) * d.w + w + shift_w] = 1;
  return lab;
}

SegConfig tiny_seg() {
  SegConfig cfg;
  cfg.volume = {16, 16, 16};
  cfg.patch = 4;
  cfg.encoder = {16, 2, 8, 2, 2};
  cfg.bottleneck_channels = 8;
  cfg.mid_channels = 4;
  cfg.out_channels = 4;
  return cfg;
}

}  // namespace

TEST(Dice, HalfOverlapCube) {
  const Dims d{12, 12, 12};
  EXPECT_EQ(dice_metric(cube(d, 2, 6), cube(d, 2, 6, 2), 1), 0.5);
  EXPECT_EQ(dice_metric(cube(d, 2, 6), cube(d, 2, 6), 1), 1.0);
}

TEST(Dice, EmptyConventions) {
  const std::vector<std::uint8_t> zeros(27, 0), one = [] {
    std::vector<std::uint8_t> v(27, 0);
    v[13] = 1;
    return v;
  }();
  EXPECT_EQ(dice_metric(zeros, zeros, 1), 1.0);
  EXPECT_EQ(dice_metric(zeros, one, 1), 0.0);
}

TEST(Hd95, IdenticalMasksHaveZeroDistance) {
  const Dims d{12, 12, 12};
  const auto a = cube(d, 3, 8);
  EXPECT_EQ(hd95_metric(a, a, d, 1), 0.0);
}

TEST(Hd95, ShiftedCubeDistance) {
  const Dims d{12, 12, 12};
  // Surfaces of two 4³ cubes offset by 3 along w.
  EXPECT_DOUBLE_EQ(hd95_metric(cube(d, 2, 6), cube(d, 2, 6, 3), d, 1), oracle::hd95(cube(d, 2, 6), cube(d, 2, 6, 3), d, 1));
  EXPECT_DOUBLE_EQ(hd95_metric(cube(d, 2, 6), cube(d, 2, 6, 3), d, 1), 3.0);
}

TEST(Hd95, EmptyConventions) {
  const Dims d{4, 4, 4};
  const std::vector<std::uint8_t> zeros(d.count(), 0);
  const auto one = cube(d, 1, 3);
  EXPECT_EQ(hd95_metric(zeros, zeros, d, 1), 0.0);
  EXPECT_TRUE(std::isinf(hd95_metric(zeros, one, d, 1)));
  EXPECT_TRUE(std::isinf(hd95_metric(one, zeros, d, 1)));
}

TEST(Hd95, MatchesBruteForceOnRandomMasks) {
  std::mt19937_64 gen(5);
  const Dims d{12, 12, 12};
  for (int k = 0; k < 25; ++k) {
    const auto a = oracle::random_mask(d, gen), b = oracle::random_mask(d, gen);
    const double got = hd95_metric(a, b, d, 1), want = oracle::hd95(a, b, d, 1);
    if (std::isinf(want))
      EXPECT_TRUE(std::isinf(got));
    else
      EXPECT_NEAR(got, want, 1e-9);
    EXPECT_EQ(dice_metric(a, b, 1), oracle::dice(a, b, 1));
  }
}

TEST(Hd95, SurfaceTouchesTheVolumeBorder) {
  const Dims d{3, 3, 3};
  const std::vector<std::uint8_t> full(d.count(), 1);
  const auto s = surface_mask(full, d, 1);
  EXPECT_FALSE(s[13]);  // centre voxel is interior
  EXPECT_TRUE(s[0]);
}

TEST(DistanceTransform, MatchesBruteForce) {
  const Dims d{5, 6, 7};
  std::vector<bool> f(d.count(), false);
  f[3] = f[100] = f[177] = true;
  const auto got = squared_distance_transform(f, d);
  for (std::size_t i = 0; i < d.count(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < d.count(); ++j) {
      if (!f[j]) continue;
      const double dt = double(i / 42) - double(j / 42), dh = double(i / 7 % 6) - double(j / 7 % 6),
                   dw = double(i % 7) - double(j % 7);
      best = std::min(best, dt * dt + dh * dh + dw * dw);
    }
    EXPECT_EQ(got[i], best) << i;
  }
}

TEST(Percentile, NearestRank) {
  std::vector<double> v(20);
  for (std::size_t i = 0; i < 20; ++i) v[i] = static_cast<double>(20 - i);
  EXPECT_EQ(nearest_rank_percentile(v, 95.0), 19.0);
  EXPECT_EQ(nearest_rank_percentile({7.0}, 95.0), 7.0);
  EXPECT_THROW(nearest_rank_percentile({}, 95.0), ContractViolation);
}

TEST(DiceCe, PerfectConfidentPredictionIsNearZero) {
  const std::size_t C = 3, N = 8;
  std::vector<std::uint8_t> labels{0, 1, 2, 1, 0, 0, 2, 1};
  std::vector<double> logits(C * N, -20.0);
  for (std::size_t i = 0; i < N; ++i) logits[labels[i] * N + i] = 20.0;
  const double loss = dice_ce_loss(Tensor({C, 2, 2, 2}, logits), labels).item();
  EXPECT_NEAR(loss, 0.0, 1e-6);
}

TEST(DiceCe, AbsentClassContributesConstantOne) {
  // Class 2 absent from labels and never the argmax: the loss equals CE plus
  // (1 - mean(dice_1, 1)).
  const std::vector<std::uint8_t> labels{0, 1, 0, 1, 0, 0, 0, 1};
  std::vector<double> logits(3 * 8, 0.0);
  for (std::size_t i = 0; i < 8; ++i) {
    logits[labels[i] * 8 + i] = 2.0;
    logits[2 * 8 + i] = -1.0;
  }
  const Tensor x({3, 2, 2, 2}, logits, true);
  const double with_absent = dice_ce_loss(x, labels).item();
  // Reference computed directly.
  double ce = 0.0, inter = 0.0, psum = 0.0;
  for (std::size_t i = 0; i < 8; ++i) {
    const double z = std::exp(logits[i]) + std::exp(logits[8 + i]) + std::exp(logits[16 + i]);
    ce -= std::log(std::exp(logits[labels[i] * 8 + i]) / z) / 8.0;
    const double p1 = std::exp(logits[8 + i]) / z;
    psum += p1;
    inter += labels[i] == 1 ? p1 : 0.0;
  }
  const double dice1 = (2.0 * inter + 1e-5) / (psum + 3.0 + 1e-5);
  EXPECT_NEAR(with_absent, ce + 1.0 - 0.5 * (dice1 + 1.0), 1e-12);
}

TEST(SegModel, LogitShapeAndParameterGroups) {
  const auto model = SegModel::init(tiny_seg(), 1);
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  const auto v = gen_phantom(spec);
  const auto logits = seg_forward(v, model);
  EXPECT_EQ(logits.shape(), (Shape{3, 16, 16, 16}));
  EXPECT_EQ(model.encoder_parameters().size() + model.decoder_parameters().size(), model.parameters().size());
  for (const auto& p : model.encoder_parameters()) EXPECT_EQ(p.name.rfind("encoder.", 0), 0u);
  for (const auto& p : model.decoder_parameters()) EXPECT_EQ(p.name.rfind("seg.", 0), 0u);
}

TEST(Finetuner, FrozenEncoderStaysFixed) {
  FinetuneConfig cfg;
  cfg.model = tiny_seg();
  cfg.freeze_encoder = true;
  cfg.optimizer.base_lr = 1e-3;
  cfg.optimizer.total_steps = 3;
  PhantomSpec spec;
  spec.dims = {16, 16, 16};
  const std::vector<Volume> batch{gen_phantom(spec)};
  Finetuner ft(cfg);
  const auto before = ft.model().encoder_parameters()[0].tensor.detach();
  const auto head_before = ft.model().decoder_parameters()[0].tensor.detach();
  for (std::size_t s = 0; s < 3; ++s) ft.step(batch, s);
  const auto after = ft.model().encoder_parameters()[0].tensor;
  EXPECT_TRUE(std::equal(before.data().begin(), before.data().end(), after.data().begin()));
  const auto head_after = ft.model().decoder_parameters()[0].tensor;
  EXPECT_FALSE(std::equal(head_before.data().begin(), head_before.data().end(), head_after.data().begin()));
}

TEST(Finetuner, EncoderTransferCopiesOnlyEncoderWeights) {
  ModelConfig mc;
  mc.volume = {16, 16, 16};
  mc.patch = 4;
  mc.encoder = tiny_seg().encoder;
  mc.decoder = {8, 2, 8, 2, 2};
  const auto pre = AsaModel::init(mc, 3);
  auto seg = SegModel::init(tiny_seg(), 4);
  const auto dec_before = seg.decoder_parameters()[0].tensor.detach();
  load_encoder_parameters(pre.parameters(), seg.parameters());
  const auto src = pre.encoder.embed.weight.data(), dst = seg.encoder.embed.weight.data();
  EXPECT_TRUE(std::equal(src.begin(), src.end(), dst.begin()));
  const auto dec_after = seg.decoder_parameters()[0].tensor.data();
  EXPECT_TRUE(std::equal(dec_before.data().begin(), dec_before.data().end(), dec_after.begin()));
}

TEST(Pipeline, DatasetsAreDisjointAndSeeded) {
  RunConfig cfg;
  cfg.n_volumes = 2;
  cfg.n_eval_volumes = 1;
  const auto train = training_phantoms(cfg), eval = evaluation_phantoms(cfg);
  EXPECT_NE(train[0], train[1]);
  EXPECT_NE(train[0], eval[0]);
  EXPECT_EQ(training_phantoms(cfg)[1], train[1]);
  std::size_t first = 0;
  const auto batch = cyclic_batch(train, 3, 1, first);
  EXPECT_EQ(first, 3u);
  EXPECT_EQ(batch[0], train[1]);
  EXPECT_EQ(batch[1], train[0]);
}
