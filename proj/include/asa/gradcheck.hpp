#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "asa/asa_model.hpp"
#include "asa/ops.hpp"
#include "asa/segmentation.hpp"

// Central finite-difference verification of reverse-mode gradients.

namespace asa {

struct GradCheckResult {
  std::string name;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::size_t entries = 0;
  bool passed = false;
};

struct GradCheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-4;
  // Below this magnitude the error is measured absolutely instead of relative
  // to the gradient size. One ulp of an O(10) probe divided by 2*eps is ~1e-10,
  // so smaller gradients are indistinguishable from differencing noise.
  double magnitude_floor = 1e-5;
  // Entries checked per input; inputs with more entries are sampled.
  std::size_t max_entries = std::numeric_limits<std::size_t>::max();
  std::uint64_t seed = 7;
};

/// |a - n| / max(|a|, |n|, floor).
inline double gradient_error(double analytic, double numeric, double floor) {
  return std::fabs(analytic - numeric) / std::max({std::fabs(analytic), std::fabs(numeric), floor});
}

/// Compares d f / d input from backward() with central differences for every
/// (sampled) entry of every input. `f` must rebuild its graph on each call.
inline GradCheckResult check_gradients(const std::string& name, const std::function<Tensor()>& f,
                                       std::vector<Tensor> inputs, const GradCheckOptions& opt = {}) {
  GradCheckResult res{name, 0.0, opt.tolerance, 0, false};
  for (auto& in : inputs) in.zero_grad();
  f().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());

  Rng rng(opt.seed);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto data = inputs[k].mutable_data();
    std::vector<std::size_t> idx(data.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (idx.size() > opt.max_entries) {
      for (std::size_t i = 0; i < opt.max_entries; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
      idx.resize(opt.max_entries);
    }
    for (auto i : idx) {
      const double orig = data[i];
      data[i] = orig + opt.eps;
      const double up = f().item();
      data[i] = orig - opt.eps;
      const double down = f().item();
      data[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.eps);
      res.max_error = std::max(res.max_error, gradient_error(analytic[k][i], numeric, opt.magnitude_floor));
      ++res.entries;
    }
  }
  res.passed = res.max_error < opt.tolerance;
  return res;
}

namespace detail {

inline Tensor random_tensor(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool requires_grad = true) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v), requires_grad);
}

// Scalar probe sum(y ⊙ R) with a fixed random R so gradients are not trivially uniform.
inline Tensor probe(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

inline void jitter_parameters(const ParameterList& params, Rng& rng, double amount) {
  for (auto p : params) {
    auto d = p.tensor.mutable_data();
    for (auto& x : d) x += amount * rng.uniform(-1.0, 1.0);
  }
}

inline std::vector<Tensor> tensors_of(const ParameterList& params) {
  std::vector<Tensor> out;
  for (const auto& p : params) out.push_back(p.tensor);
  return out;
}

}  // namespace detail

/// Small tiny-config autoencoder used by the full-model gradient check.
inline ModelConfig tiny_model_config() {
  ModelConfig cfg;
  cfg.volume = {8, 8, 8};
  cfg.patch = 4;
  cfg.encoder = {8, 2, 2, 2, 2};
  cfg.decoder = {8, 2, 4, 2, 2};
  return cfg;
}

inline SegConfig tiny_seg_config() {
  SegConfig cfg;
  cfg.volume = {8, 8, 8};
  cfg.patch = 4;
  cfg.encoder = {8, 2, 4, 2, 2};
  cfg.bottleneck_channels = 4;
  cfg.mid_channels = 3;
  cfg.out_channels = 2;
  return cfg;
}

/// Every primitive, the attention layers, and both tiny full models.
inline std::vector<GradCheckResult> run_gradcheck_suite(std::uint64_t seed = 1) {
  Rng rng(seed);
  std::vector<GradCheckResult> out;
  GradCheckOptions prim;
  auto R = [&](const Shape& s) { return detail::random_tensor(s, rng, -1.0, 1.0, false); };
  auto X = [&](const Shape& s, double lo = -1.0, double hi = 1.0) { return detail::random_tensor(s, rng, lo, hi); };

  {
    auto a = X({4, 3}), b = X({4, 3}), r = R({4, 3});
    out.push_back(check_gradients("add", [=] { return detail::probe(add(a, b), r); }, {a, b}, prim));
    out.push_back(check_gradients("sub", [=] { return detail::probe(sub(a, b), r); }, {a, b}, prim));
    out.push_back(check_gradients("mul", [=] { return detail::probe(mul(a, b), r); }, {a, b}, prim));
    auto c = X({4, 3}, 0.5, 2.0);
    out.push_back(check_gradients("div", [=] { return detail::probe(div(a, c), r); }, {a, c}, prim));
    out.push_back(check_gradients("log", [=] { return detail::probe(log(c), r); }, {c}, prim));
    out.push_back(check_gradients("square", [=] { return detail::probe(square(a), r); }, {a}, prim));
    out.push_back(check_gradients("scale", [=] { return detail::probe(scale(a, -2.5), r); }, {a}, prim));
    out.push_back(check_gradients("gelu", [=] { return detail::probe(gelu(scale(a, 3.0)), r); }, {a}, prim));
    auto bias = X({3});
    out.push_back(check_gradients("add_bias", [=] { return detail::probe(add_bias(a, bias), r); }, {a, bias}, prim));
    out.push_back(check_gradients("sum", [=] { return sum(square(a)); }, {a}, prim));
    out.push_back(check_gradients("mean", [=] { return mean(square(a)); }, {a}, prim));
    auto r4 = R({4});
    out.push_back(check_gradients("sum_last", [=] { return detail::probe(sum_last(square(a)), r4); }, {a}, prim));
    out.push_back(check_gradients("mean_last", [=] { return detail::probe(mean_last(square(a)), r4); }, {a}, prim));
  }
  {
    auto a = X({4, 3}), b = X({3, 5}), c = X({5, 2}), r = R({4, 2});
    GradCheckOptions strict = prim;
    strict.tolerance = 1e-6;
    out.push_back(check_gradients("matmul_chain", [=] { return detail::probe(matmul(matmul(a, b), c), r); },
                                  {a, b, c}, strict));
    auto bt = X({5, 3}), r2 = R({4, 5});
    out.push_back(check_gradients("matmul_transposed", [=] { return detail::probe(matmul(a, bt, true), r2); },
                                  {a, bt}, prim));
    auto ba = X({3, 4, 2}), bb = X({3, 2, 5}), rb = R({3, 4, 5});
    out.push_back(check_gradients("matmul_batched", [=] { return detail::probe(matmul(ba, bb), rb); }, {ba, bb}, prim));
  }
  {
    auto x = X({2, 3, 4}, -2.0, 2.0), r = R({2, 3, 4});
    for (std::size_t axis = 0; axis < 3; ++axis) {
      out.push_back(check_gradients("softmax_axis" + std::to_string(axis),
                                    [=] { return detail::probe(softmax(x, axis), r); }, {x}, prim));
      out.push_back(check_gradients("log_softmax_axis" + std::to_string(axis),
                                    [=] { return detail::probe(log_softmax(x, axis), r); }, {x}, prim));
    }
    auto rp = R({4, 2, 3});
    out.push_back(check_gradients("permute", [=] { return detail::probe(permute(x, {2, 0, 1}), rp); }, {x}, prim));
    auto rr = R({6, 4});
    out.push_back(check_gradients("reshape", [=] { return detail::probe(reshape(x, {6, 4}), rr); }, {x}, prim));
  }
  {
    auto x = X({8, 8, 8}, -2.0, 2.0), g = X({8}), b = X({8}), r = R({8, 8, 8});
    out.push_back(check_gradients("layer_norm", [=] { return detail::probe(layer_norm(x, g, b), r); }, {x, g, b}, prim));
  }
  {
    auto x = X({6, 3}), r = R({5, 3}), r6 = R({6, 3}), rc = R({9, 3});
    const std::vector<std::size_t> idx{4, 0, 4, 2, 5};
    out.push_back(check_gradients("gather_rows", [=] { return detail::probe(gather_rows(x, idx), r); }, {x}, prim));
    out.push_back(check_gradients("roll_rows", [=] { return detail::probe(roll_rows(x, 2), r6); }, {x}, prim));
    auto y = X({3, 3});
    out.push_back(check_gradients("concat_rows", [=] { return detail::probe(concat_rows({x, y}), rc); }, {x, y}, prim));
    auto rs = R({3, 3});
    out.push_back(check_gradients("slice_rows", [=] { return detail::probe(slice_rows(x, 1, 4), rs); }, {x}, prim));
  }
  {
    auto x = X({2, 4, 5, 3}), w = X({3, 2, 3, 3, 3}), b = X({3}), r = R({3, 4, 5, 3});
    out.push_back(check_gradients("conv3d", [=] { return detail::probe(conv3d(x, w, b), r); }, {x, w, b}, prim));
    auto ru = R({2, 8, 10, 6});
    out.push_back(
        check_gradients("upsample_trilinear", [=] { return detail::probe(upsample_trilinear(x, 2), ru); }, {x}, prim));
  }

  // Attention layers.
  const AttentionConfig acfg{8, 2, 4, 2, 2};
  {
    Rng wr(seed + 11);
    auto embed = Linear::xavier(27, 8, wr);
    detail::jitter_parameters({{"w", embed.weight}, {"b", embed.bias}}, wr, 0.1);
    auto patches = X({6, 27}), r = R({6, 8});
    out.push_back(check_gradients("patch_embed", [=] { return detail::probe(patch_embed(patches, embed), r); },
                                  {patches, embed.weight, embed.bias}, prim));
  }
  {
    Rng wr(seed + 12);
    auto msa = MsaWeights::xavier(acfg.dim, wr);
    ParameterList params;
    msa.collect("msa", params);
    detail::jitter_parameters(params, wr, 0.1);
    auto x = X({8, 8}), r = R({8, 8});
    auto inputs = detail::tensors_of(params);
    inputs.push_back(x);
    out.push_back(check_gradients("lw_msa", [=] { return detail::probe(lw_msa(x, acfg, msa), r); }, inputs, prim));
    out.push_back(check_gradients("slw_msa", [=] { return detail::probe(slw_msa(x, acfg, msa), r); }, inputs, prim));
    std::vector<bool> valid(8, true);
    valid[6] = valid[7] = false;
    out.push_back(check_gradients("masked_window_attention",
                                  [=] { return detail::probe(window_attention(x, acfg, msa, valid), r); }, inputs, prim));
  }
  {
    Rng wr(seed + 13);
    auto block = BlockWeights::xavier(acfg, wr);
    ParameterList params;
    block.collect("block", params);
    detail::jitter_parameters(params, wr, 0.1);
    auto x = X({8, 8}), r = R({8, 8});
    auto inputs = detail::tensors_of(params);
    inputs.push_back(x);
    out.push_back(check_gradients("transformer_block_lw",
                                  [=] { return detail::probe(transformer_block(x, acfg, block, false), r); }, inputs, prim));
    out.push_back(check_gradients("transformer_block_slw",
                                  [=] { return detail::probe(transformer_block(x, acfg, block, true), r); }, inputs, prim));
  }
  {
    Rng wr(seed + 14);
    auto vit = SwVitWeights::xavier(acfg, wr);
    ParameterList params;
    vit.collect("vit", params);
    detail::jitter_parameters(params, wr, 0.1);
    auto x = X({6, 8}), r = R({6, 8});  // 6 tokens: exercises the padding path
    auto inputs = detail::tensors_of(params);
    inputs.push_back(x);
    out.push_back(
        check_gradients("swvit_padded", [=] { return detail::probe(swvit_forward(x, acfg, vit), r); }, inputs, prim));
  }

  // Full models, tiny configurations.
  GradCheckOptions full = prim;
  full.tolerance = 1e-3;
  {
    const auto cfg = tiny_model_config();
    auto model = AsaModel::init(cfg, seed + 21);
    const auto params = model.parameters();
    Rng wr(seed + 22);
    detail::jitter_parameters(params, wr, 0.05);
    const auto grid = cfg.grid();
    auto original = detail::random_tensor({grid.count(), grid.patch_voxels()}, rng, 0.0, 1.0, false);
    const auto plan = make_mask_plan(grid.count(), 0.5, seed + 23);
    std::vector<double> w(plan.masked.size());
    double total = 0.0;
    for (auto& x : w) total += (x = rng.uniform(0.1, 1.0));
    for (auto& x : w) x /= total;
    out.push_back(check_gradients(
        "asa_model_tiny", [=] { return ar_loss(asa_forward(original, plan, model), original, plan, w); },
        detail::tensors_of(params), full));
  }
  {
    const auto cfg = tiny_seg_config();
    auto model = SegModel::init(cfg, seed + 31);
    const auto params = model.parameters();
    Rng wr(seed + 32);
    detail::jitter_parameters(params, wr, 0.05);
    Volume v(cfg.volume);
    v.labels.emplace(v.voxels.size());
    for (std::size_t i = 0; i < v.voxels.size(); ++i) {
      v.voxels[i] = static_cast<float>(rng.uniform());
      (*v.labels)[i] = static_cast<std::uint8_t>(rng.below(cfg.n_classes));
    }
    out.push_back(check_gradients("seg_model_tiny", [=] { return dice_ce_loss(seg_forward(v, model), *v.labels); },
                                  detail::tensors_of(params), full));
  }
  return out;
}

}  // namespace asa
