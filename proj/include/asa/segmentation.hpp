#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "asa/asa_model.hpp"
#include "asa/layers.hpp"
#include "asa/volume.hpp"

namespace asa {

struct SegConfig {
  Dims volume{32, 32, 32};
  std::size_t patch = 8;
  AttentionConfig encoder{64, 4, 16, 4, 4};
  EncodingKind encoding = EncodingKind::symmetric;
  std::size_t n_classes = 3;
  std::size_t bottleneck_channels = 32;
  std::size_t mid_channels = 16;
  std::size_t out_channels = 8;

  PatchGrid grid() const { return make_patch_grid(volume, patch); }

  void validate() const {
    grid();
    encoder.validate();
    if (encoder.depth < 2) throw ContractViolation("segmentation encoder needs depth >= 2 for its feature taps");
    if (patch < 2 || patch % 2 != 0) throw ContractViolation("segmentation decoder needs an even patch size");
    if (n_classes < 2) throw ContractViolation("segmentation needs at least two classes");
  }
};

/// U-shaped segmentation network over the SW-ViT encoder. Feature taps come
/// from block ceil(depth/2) and from the final (normalised) encoder output.
///
///   taps at stride s --conv--> bottleneck --x2 up, conv--> stride s/2
///   --x(s/2) up, conv--> voxel resolution --1x1x1 conv--> class logits
struct SegModel {
  SegConfig cfg;
  Encoder encoder;
  Conv3d bottleneck;
  Conv3d up_half;
  Conv3d up_full;
  Conv3d classifier;
  Tensor positions;

  static SegModel init(const SegConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const PatchGrid grid = cfg.grid();
    SegModel m;
    m.cfg = cfg;
    m.encoder = Encoder::xavier(grid.patch_voxels(), cfg.encoder, rng);
    m.bottleneck = Conv3d::xavier(2 * cfg.encoder.dim, cfg.bottleneck_channels, 3, rng);
    m.up_half = Conv3d::xavier(cfg.bottleneck_channels, cfg.mid_channels, 3, rng);
    m.up_full = Conv3d::xavier(cfg.mid_channels, cfg.out_channels, 3, rng);
    m.classifier = Conv3d::xavier(cfg.out_channels, cfg.n_classes, 1, rng);
    m.positions = encoding_table(grid, cfg.encoder.dim, cfg.encoding).as_tensor();
    return m;
  }

  ParameterList encoder_parameters() const {
    ParameterList out;
    encoder.collect("encoder", out);
    return out;
  }

  ParameterList decoder_parameters() const {
    ParameterList out;
    bottleneck.collect("seg.bottleneck", out);
    up_half.collect("seg.up_half", out);
    up_full.collect("seg.up_full", out);
    classifier.collect("seg.classifier", out);
    return out;
  }

  ParameterList parameters() const {
    auto out = encoder_parameters();
    auto dec = decoder_parameters();
    out.insert(out.end(), dec.begin(), dec.end());
    return out;
  }
};

/// Per-voxel class logits [n_classes, T, H, W].
inline Tensor seg_forward(const Volume& v, const SegModel& model) {
  const PatchGrid grid = model.cfg.grid();
  if (v.dims != grid.volume_dims())
    throw ContractViolation("seg_forward: volume " + dims_str(v.dims) + " does not match model dims " +
                            dims_str(grid.volume_dims()));
  const Tensor patches = patchify(v, grid.s).as_tensor();
  const auto out = model.encoder.forward(patches, model.positions);
  const std::size_t D = model.cfg.encoder.dim;
  auto to_grid = [&](const Tensor& tokens) {
    return reshape(permute(tokens, {1, 0}), {D, grid.t, grid.h, grid.w});
  };
  const Tensor mid = to_grid(out.block_outputs[(model.cfg.encoder.depth + 1) / 2 - 1]);
  const Tensor deep = to_grid(out.tokens);
  Tensor h = gelu(model.bottleneck(reshape(concat_rows({deep, mid}), {2 * D, grid.t, grid.h, grid.w})));
  h = gelu(model.up_half(upsample_trilinear(h, 2)));
  h = gelu(model.up_full(upsample_trilinear(h, grid.s / 2)));
  return model.classifier(h);
}

/// Mean voxel cross-entropy plus (1 − mean soft Dice over foreground classes).
/// A foreground class absent from both the labels and the argmax prediction
/// contributes a Dice of exactly 1.
inline Tensor dice_ce_loss(const Tensor& logits, std::span<const std::uint8_t> labels, double smooth = 1e-5) {
  if (logits.rank() != 4) throw ContractViolation("dice_ce_loss: logits must be [C, T, H, W]");
  const std::size_t C = logits.dim(0), N = logits.numel() / C;
  if (labels.size() != N) throw ContractViolation("dice_ce_loss: label count does not match logits");
  std::vector<double> onehot(C * N, 0.0);
  std::vector<std::size_t> label_count(C, 0);
  for (std::size_t i = 0; i < N; ++i) {
    if (labels[i] >= C) throw ContractViolation("dice_ce_loss: label " + std::to_string(labels[i]) + " out of range");
    onehot[labels[i] * N + i] = 1.0;
    ++label_count[labels[i]];
  }
  std::vector<std::size_t> pred_count(C, 0);
  auto lv = logits.data();
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (lv[c * N + i] > lv[best * N + i]) best = c;
    ++pred_count[best];
  }

  const Tensor flat = reshape(logits, {C, N});
  const Tensor target({C, N}, onehot);
  const Tensor ce = scale(sum(mul(log_softmax(flat, 0), target)), -1.0 / static_cast<double>(N));
  if (C < 2) return ce;

  const Tensor probs = softmax(flat, 0);
  std::vector<Tensor> dice;
  for (std::size_t c = 1; c < C; ++c) {
    if (label_count[c] == 0 && pred_count[c] == 0) {
      dice.push_back(Tensor::scalar(1.0));
      continue;
    }
    const Tensor p = slice_rows(probs, c, c + 1);
    const Tensor g = slice_rows(target, c, c + 1);
    const Tensor inter = sum(mul(p, g));
    const Tensor numer = Tensor::scalar(smooth);
    dice.push_back(div(add(scale(inter, 2.0), numer),
                       add(sum(p), Tensor::scalar(static_cast<double>(label_count[c]) + smooth))));
  }
  return add(ce, sub(Tensor::scalar(1.0), mean(concat_rows(dice))));
}

// --- evaluation metrics ----------------------------------------------------

/// Argmax class per voxel.
inline std::vector<std::uint8_t> predict_labels(const Tensor& logits) {
  const std::size_t C = logits.dim(0), N = logits.numel() / C;
  auto lv = logits.data();
  std::vector<std::uint8_t> out(N);
  for (std::size_t i = 0; i < N; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (lv[c * N + i] > lv[best * N + i]) best = c;
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

/// 2|P∩R| / (|P| + |R|) for class c; 1 when the class is absent from both.
inline double dice_metric(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> ref, std::uint8_t c) {
  if (pred.size() != ref.size()) throw ContractViolation("dice_metric: size mismatch");
  std::size_t p = 0, r = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] == c, b = ref[i] == c;
    p += a;
    r += b;
    both += a && b;
  }
  if (p + r == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + r);
}

/// Foreground voxels of class c with at least one 6-connected neighbour that is
/// not class c. Voxels outside the volume count as background.
inline std::vector<bool> surface_mask(std::span<const std::uint8_t> labels, const Dims& d, std::uint8_t c) {
  std::vector<bool> out(labels.size(), false);
  auto is_c = [&](std::ptrdiff_t t, std::ptrdiff_t h, std::ptrdiff_t w) {
    if (t < 0 || h < 0 || w < 0 || t >= static_cast<std::ptrdiff_t>(d.t) || h >= static_cast<std::ptrdiff_t>(d.h) ||
        w >= static_cast<std::ptrdiff_t>(d.w))
      return false;
    return labels[(static_cast<std::size_t>(t) * d.h + static_cast<std::size_t>(h)) * d.w + static_cast<std::size_t>(w)] == c;
  };
  for (std::ptrdiff_t t = 0; t < static_cast<std::ptrdiff_t>(d.t); ++t)
    for (std::ptrdiff_t h = 0; h < static_cast<std::ptrdiff_t>(d.h); ++h)
      for (std::ptrdiff_t w = 0; w < static_cast<std::ptrdiff_t>(d.w); ++w) {
        if (!is_c(t, h, w)) continue;
        const bool border = !is_c(t - 1, h, w) || !is_c(t + 1, h, w) || !is_c(t, h - 1, w) || !is_c(t, h + 1, w) ||
                            !is_c(t, h, w - 1) || !is_c(t, h, w + 1);
        out[(static_cast<std::size_t>(t) * d.h + static_cast<std::size_t>(h)) * d.w + static_cast<std::size_t>(w)] = border;
      }
  return out;
}

namespace detail {

// Exact 1D squared distance transform (lower envelope of parabolas) over a
// strided line. Infinite entries carry no feature.
inline void edt_line(double* f, std::size_t n, std::size_t stride, std::vector<double>& buf,
                     std::vector<std::size_t>& v, std::vector<double>& z) {
  buf.resize(n);
  v.resize(n);
  z.resize(n + 1);
  for (std::size_t i = 0; i < n; ++i) buf[i] = f[i * stride];
  std::ptrdiff_t k = -1;
  for (std::size_t q = 0; q < n; ++q) {
    if (!std::isfinite(buf[q])) continue;
    const double fq = buf[q] + static_cast<double>(q * q);
    while (k >= 0) {
      const std::size_t p = v[static_cast<std::size_t>(k)];
      const double s = (fq - (buf[p] + static_cast<double>(p * p))) / (2.0 * (static_cast<double>(q) - static_cast<double>(p)));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    if (k == 0) {
      z[0] = -std::numeric_limits<double>::infinity();
    } else {
      const std::size_t p = v[static_cast<std::size_t>(k) - 1];
      z[static_cast<std::size_t>(k)] =
          (fq - (buf[p] + static_cast<double>(p * p))) / (2.0 * (static_cast<double>(q) - static_cast<double>(p)));
    }
    z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  if (k < 0) return;
  std::size_t j = 0;
  for (std::size_t q = 0; q < n; ++q) {
    while (z[j + 1] < static_cast<double>(q)) ++j;
    const double dq = static_cast<double>(q) - static_cast<double>(v[j]);
    f[q * stride] = dq * dq + buf[v[j]];
  }
}

}  // namespace detail

/// Squared Euclidean distance from every voxel to the nearest feature voxel
/// (+inf when there are none).
inline std::vector<double> squared_distance_transform(const std::vector<bool>& features, const Dims& d) {
  std::vector<double> f(features.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = features[i] ? 0.0 : std::numeric_limits<double>::infinity();
  std::vector<double> buf, z;
  std::vector<std::size_t> v;
  for (std::size_t t = 0; t < d.t; ++t)
    for (std::size_t h = 0; h < d.h; ++h) detail::edt_line(&f[(t * d.h + h) * d.w], d.w, 1, buf, v, z);
  for (std::size_t t = 0; t < d.t; ++t)
    for (std::size_t w = 0; w < d.w; ++w) detail::edt_line(&f[t * d.h * d.w + w], d.h, d.w, buf, v, z);
  for (std::size_t h = 0; h < d.h; ++h)
    for (std::size_t w = 0; w < d.w; ++w) detail::edt_line(&f[h * d.w + w], d.t, d.h * d.w, buf, v, z);
  return f;
}

/// Nearest-rank percentile (q in (0, 100]) of a non-empty sample.
inline double nearest_rank_percentile(std::vector<double> values, double q) {
  if (values.empty()) throw ContractViolation("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q / 100.0 * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

/// Symmetric 95th-percentile surface distance for class c, in voxels.
/// 0 when the class is absent from both, +inf when absent from exactly one.
inline double hd95_metric(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> ref, const Dims& d,
                          std::uint8_t c) {
  if (pred.size() != ref.size() || pred.size() != d.count()) throw ContractViolation("hd95_metric: size mismatch");
  const auto sp = surface_mask(pred, d, c);
  const auto sr = surface_mask(ref, d, c);
  const bool has_p = std::find(sp.begin(), sp.end(), true) != sp.end();
  const bool has_r = std::find(sr.begin(), sr.end(), true) != sr.end();
  if (!has_p && !has_r) return 0.0;
  if (!has_p || !has_r) return std::numeric_limits<double>::infinity();
  auto directed = [&](const std::vector<bool>& from, const std::vector<bool>& to) {
    const auto dist2 = squared_distance_transform(to, d);
    std::vector<double> out;
    for (std::size_t i = 0; i < from.size(); ++i)
      if (from[i]) out.push_back(std::sqrt(dist2[i]));
    return nearest_rank_percentile(std::move(out), 95.0);
  };
  return std::max(directed(sp, sr), directed(sr, sp));
}

struct ClassMetrics {
  std::uint8_t label = 0;
  double dice = 0.0;
  double hd95 = 0.0;
};

/// Dice and HD95 for every foreground class (1 .. n_classes-1).
inline std::vector<ClassMetrics> evaluate_segmentation(std::span<const std::uint8_t> pred,
                                                       std::span<const std::uint8_t> ref, const Dims& d,
                                                       std::size_t n_classes) {
  std::vector<ClassMetrics> out;
  for (std::size_t c = 1; c < n_classes; ++c) {
    const auto label = static_cast<std::uint8_t>(c);
    out.push_back({label, dice_metric(pred, ref, label), hd95_metric(pred, ref, d, label)});
  }
  return out;
}

// --- fine-tuning -------------------------------------------------------------

struct FinetuneConfig {
  SegConfig model;
  SgdConfig optimizer;
  bool freeze_encoder = false;
  bool augment = true;
  std::uint64_t seed = 42;
};

inline std::uint64_t augment_seed(std::uint64_t global_seed, std::size_t step, std::size_t volume_index) {
  return derive_seed(global_seed, {0x61756775ULL, step, volume_index});
}

class Finetuner {
 public:
  Finetuner(FinetuneConfig cfg, SegModel model) : cfg_(std::move(cfg)), model_(std::move(model)) {
    params_ = cfg_.freeze_encoder ? model_.decoder_parameters() : model_.parameters();
  }

  explicit Finetuner(const FinetuneConfig& cfg) : Finetuner(cfg, SegModel::init(cfg.model, cfg.seed)) {}

  /// Augment (flip + gamma), forward, Dice+CE, backward and one momentum-SGD
  /// update with polynomial lr decay. `step` is zero-based.
  double step(std::span<const Volume> batch, std::size_t step, std::size_t first_index = 0) {
    if (batch.empty()) throw ContractViolation("finetune_step: empty batch");
    zero_grads(params_);
    std::vector<Tensor> losses;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      if (!batch[i].labels) throw ContractViolation("finetune_step: volume without labels");
      const Volume v = cfg_.augment ? augment(batch[i], augment_seed(cfg_.seed, step, first_index + i)) : batch[i];
      losses.push_back(dice_ce_loss(seg_forward(v, model_), *v.labels));
    }
    const Tensor loss = mean(concat_rows(losses));
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError("non-finite fine-tuning loss at step " + std::to_string(step));
    loss.backward();
    sgd_step(params_, sgd_, cfg_.optimizer, poly_lr(step, cfg_.optimizer));
    return value;
  }

  const SegModel& model() const { return model_; }
  SegModel& model() { return model_; }
  const FinetuneConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }
  SgdState& optimizer_state() { return sgd_; }
  const SgdState& optimizer_state() const { return sgd_; }

 private:
  FinetuneConfig cfg_;
  SegModel model_;
  ParameterList params_;
  SgdState sgd_;
};

inline double finetune_step(std::span<const Volume> batch, Finetuner& trainer, std::size_t step) {
  return trainer.step(batch, step);
}

/// Copies the encoder parameters (names starting with "encoder.") from a source
/// list into `target`. Shapes must agree.
inline void load_encoder_parameters(const ParameterList& source, ParameterList target) {
  for (auto& dst : target) {
    if (dst.name.rfind("encoder.", 0) != 0) continue;
    const auto it = std::find_if(source.begin(), source.end(), [&](const NamedParameter& p) { return p.name == dst.name; });
    if (it == source.end()) throw ContractViolation("pretrained weights lack parameter '" + dst.name + "'");
    if (it->tensor.shape() != dst.tensor.shape())
      throw ContractViolation("pretrained parameter '" + dst.name + "' has shape " + shape_str(it->tensor.shape()) +
                              ", expected " + shape_str(dst.tensor.shape()));
    auto out = dst.tensor.mutable_data();
    std::copy(it->tensor.data().begin(), it->tensor.data().end(), out.begin());
  }
}

}  // namespace asa
