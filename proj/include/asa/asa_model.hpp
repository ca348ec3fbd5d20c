#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "asa/attention.hpp"
#include "asa/informativeness.hpp"
#include "asa/optim.hpp"
#include "asa/patching.hpp"
#include "asa/position_encoding.hpp"

namespace asa {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  Dims volume{32, 32, 32};
  std::size_t patch = 8;
  AttentionConfig encoder{64, 4, 16, 4, 4};
  AttentionConfig decoder{32, 4, 16, 2, 4};
  EncodingKind encoding = EncodingKind::symmetric;

  PatchGrid grid() const { return make_patch_grid(volume, patch); }

  void validate() const {
    grid();
    encoder.validate();
    decoder.validate();
    if (encoder.dim % 2 != 0 || decoder.dim % 2 != 0) throw ContractViolation("model dims must be even");
  }
};

/// Patch embedding + SW-ViT stack. Shared by the autoencoder and the segmentation network.
struct Encoder {
  AttentionConfig cfg;
  Linear embed;
  SwVitWeights vit;

  static Encoder xavier(std::size_t patch_voxels, const AttentionConfig& cfg, Rng& rng) {
    return {cfg, Linear::xavier(patch_voxels, cfg.dim, rng), SwVitWeights::xavier(cfg, rng)};
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    embed.collect(prefix + ".embed", out);
    vit.collect(prefix + ".vit", out);
  }

  /// Embeds the given patch rows, adds their position encodings and runs the stack.
  SwVitOutput forward(const Tensor& patch_rows, const Tensor& positions) const {
    return swvit_forward_with_taps(add(patch_embed(patch_rows, embed), positions), cfg, vit);
  }
};

/// Masked autoencoder with symmetric position encoding: encoder over visible
/// patches, one shared learnable mask token, decoder over the full sequence and
/// a linear head back to s³ voxels per patch.
struct AsaModel {
  ModelConfig cfg;
  Encoder encoder;
  Linear enc_to_dec;
  Tensor mask_token;
  SwVitWeights decoder;
  Linear head;
  Tensor enc_positions;  // [patches, D], constant
  Tensor dec_positions;  // [patches, D'], constant

  static AsaModel init(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const PatchGrid grid = cfg.grid();
    AsaModel m;
    m.cfg = cfg;
    m.encoder = Encoder::xavier(grid.patch_voxels(), cfg.encoder, rng);
    m.enc_to_dec = Linear::xavier(cfg.encoder.dim, cfg.decoder.dim, rng);
    std::vector<double> token(cfg.decoder.dim);
    for (auto& x : token) x = 0.02 * rng.normal();
    m.mask_token = Tensor({cfg.decoder.dim}, std::move(token), true);
    m.decoder = SwVitWeights::xavier(cfg.decoder, rng);
    m.head = Linear::xavier(cfg.decoder.dim, grid.patch_voxels(), rng);
    m.enc_positions = encoding_table(grid, cfg.encoder.dim, cfg.encoding).as_tensor();
    m.dec_positions = encoding_table(grid, cfg.decoder.dim, cfg.encoding).as_tensor();
    return m;
  }

  ParameterList parameters() const {
    ParameterList out;
    encoder.collect("encoder", out);
    enc_to_dec.collect("enc_to_dec", out);
    register_parameter(out, "mask_token", mask_token);
    decoder.collect("decoder.vit", out);
    head.collect("head", out);
    return out;
  }
};

/// Reconstructs every patch ([patches, s³]) from the visible ones.
inline Tensor asa_forward(const Tensor& patches, const MaskPlan& plan, const AsaModel& model) {
  const PatchGrid grid = model.cfg.grid();
  const std::size_t n = grid.count(), dec_dim = model.cfg.decoder.dim;
  if (patches.rank() != 2 || patches.dim(0) != n || patches.dim(1) != grid.patch_voxels())
    throw ContractViolation("asa_forward: patches " + shape_str(patches.shape()) + " do not match the model grid");
  if (plan.total() != n) throw ContractViolation("asa_forward: mask plan does not cover the patch grid");

  std::vector<Tensor> parts;
  if (!plan.visible.empty()) {
    const auto encoded = model.encoder.forward(gather_rows(patches, plan.visible),
                                               gather_rows(model.enc_positions, plan.visible));
    parts.push_back(model.enc_to_dec(encoded.tokens));
  }
  if (!plan.masked.empty()) {
    const Tensor shared = gather_rows(reshape(model.mask_token, {1, dec_dim}),
                                      std::vector<std::size_t>(plan.masked.size(), 0));
    parts.push_back(add(shared, gather_rows(model.dec_positions, plan.masked)));
  }
  // Row of the concatenated [visible; masked] block holding each patch position.
  std::vector<std::size_t> order(n);
  for (std::size_t r = 0; r < plan.visible.size(); ++r) order[plan.visible[r]] = r;
  for (std::size_t r = 0; r < plan.masked.size(); ++r) order[plan.masked[r]] = plan.visible.size() + r;
  const Tensor tokens = gather_rows(concat_rows(parts), order);
  return model.head(swvit_forward(tokens, model.cfg.decoder, model.decoder));
}

/// Attentive reconstruction loss: sum over masked patches i of p_i times the
/// mean squared error of patch i. Visible patches do not contribute.
inline Tensor ar_loss(const Tensor& recon, const Tensor& original, const MaskPlan& plan,
                      std::span<const double> weights) {
  if (weights.size() != plan.masked.size())
    throw ContractViolation("ar_loss: " + std::to_string(weights.size()) + " weights for " +
                            std::to_string(plan.masked.size()) + " masked patches");
  if (plan.masked.empty()) throw ContractViolation("ar_loss: no masked patches");
  detail::require_same_shape(recon, original, "ar_loss");
  double total = 0.0;
  for (double w : weights) total += w;
  if (std::fabs(total - 1.0) > 1e-9) throw ContractViolation("ar_loss: weights must sum to 1");
  const Tensor per_patch = mean_last(square(sub(gather_rows(recon, plan.masked), gather_rows(original, plan.masked))));
  return sum(mul(per_patch, Tensor({weights.size()}, {weights.begin(), weights.end()})));
}

/// Per-masked-patch mean squared error (no graph), ordered as plan.masked.
inline std::vector<double> masked_patch_mse(const Tensor& recon, const Tensor& original, const MaskPlan& plan) {
  const std::size_t m = recon.dim(1);
  std::vector<double> out;
  for (auto i : plan.masked) {
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      const double d = recon.data()[i * m + j] - original.data()[i * m + j];
      acc += d * d;
    }
    out.push_back(acc / static_cast<double>(m));
  }
  return out;
}

/// Volume whose masked patches come from the reconstruction and whose visible
/// patches are copied from the input.
inline Volume reconstruct_volume(const Volume& v, const MaskPlan& plan, const AsaModel& model) {
  const PatchGrid grid = model.cfg.grid();
  Patches patches = patchify(v, grid.s);
  if (!plan.masked.empty()) {
    const Tensor recon = asa_forward(patches.as_tensor(), plan, model);
    for (auto i : plan.masked)
      std::copy_n(recon.data().data() + i * patches.length, patches.length, patches.row(i).data());
  } else if (plan.total() != grid.count()) {
    throw ContractViolation("reconstruct_volume: mask plan does not cover the patch grid");
  }
  return unpatchify(patches, grid);
}

enum class LossKind { attentive, uniform };

inline std::string to_string(LossKind k) { return k == LossKind::attentive ? "attentive" : "uniform"; }

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "attentive") return LossKind::attentive;
  if (s == "uniform") return LossKind::uniform;
  throw ContractViolation("unknown loss kind '" + s + "' (expected attentive or uniform)");
}

struct PretrainConfig {
  ModelConfig model;
  OptimizerConfig optimizer;
  double mask_ratio = 0.75;
  std::size_t bins = 8;
  LossKind loss = LossKind::attentive;
  std::uint64_t seed = 42;
};

/// Seed of the mask plan for one volume at one step.
inline std::uint64_t mask_seed(std::uint64_t global_seed, std::size_t step, std::size_t volume_index) {
  return derive_seed(global_seed, {0x6d61736bULL, step, volume_index});
}

/// Masks, weights and reconstruction for one volume (batch element).
struct PretrainSample {
  MaskPlan plan;
  std::vector<double> weights;
  Tensor original;
};

inline PretrainSample prepare_sample(const Volume& v, const PretrainConfig& cfg, std::size_t step,
                                     std::size_t volume_index) {
  const PatchGrid grid = cfg.model.grid();
  PretrainSample s;
  s.plan = make_mask_plan(grid.count(), cfg.mask_ratio, mask_seed(cfg.seed, step, volume_index));
  if (cfg.loss == LossKind::attentive)
    s.weights = informativeness_weights(v, grid, s.plan, cfg.bins);
  else
    s.weights.assign(s.plan.masked.size(), 1.0 / static_cast<double>(s.plan.masked.size()));
  s.original = patchify(v, grid.s).as_tensor();
  return s;
}

/// Owns the model and optimizer state of a pretraining run.
class Pretrainer {
 public:
  Pretrainer(PretrainConfig cfg, AsaModel model) : cfg_(std::move(cfg)), model_(std::move(model)) {
    cfg_.optimizer.validate();
    params_ = model_.parameters();
  }

  explicit Pretrainer(const PretrainConfig& cfg) : Pretrainer(cfg, AsaModel::init(cfg.model, cfg.seed)) {}

  /// One optimisation step over `batch`; `step` is zero-based and selects both
  /// the learning rate and the mask seeds. `first_index` offsets the volume
  /// indices used for mask seeding (position of batch[0] in the dataset).
  double step(std::span<const Volume> batch, std::size_t step, std::size_t first_index = 0) {
    if (batch.empty()) throw ContractViolation("pretrain_step: empty batch");
    zero_grads(params_);
    std::vector<Tensor> losses;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto sample = prepare_sample(batch[i], cfg_, step, first_index + i);
      const Tensor recon = asa_forward(sample.original, sample.plan, model_);
      losses.push_back(ar_loss(recon, sample.original, sample.plan, sample.weights));
    }
    const Tensor loss = mean(concat_rows(losses));
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError("non-finite pretraining loss at step " + std::to_string(step));
    loss.backward();
    adamw_step(params_, adam_, cfg_.optimizer, step + 1, lr_at(step, cfg_.optimizer));
    return value;
  }

  const AsaModel& model() const { return model_; }
  AsaModel& model() { return model_; }
  const PretrainConfig& config() const { return cfg_; }
  ParameterList& parameters() { return params_; }
  const ParameterList& parameters() const { return params_; }
  AdamState& optimizer_state() { return adam_; }
  const AdamState& optimizer_state() const { return adam_; }

 private:
  PretrainConfig cfg_;
  AsaModel model_;
  ParameterList params_;
  AdamState adam_;
};

/// Functional form of one pretraining step.
inline double pretrain_step(std::span<const Volume> batch, Pretrainer& trainer, std::size_t step) {
  return trainer.step(batch, step);
}

}  // namespace asa
