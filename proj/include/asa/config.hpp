#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "json.hpp"

#include "asa/asa_model.hpp"
#include "asa/segmentation.hpp"

namespace asa {

/// Flat run configuration shared by every subcommand. Keys mirror the field
/// names; missing keys keep the desk-scale defaults below.
struct RunConfig {
  std::uint64_t seed = 42;
  Dims volume{32, 32, 32};
  std::size_t patch = 8;
  double mask_ratio = 0.75;
  std::size_t bins = 8;

  std::size_t dim = 64;
  std::size_t heads = 4;
  std::size_t window = 16;
  std::size_t depth = 4;
  std::size_t mlp_ratio = 4;
  std::size_t dec_dim = 32;
  std::size_t dec_heads = 4;
  std::size_t dec_depth = 2;
  EncodingKind encoding = EncodingKind::symmetric;
  LossKind loss = LossKind::attentive;

  // Pretraining optimiser (AdamW + warmup/cosine).
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double base_lr = 1.5e-4;
  double warmup_start_lr = 1e-6;
  std::int64_t warmup_steps = -1;  // -1: 5% of total_steps
  std::size_t total_steps = 200;
  std::size_t batch_size = 4;

  // Synthetic data.
  std::size_t n_volumes = 8;
  std::size_t n_structures = 3;
  std::size_t n_lesions = 1;
  double noise_sigma = 0.02;

  // Fine-tuning (momentum SGD + poly decay).
  std::size_t n_classes = 3;
  double ft_lr = 1e-3;
  double ft_momentum = 0.99;
  double ft_weight_decay = 3e-5;
  std::size_t ft_steps = 300;
  std::size_t ft_batch_size = 2;
  bool freeze_encoder = false;
  std::size_t n_eval_volumes = 4;

  std::size_t resolved_warmup() const {
    return warmup_steps < 0 ? total_steps / 20 : static_cast<std::size_t>(warmup_steps);
  }

  ModelConfig model_config() const {
    ModelConfig m;
    m.volume = volume;
    m.patch = patch;
    m.encoder = {dim, heads, window, depth, mlp_ratio};
    m.decoder = {dec_dim, dec_heads, window, dec_depth, mlp_ratio};
    m.encoding = encoding;
    return m;
  }

  OptimizerConfig optimizer_config() const {
    OptimizerConfig o;
    o.beta1 = beta1;
    o.beta2 = beta2;
    o.weight_decay = weight_decay;
    o.base_lr = base_lr;
    o.warmup_start_lr = warmup_start_lr;
    o.warmup_steps = resolved_warmup();
    o.total_steps = total_steps;
    return o;
  }

  PretrainConfig pretrain_config() const {
    return {model_config(), optimizer_config(), mask_ratio, bins, loss, seed};
  }

  SegConfig seg_config() const {
    SegConfig s;
    s.volume = volume;
    s.patch = patch;
    s.encoder = {dim, heads, window, depth, mlp_ratio};
    s.encoding = encoding;
    s.n_classes = n_classes;
    return s;
  }

  FinetuneConfig finetune_config() const {
    FinetuneConfig f;
    f.model = seg_config();
    f.optimizer = {ft_lr, ft_momentum, ft_weight_decay, true, 0.9, ft_steps};
    f.freeze_encoder = freeze_encoder;
    f.seed = seed;
    return f;
  }

  PhantomSpec phantom_spec(std::uint64_t phantom_seed) const {
    return {volume, phantom_seed, n_structures, n_lesions, noise_sigma};
  }

  void validate() const {
    model_config().validate();
    optimizer_config().validate();
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ContractViolation("mask_ratio must lie in (0, 1)");
    if (bins < 2) throw ContractViolation("bins must be >= 2");
    if (batch_size == 0 || ft_batch_size == 0) throw ContractViolation("batch sizes must be positive");
    if (n_volumes == 0) throw ContractViolation("n_volumes must be positive");
    if (ft_steps == 0) throw ContractViolation("ft_steps must be positive");
    if (!(ft_momentum >= 0.0 && ft_momentum < 1.0)) throw ContractViolation("ft_momentum must lie in [0, 1)");
    seg_config().validate();
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["seed"] = c.seed;
  j["volume"] = {c.volume.t, c.volume.h, c.volume.w};
  j["patch"] = c.patch;
  j["mask_ratio"] = c.mask_ratio;
  j["bins"] = c.bins;
  j["dim"] = c.dim;
  j["heads"] = c.heads;
  j["window"] = c.window;
  j["depth"] = c.depth;
  j["mlp_ratio"] = c.mlp_ratio;
  j["dec_dim"] = c.dec_dim;
  j["dec_heads"] = c.dec_heads;
  j["dec_depth"] = c.dec_depth;
  j["encoding"] = to_string(c.encoding);
  j["loss"] = to_string(c.loss);
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["weight_decay"] = c.weight_decay;
  j["base_lr"] = c.base_lr;
  j["warmup_start_lr"] = c.warmup_start_lr;
  j["warmup_steps"] = c.warmup_steps;
  j["total_steps"] = c.total_steps;
  j["batch_size"] = c.batch_size;
  j["n_volumes"] = c.n_volumes;
  j["n_structures"] = c.n_structures;
  j["n_lesions"] = c.n_lesions;
  j["noise_sigma"] = c.noise_sigma;
  j["n_classes"] = c.n_classes;
  j["ft_lr"] = c.ft_lr;
  j["ft_momentum"] = c.ft_momentum;
  j["ft_weight_decay"] = c.ft_weight_decay;
  j["ft_steps"] = c.ft_steps;
  j["ft_batch_size"] = c.ft_batch_size;
  j["freeze_encoder"] = c.freeze_encoder;
  j["n_eval_volumes"] = c.n_eval_volumes;
  return j;
}

/// Reads a flat config object; unknown keys are rejected and the result is validated.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ContractViolation("config must be a JSON object");
  const auto known = to_json(RunConfig{});
  for (const auto& [key, value] : j.items())
    if (!known.contains(key)) throw ContractViolation("unknown config key '" + key + "'");
  RunConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("seed", c.seed);
    if (j.contains("volume")) {
      const auto v = j.at("volume").get<std::vector<std::size_t>>();
      if (v.size() != 3) throw ContractViolation("volume must list three extents");
      c.volume = {v[0], v[1], v[2]};
    }
    get("patch", c.patch);
    get("mask_ratio", c.mask_ratio);
    get("bins", c.bins);
    get("dim", c.dim);
    get("heads", c.heads);
    get("window", c.window);
    get("depth", c.depth);
    get("mlp_ratio", c.mlp_ratio);
    get("dec_dim", c.dec_dim);
    get("dec_heads", c.dec_heads);
    get("dec_depth", c.dec_depth);
    if (j.contains("encoding")) c.encoding = parse_encoding_kind(j.at("encoding").get<std::string>());
    if (j.contains("loss")) c.loss = parse_loss_kind(j.at("loss").get<std::string>());
    get("beta1", c.beta1);
    get("beta2", c.beta2);
    get("weight_decay", c.weight_decay);
    get("base_lr", c.base_lr);
    get("warmup_start_lr", c.warmup_start_lr);
    get("warmup_steps", c.warmup_steps);
    get("total_steps", c.total_steps);
    get("batch_size", c.batch_size);
    get("n_volumes", c.n_volumes);
    get("n_structures", c.n_structures);
    get("n_lesions", c.n_lesions);
    get("noise_sigma", c.noise_sigma);
    get("n_classes", c.n_classes);
    get("ft_lr", c.ft_lr);
    get("ft_momentum", c.ft_momentum);
    get("ft_weight_decay", c.ft_weight_decay);
    get("ft_steps", c.ft_steps);
    get("ft_batch_size", c.ft_batch_size);
    get("freeze_encoder", c.freeze_encoder);
    get("n_eval_volumes", c.n_eval_volumes);
  } catch (const nlohmann::json::exception& e) {
    throw ContractViolation(std::string("config: ") + e.what());
  }
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractViolation("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace asa
