#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "asa/rng.hpp"
#include "asa/tensor.hpp"

namespace asa {

/// A trainable tensor with a stable name (used by checkpoints) and whether
/// decoupled weight decay applies to it.
struct NamedParameter {
  std::string name;
  Tensor tensor;
  bool decay = true;
};

inline void zero_grads(std::span<NamedParameter> params) {
  for (auto& p : params) p.tensor.zero_grad();
}

/// Xavier/Glorot uniform init. Needs at least two axes; for rank > 2 the
/// trailing axes count as the receptive field (conv layout [out, in, k...]).
inline Tensor xavier_uniform(const Shape& shape, Rng& rng) {
  if (shape.size() < 2) throw ContractViolation("xavier_uniform: needs >= 2 axes, got " + shape_str(shape));
  std::size_t receptive = 1;
  for (std::size_t i = 2; i < shape.size(); ++i) receptive *= shape[i];
  const double fan_in = static_cast<double>(shape[1] * receptive);
  const double fan_out = static_cast<double>(shape[0] * receptive);
  const double a = std::sqrt(6.0 / (fan_in + fan_out));
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(-a, a);
  return Tensor(shape, std::move(v), true);
}

inline Tensor xavier_uniform(const Shape& shape, std::uint64_t seed) {
  Rng rng(seed);
  return xavier_uniform(shape, rng);
}

struct OptimizerConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double weight_decay = 0.05;
  double base_lr = 1.5e-4;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double warmup_start_lr = 1e-6;
  double eps = 1e-8;

  void validate() const {
    if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ContractViolation("beta1 must lie in [0, 1)");
    if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ContractViolation("beta2 must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ContractViolation("weight_decay must be >= 0");
    if (total_steps == 0) throw ContractViolation("total_steps must be positive");
    if (warmup_steps > total_steps) throw ContractViolation("warmup_steps must not exceed total_steps");
  }
};

/// Linear warmup from warmup_start_lr to base_lr, then half-cosine decay to 0.
/// Steps past total_steps clamp to the final value.
inline double lr_at(std::size_t step, const OptimizerConfig& cfg) {
  if (step > cfg.total_steps) step = cfg.total_steps;
  if (step < cfg.warmup_steps) {
    const double f = static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
    return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * f;
  }
  const std::size_t span = cfg.total_steps - cfg.warmup_steps;
  if (span == 0) return cfg.base_lr;
  const double progress = static_cast<double>(step - cfg.warmup_steps) / static_cast<double>(span);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

/// First/second moment buffers, aligned with the parameter list.
struct AdamState {
  std::vector<std::vector<double>> m, v;
};

/// One AdamW update (bias-corrected moments, decoupled weight decay).
/// `step` counts updates starting at 1.
inline void adamw_step(std::span<NamedParameter> params, AdamState& state, const OptimizerConfig& cfg,
                       std::size_t step, double lr) {
  if (step == 0) throw ContractViolation("adamw_step: step counts from 1");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].tensor;
    if (!p.has_grad()) throw ContractViolation("adamw_step: parameter '" + params[k].name + "' has no gradient");
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != p.numel()) {
      m.assign(p.numel(), 0.0);
      v.assign(p.numel(), 0.0);
    }
    auto data = p.mutable_data();
    auto g = p.grad();
    const double decay = params[k].decay ? lr * cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      data[i] -= decay * data[i];
      data[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

struct SgdConfig {
  double base_lr = 0.01;
  double momentum = 0.99;
  double weight_decay = 3e-5;
  bool nesterov = true;
  double poly_power = 0.9;
  std::size_t total_steps = 1;
};

/// Polynomial decay lr0·(1 − step/total)^power.
inline double poly_lr(std::size_t step, const SgdConfig& cfg) {
  if (step >= cfg.total_steps) return 0.0;
  return cfg.base_lr *
         std::pow(1.0 - static_cast<double>(step) / static_cast<double>(cfg.total_steps), cfg.poly_power);
}

struct SgdState {
  std::vector<std::vector<double>> velocity;
};

/// Momentum SGD with L2 weight decay folded into the gradient.
inline void sgd_step(std::span<NamedParameter> params, SgdState& state, const SgdConfig& cfg, double lr) {
  if (state.velocity.size() != params.size()) state.velocity.assign(params.size(), {});
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = params[k].tensor;
    if (!p.has_grad()) throw ContractViolation("sgd_step: parameter '" + params[k].name + "' has no gradient");
    auto& buf = state.velocity[k];
    if (buf.size() != p.numel()) buf.assign(p.numel(), 0.0);
    auto data = p.mutable_data();
    auto g = p.grad();
    const double wd = params[k].decay ? cfg.weight_decay : 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double d = g[i] + wd * data[i];
      buf[i] = cfg.momentum * buf[i] + d;
      const double update = cfg.nesterov ? d + cfg.momentum * buf[i] : buf[i];
      data[i] -= lr * update;
    }
  }
}

}  // namespace asa
