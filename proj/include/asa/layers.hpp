#pragma once

#include <string>
#include <vector>

#include "asa/ops.hpp"
#include "asa/optim.hpp"
#include "asa/rng.hpp"

namespace asa {

using ParameterList = std::vector<NamedParameter>;

inline void register_parameter(ParameterList& out, std::string name, const Tensor& t) {
  out.push_back({std::move(name), t, t.rank() > 1});
}

/// Affine map x·W + b with W stored [in, out].
struct Linear {
  Tensor weight;
  Tensor bias;

  static Linear xavier(std::size_t in, std::size_t out, Rng& rng) {
    return {xavier_uniform({in, out}, rng), Tensor::zeros({out}, true)};
  }
  static Linear zeros(std::size_t in, std::size_t out) {
    return {Tensor::zeros({in, out}, true), Tensor::zeros({out}, true)};
  }

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor operator()(const Tensor& x) const { return linear(x, weight, bias); }

  void collect(const std::string& prefix, ParameterList& out) const {
    register_parameter(out, prefix + ".weight", weight);
    register_parameter(out, prefix + ".bias", bias);
  }
};

struct LayerNorm {
  Tensor gain;
  Tensor bias;

  static LayerNorm identity(std::size_t dim) { return {Tensor::full({dim}, 1.0, true), Tensor::zeros({dim}, true)}; }

  Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }

  void collect(const std::string& prefix, ParameterList& out) const {
    register_parameter(out, prefix + ".gain", gain);
    register_parameter(out, prefix + ".bias", bias);
  }
};

/// 3D convolution with a cubic kernel, weight [out, in, k, k, k].
struct Conv3d {
  Tensor weight;
  Tensor bias;

  static Conv3d xavier(std::size_t in, std::size_t out, std::size_t k, Rng& rng) {
    return {xavier_uniform({out, in, k, k, k}, rng), Tensor::zeros({out}, true)};
  }

  Tensor operator()(const Tensor& x) const { return conv3d(x, weight, bias); }

  void collect(const std::string& prefix, ParameterList& out) const {
    register_parameter(out, prefix + ".weight", weight);
    register_parameter(out, prefix + ".bias", bias);
  }
};

}  // namespace asa
