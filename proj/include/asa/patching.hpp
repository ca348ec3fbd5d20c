#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "asa/rng.hpp"
#include "asa/tensor.hpp"
#include "asa/volume.hpp"

namespace asa {

/// Non-overlapping s³ tiling of a volume. Patches are numbered row-major over
/// (t, h, w) patch coordinates with w fastest.
struct PatchGrid {
  std::size_t s = 0;
  std::size_t t = 0, h = 0, w = 0;

  std::size_t count() const { return t * h * w; }
  std::size_t patch_voxels() const { return s * s * s; }
  std::size_t index(std::size_t pt, std::size_t ph, std::size_t pw) const { return (pt * h + ph) * w + pw; }
  std::array<std::size_t, 3> coords(std::size_t idx) const { return {idx / (h * w), (idx / w) % h, idx % w}; }
  Dims volume_dims() const { return {t * s, h * s, w * s}; }
  bool operator==(const PatchGrid&) const = default;
};

inline PatchGrid make_patch_grid(const Dims& dims, std::size_t s) {
  if (s == 0) throw ContractViolation("patch size must be positive");
  const char* names[3] = {"T", "H", "W"};
  for (std::size_t axis = 0; axis < 3; ++axis)
    if (dims[axis] == 0 || dims[axis] % s != 0)
      throw ContractViolation(std::string("axis ") + names[axis] + " extent " + std::to_string(dims[axis]) +
                              " is not divisible by patch size " + std::to_string(s));
  return {s, dims.t / s, dims.h / s, dims.w / s};
}

/// Row-major [count, length] matrix of flattened patches.
struct Patches {
  std::size_t count = 0;
  std::size_t length = 0;
  std::vector<double> values;

  std::span<const double> row(std::size_t i) const { return {values.data() + i * length, length}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * length, length}; }

  Tensor as_tensor(bool requires_grad = false) const { return Tensor({count, length}, values, requires_grad); }
};

inline Patches patchify(const Volume& v, std::size_t s) {
  v.validate();
  const PatchGrid g = make_patch_grid(v.dims, s);
  Patches p{g.count(), g.patch_voxels(), std::vector<double>(v.voxels.size())};
  for (std::size_t idx = 0; idx < g.count(); ++idx) {
    const auto [pt, ph, pw] = g.coords(idx);
    auto out = p.row(idx);
    std::size_t j = 0;
    for (std::size_t a = 0; a < s; ++a)
      for (std::size_t b = 0; b < s; ++b)
        for (std::size_t c = 0; c < s; ++c) out[j++] = v.at(pt * s + a, ph * s + b, pw * s + c);
  }
  return p;
}

inline Volume unpatchify(const Patches& p, const PatchGrid& g) {
  if (p.count != g.count() || p.length != g.patch_voxels() || p.values.size() != p.count * p.length)
    throw ContractViolation("unpatchify: patches do not match grid " + std::to_string(g.t) + "x" +
                            std::to_string(g.h) + "x" + std::to_string(g.w) + " at s=" + std::to_string(g.s));
  Volume v(g.volume_dims());
  const std::size_t s = g.s;
  for (std::size_t idx = 0; idx < g.count(); ++idx) {
    const auto [pt, ph, pw] = g.coords(idx);
    auto in = p.row(idx);
    std::size_t j = 0;
    for (std::size_t a = 0; a < s; ++a)
      for (std::size_t b = 0; b < s; ++b)
        for (std::size_t c = 0; c < s; ++c) v.at(pt * s + a, ph * s + b, pw * s + c) = static_cast<float>(in[j++]);
  }
  return v;
}

/// Which patches are hidden from the encoder.
struct MaskPlan {
  double mask_ratio = 0.0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> masked;   // sorted
  std::vector<std::size_t> visible;  // sorted

  std::size_t total() const { return masked.size() + visible.size(); }
};

inline std::size_t masked_count(std::size_t n_patches, double mask_ratio) {
  return static_cast<std::size_t>(std::llround(mask_ratio * static_cast<double>(n_patches)));
}

/// Uniform random subset of round(mask_ratio * n) patches via a seeded Fisher–Yates shuffle.
inline MaskPlan make_mask_plan(std::size_t n_patches, double mask_ratio, std::uint64_t seed) {
  if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ContractViolation("mask_ratio must lie in (0, 1)");
  const std::size_t k = masked_count(n_patches, mask_ratio);
  if (k == 0 || k >= n_patches)
    throw ContractViolation("mask plan for " + std::to_string(n_patches) + " patches at ratio " +
                            std::to_string(mask_ratio) + " leaves the masked or visible set empty");
  std::vector<std::size_t> order(n_patches);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = n_patches - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
  MaskPlan plan{mask_ratio, seed, {order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k)},
                {order.begin() + static_cast<std::ptrdiff_t>(k), order.end()}};
  std::sort(plan.masked.begin(), plan.masked.end());
  std::sort(plan.visible.begin(), plan.visible.end());
  return plan;
}

/// Builds a plan from an explicit masked set (used by tests and the reconstruct tool).
/// Either set may be empty here; the training path always uses make_mask_plan.
inline MaskPlan mask_plan_from(std::size_t n_patches, std::vector<std::size_t> masked) {
  std::sort(masked.begin(), masked.end());
  if (std::adjacent_find(masked.begin(), masked.end()) != masked.end())
    throw ContractViolation("mask_plan_from: duplicate patch index");
  if (!masked.empty() && masked.back() >= n_patches) throw ContractViolation("mask_plan_from: index out of range");
  MaskPlan plan;
  plan.masked = std::move(masked);
  for (std::size_t i = 0, j = 0; i < n_patches; ++i) {
    if (j < plan.masked.size() && plan.masked[j] == i)
      ++j;
    else
      plan.visible.push_back(i);
  }
  plan.mask_ratio = n_patches ? static_cast<double>(plan.masked.size()) / static_cast<double>(n_patches) : 0.0;
  return plan;
}

}  // namespace asa
