#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <vector>

#include "asa/patching.hpp"
#include "asa/volume.hpp"

// Gradient-orientation informativeness of patches. Axis convention: x runs
// along w, y along h, z along t.

namespace asa {

/// Per-voxel [-1, 0, 1] gradients with replicate padding, plus the spherical
/// orientation of each gradient. Angles are NaN where the magnitude is zero.
struct GradientField {
  Dims dims;
  std::vector<double> gx, gy, gz;
  std::vector<double> magnitude;
  std::vector<double> theta;  // polar angle from +z, [0, pi]
  std::vector<double> phi;    // |atan2(gy, gx)|, [0, pi]
};

inline GradientField compute_gradient_field(const Volume& v) {
  v.validate();
  const Dims d = v.dims;
  if (d.t < 3 || d.h < 3 || d.w < 3) throw ContractViolation("gradient field needs every axis >= 3");
  GradientField f;
  f.dims = d;
  const std::size_t n = d.count();
  f.gx.resize(n);
  f.gy.resize(n);
  f.gz.resize(n);
  f.magnitude.resize(n);
  f.theta.resize(n);
  f.phi.resize(n);
  auto value = [&](std::size_t t, std::size_t h, std::size_t w) { return static_cast<double>(v.at(t, h, w)); };
  for (std::size_t t = 0; t < d.t; ++t)
    for (std::size_t h = 0; h < d.h; ++h)
      for (std::size_t w = 0; w < d.w; ++w) {
        const std::size_t i = v.index(t, h, w);
        const std::size_t tm = t ? t - 1 : t, tp = t + 1 < d.t ? t + 1 : t;
        const std::size_t hm = h ? h - 1 : h, hp = h + 1 < d.h ? h + 1 : h;
        const std::size_t wm = w ? w - 1 : w, wp = w + 1 < d.w ? w + 1 : w;
        const double gx = value(t, h, wp) - value(t, h, wm);
        const double gy = value(t, hp, w) - value(t, hm, w);
        const double gz = value(tp, h, w) - value(tm, h, w);
        const double mag = std::sqrt(gx * gx + gy * gy + gz * gz);
        f.gx[i] = gx;
        f.gy[i] = gy;
        f.gz[i] = gz;
        f.magnitude[i] = mag;
        if (mag > 0.0) {
          f.theta[i] = std::acos(gz / mag);
          f.phi[i] = std::fabs(std::atan2(gy, gx));
        } else {
          f.theta[i] = f.phi[i] = std::numeric_limits<double>::quiet_NaN();
        }
      }
  return f;
}

/// Orientation bin of an angle in [0, pi]; pi itself lands in the last bin.
inline std::size_t orientation_bin(double angle, std::size_t bins) {
  const auto r = static_cast<std::size_t>(std::floor(angle / (std::numbers::pi / static_cast<double>(bins))));
  return std::min(r, bins - 1);
}

/// b×b (theta, phi) histogram of one patch, magnitude-weighted, L2-normalised.
/// Gradient-free patches yield an all-zero histogram.
inline std::vector<double> patch_histogram(const GradientField& field, const PatchGrid& grid, std::size_t patch,
                                           std::size_t bins) {
  if (bins < 2) throw ContractViolation("histogram needs at least 2 bins per angle");
  if (patch >= grid.count()) throw ContractViolation("patch index out of range");
  std::vector<double> hist(bins * bins, 0.0);
  const auto [pt, ph, pw] = grid.coords(patch);
  const std::size_t s = grid.s;
  for (std::size_t a = 0; a < s; ++a)
    for (std::size_t b = 0; b < s; ++b)
      for (std::size_t c = 0; c < s; ++c) {
        const std::size_t i = ((pt * s + a) * field.dims.h + (ph * s + b)) * field.dims.w + (pw * s + c);
        const double mag = field.magnitude[i];
        if (!(mag > 0.0)) continue;
        hist[orientation_bin(field.theta[i], bins) * bins + orientation_bin(field.phi[i], bins)] += mag;
      }
  double norm2 = 0.0;
  for (double x : hist) norm2 += x * x;
  if (norm2 > 0.0) {
    const double norm = std::sqrt(norm2);
    for (double& x : hist) x /= norm;
  }
  return hist;
}

/// Normalised histograms and their means for every patch of a volume.
struct InformativenessMap {
  std::size_t bins = 0;
  std::vector<std::vector<double>> histograms;  // per patch, b*b
  std::vector<double> mean;                     // per patch
};

inline InformativenessMap informativeness_map(const Volume& v, const PatchGrid& grid, std::size_t bins) {
  if (v.dims != grid.volume_dims()) throw ContractViolation("volume dims do not match patch grid");
  const auto field = compute_gradient_field(v);
  InformativenessMap map;
  map.bins = bins;
  map.histograms.reserve(grid.count());
  for (std::size_t p = 0; p < grid.count(); ++p) {
    auto hist = patch_histogram(field, grid, p, bins);
    double total = 0.0;
    for (double x : hist) total += x;
    map.mean.push_back(total / static_cast<double>(bins * bins));
    map.histograms.push_back(std::move(hist));
  }
  return map;
}

/// p_i = mean_i / sum_j mean_j over the listed patches, in list order. The sum
/// runs in ascending patch order so the result does not depend on how the list
/// is enumerated. Falls back to uniform weights when every mean is ~0.
inline std::vector<double> normalize_weights(std::span<const double> patch_means, std::span<const std::size_t> patches) {
  if (patches.empty()) throw ContractViolation("informativeness weights need a non-empty masked set");
  std::vector<std::size_t> sorted(patches.begin(), patches.end());
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (auto i : sorted) total += patch_means[i];
  std::vector<double> p(patches.size());
  if (total < 1e-12) {
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(patches.size()));
    return p;
  }
  for (std::size_t k = 0; k < patches.size(); ++k) p[k] = patch_means[patches[k]] / total;
  return p;
}

/// Attention weights of the masked patches (ordered as plan.masked), computed
/// from the original, unmasked volume.
inline std::vector<double> informativeness_weights(const Volume& v, const PatchGrid& grid, const MaskPlan& plan,
                                                   std::size_t bins) {
  if (plan.masked.empty()) throw ContractViolation("informativeness weights need a non-empty masked set");
  if (plan.total() != grid.count()) throw ContractViolation("mask plan does not cover the patch grid");
  const auto map = informativeness_map(v, grid, bins);
  return normalize_weights(map.mean, plan.masked);
}

}  // namespace asa
