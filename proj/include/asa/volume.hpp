#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "asa/rng.hpp"
#include "asa/tensor.hpp"

namespace asa {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class CorruptionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Dims {
  std::size_t t = 0, h = 0, w = 0;

  std::size_t count() const { return t * h * w; }
  std::size_t operator[](std::size_t axis) const { return axis == 0 ? t : axis == 1 ? h : w; }
  bool operator==(const Dims&) const = default;
};

inline std::string dims_str(const Dims& d) {
  return std::to_string(d.t) + "x" + std::to_string(d.h) + "x" + std::to_string(d.w);
}

/// Dense scalar volume, row-major with w fastest, plus optional per-voxel labels.
struct Volume {
  Dims dims;
  std::vector<float> voxels;
  std::optional<std::vector<std::uint8_t>> labels;

  Volume() = default;
  explicit Volume(Dims d, float fill = 0.0f) : dims(d), voxels(d.count(), fill) {}

  std::size_t index(std::size_t t, std::size_t h, std::size_t w) const { return (t * dims.h + h) * dims.w + w; }
  float at(std::size_t t, std::size_t h, std::size_t w) const { return voxels[index(t, h, w)]; }
  float& at(std::size_t t, std::size_t h, std::size_t w) { return voxels[index(t, h, w)]; }

  void validate() const {
    if (dims.t == 0 || dims.h == 0 || dims.w == 0) throw ContractViolation("volume dims must be positive");
    if (voxels.size() != dims.count()) throw ContractViolation("voxel count does not match dims " + dims_str(dims));
    if (labels && labels->size() != dims.count())
      throw ContractViolation("label count does not match dims " + dims_str(dims));
  }

  bool operator==(const Volume&) const = default;
};

// --- ASAV container -------------------------------------------------------

namespace detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace detail

inline constexpr std::array<char, 4> kVolumeMagic{'A', 'S', 'A', 'V'};
inline constexpr std::uint8_t kVolumeVersion = 0x01;

inline std::vector<std::uint8_t> encode_volume(const Volume& v) {
  v.validate();
  std::vector<std::uint8_t> out(kVolumeMagic.begin(), kVolumeMagic.end());
  out.push_back(kVolumeVersion);
  out.push_back(v.labels ? 0x01 : 0x00);
  out.push_back(0);
  out.push_back(0);
  for (std::size_t axis = 0; axis < 3; ++axis) detail::put_u32(out, static_cast<std::uint32_t>(v.dims[axis]));
  out.reserve(out.size() + v.voxels.size() * 5);
  for (float f : v.voxels) detail::put_u32(out, std::bit_cast<std::uint32_t>(f));
  if (v.labels) out.insert(out.end(), v.labels->begin(), v.labels->end());
  return out;
}

inline Volume decode_volume(const std::vector<std::uint8_t>& bytes) {
  constexpr std::size_t header = 20;
  if (bytes.size() >= 4 && !std::equal(kVolumeMagic.begin(), kVolumeMagic.end(), bytes.begin()))
    throw FormatError("not an ASAV volume (bad magic)");
  if (bytes.size() < header) throw CorruptionError("ASAV header truncated");
  if (bytes[4] != kVolumeVersion) throw FormatError("unsupported ASAV version " + std::to_string(bytes[4]));
  const bool has_labels = bytes[5] & 0x01;
  Volume v;
  v.dims = {detail::get_u32(&bytes[8]), detail::get_u32(&bytes[12]), detail::get_u32(&bytes[16])};
  if (v.dims.count() == 0) throw CorruptionError("ASAV dims contain a zero extent");
  const std::size_t n = v.dims.count();
  const std::size_t expected = header + 4 * n + (has_labels ? n : 0);
  if (bytes.size() != expected)
    throw CorruptionError("ASAV payload is " + std::to_string(bytes.size()) + " bytes, dims " + dims_str(v.dims) +
                          " need " + std::to_string(expected));
  v.voxels.resize(n);
  for (std::size_t i = 0; i < n; ++i) v.voxels[i] = std::bit_cast<float>(detail::get_u32(&bytes[header + 4 * i]));
  if (has_labels) v.labels.emplace(bytes.begin() + static_cast<std::ptrdiff_t>(header + 4 * n), bytes.end());
  return v;
}

inline void save_volume(const Volume& v, const std::filesystem::path& path) {
  detail::write_file(path, encode_volume(v));
}

inline Volume load_volume(const std::filesystem::path& path) { return decode_volume(detail::read_file(path)); }

// --- phantom generator ----------------------------------------------------

struct PhantomSpec {
  Dims dims{32, 32, 32};
  std::uint64_t seed = 0;
  std::size_t n_structures = 3;
  std::size_t n_lesions = 1;
  double noise_sigma = 0.02;

  void validate() const {
    if (dims.t < 16 || dims.h < 16 || dims.w < 16) throw ContractViolation("phantom dims must each be >= 16");
    if (n_structures < 1) throw ContractViolation("phantom needs at least one mirrored structure");
    if (!(noise_sigma >= 0.0)) throw ContractViolation("noise_sigma must be >= 0");
  }
};

inline constexpr std::uint8_t kLabelBackground = 0;
inline constexpr std::uint8_t kLabelTissue = 1;
inline constexpr std::uint8_t kLabelLesion = 2;

namespace detail {

struct Ellipsoid {
  double ct, ch, cw;  // centre, voxel units
  double rt, rh, rw;  // semi-axes

  // Normalised radial distance: 1 on the surface.
  double distance(double t, double h, double w) const {
    const double a = (t - ct) / rt, b = (h - ch) / rh, c = (w - cw) / rw;
    return std::sqrt(a * a + b * b + c * c);
  }
};

// Smooth inside-indicator with a soft edge at distance 1.
inline double soft_inside(double d) { return 1.0 / (1.0 + std::exp(12.0 * (d - 1.0))); }

}  // namespace detail

/// Procedural brain-like phantom. Tissue (label 1) is a centred ellipsoid whose
/// internal sub-structures come in pairs mirrored across the mid-W plane; lesions
/// (label 2) are bright blobs placed freely inside the tissue.
///
/// With n_lesions = 0 and noise_sigma = 0 the intensity satisfies
/// v(t,h,w) == v(t,h,W-1-w) exactly: all centres are integers or half-integers,
/// so mirrored distances are computed from bit-identical operands.
inline Volume gen_phantom(const PhantomSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  const Dims d = spec.dims;
  const double T = static_cast<double>(d.t), H = static_cast<double>(d.h), W = static_cast<double>(d.w);

  const detail::Ellipsoid brain{(T - 1) / 2, (H - 1) / 2, (W - 1) / 2, 0.40 * T, 0.42 * H, 0.38 * W};

  struct Pair {
    detail::Ellipsoid left, right;
    double amplitude;
  };
  std::vector<Pair> pairs;
  for (std::size_t k = 0; k < spec.n_structures; ++k) {
    const double ct = std::round(brain.ct + rng.uniform(-0.45, 0.45) * brain.rt);
    const double ch = std::round(brain.ch + rng.uniform(-0.45, 0.45) * brain.rh);
    const double cw = std::round(brain.cw - rng.uniform(0.15, 0.55) * brain.rw);
    const double rt = rng.uniform(0.08, 0.16) * T, rh = rng.uniform(0.08, 0.16) * H, rw = rng.uniform(0.06, 0.12) * W;
    double amp = rng.uniform(0.12, 0.3);
    if (rng.uniform() < 0.5) amp = -amp;
    pairs.push_back({{ct, ch, cw, rt, rh, rw}, {ct, ch, (W - 1) - cw, rt, rh, rw}, amp});
  }

  std::vector<detail::Ellipsoid> lesions;
  std::vector<double> lesion_amp;
  constexpr int kMaxAttempts = 1000;
  for (std::size_t k = 0; k < spec.n_lesions; ++k) {
    bool placed = false;
    for (int attempt = 0; attempt < kMaxAttempts && !placed; ++attempt) {
      const double r = rng.uniform(0.11, 0.16) * std::min({T, H, W});
      const detail::Ellipsoid cand{brain.ct + rng.uniform(-0.6, 0.6) * brain.rt,
                                   brain.ch + rng.uniform(-0.6, 0.6) * brain.rh,
                                   brain.cw + rng.uniform(-0.6, 0.6) * brain.rw, r, r, r};
      // Fully inside tissue: the far side of the blob stays within the ellipsoid.
      const double reach = std::max({r / brain.rt, r / brain.rh, r / brain.rw});
      if (brain.distance(cand.ct, cand.ch, cand.cw) + reach > 0.9) continue;
      bool overlaps = false;
      for (const auto& other : lesions) {
        const double dt = cand.ct - other.ct, dh = cand.ch - other.ch, dw = cand.cw - other.cw;
        if (std::sqrt(dt * dt + dh * dh + dw * dw) < cand.rt + other.rt + 1.0) overlaps = true;
      }
      if (overlaps) continue;
      lesions.push_back(cand);
      lesion_amp.push_back(rng.uniform(0.8, 1.0));
      placed = true;
    }
    if (!placed)
      throw std::runtime_error("phantom: could not place lesion " + std::to_string(k) +
                               " fully inside tissue without overlapping other lesions after " +
                               std::to_string(kMaxAttempts) + " attempts");
  }

  Volume v(d);
  v.labels.emplace(d.count(), kLabelBackground);
  std::vector<double> field(d.count());
  for (std::size_t t = 0; t < d.t; ++t)
    for (std::size_t h = 0; h < d.h; ++h)
      for (std::size_t w = 0; w < d.w; ++w) {
        const double ft = static_cast<double>(t), fh = static_cast<double>(h), fw = static_cast<double>(w);
        const std::size_t idx = v.index(t, h, w);
        const double db = brain.distance(ft, fh, fw);
        double value = 0.5 * detail::soft_inside(db);
        if (db <= 1.0) (*v.labels)[idx] = kLabelTissue;
        for (const auto& p : pairs) {
          const double a = detail::soft_inside(p.left.distance(ft, fh, fw));
          const double b = detail::soft_inside(p.right.distance(ft, fh, fw));
          value += p.amplitude * (a + b) * detail::soft_inside(db);
        }
        for (std::size_t k = 0; k < lesions.size(); ++k) {
          const double dl = lesions[k].distance(ft, fh, fw);
          value += lesion_amp[k] * detail::soft_inside(dl);
          if (dl <= 1.0) (*v.labels)[idx] = kLabelLesion;
        }
        field[idx] = value;
      }
  if (spec.noise_sigma > 0.0)
    for (auto& x : field) x += spec.noise_sigma * rng.normal();

  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  const double mn = *lo, range = *hi - *lo;
  for (std::size_t i = 0; i < field.size(); ++i)
    v.voxels[i] = range > 0.0 ? static_cast<float>((field[i] - mn) / range) : 0.0f;
  return v;
}

// --- cropping and augmentation -------------------------------------------

/// Centred sub-box; per-axis offset floor((in - out) / 2).
inline Volume center_crop(const Volume& v, Dims out) {
  if (out.t == 0 || out.h == 0 || out.w == 0 || out.t > v.dims.t || out.h > v.dims.h || out.w > v.dims.w)
    throw ContractViolation("center_crop: " + dims_str(out) + " does not fit inside " + dims_str(v.dims));
  const std::size_t ot = (v.dims.t - out.t) / 2, oh = (v.dims.h - out.h) / 2, ow = (v.dims.w - out.w) / 2;
  Volume r(out);
  if (v.labels) r.labels.emplace(out.count());
  for (std::size_t t = 0; t < out.t; ++t)
    for (std::size_t h = 0; h < out.h; ++h)
      for (std::size_t w = 0; w < out.w; ++w) {
        const std::size_t src = v.index(t + ot, h + oh, w + ow);
        r.at(t, h, w) = v.voxels[src];
        if (v.labels) (*r.labels)[r.index(t, h, w)] = (*v.labels)[src];
      }
  return r;
}

/// Reverses one axis (0 = t, 1 = h, 2 = w) of intensities and labels together.
inline Volume flip_axis(const Volume& v, std::size_t axis) {
  Volume r = v;
  const Dims d = v.dims;
  for (std::size_t t = 0; t < d.t; ++t)
    for (std::size_t h = 0; h < d.h; ++h)
      for (std::size_t w = 0; w < d.w; ++w) {
        const std::size_t st = axis == 0 ? d.t - 1 - t : t;
        const std::size_t sh = axis == 1 ? d.h - 1 - h : h;
        const std::size_t sw = axis == 2 ? d.w - 1 - w : w;
        r.voxels[r.index(t, h, w)] = v.voxels[v.index(st, sh, sw)];
        if (v.labels) (*r.labels)[r.index(t, h, w)] = (*v.labels)[v.index(st, sh, sw)];
      }
  return r;
}

inline Volume apply_gamma(const Volume& v, double gamma) {
  Volume r = v;
  for (auto& x : r.voxels) x = static_cast<float>(std::pow(static_cast<double>(x), gamma));
  return r;
}

struct AugmentParams {
  std::array<bool, 3> flip{false, false, false};
  double gamma = 1.0;
};

/// Draws per-axis flips (probability 0.5 each) and gamma ~ U[0.7, 1.5].
inline AugmentParams draw_augment(std::uint64_t seed) {
  Rng rng(seed);
  AugmentParams p;
  for (auto& f : p.flip) f = rng.uniform() < 0.5;
  p.gamma = rng.uniform(0.7, 1.5);
  return p;
}

inline Volume apply_augment(const Volume& v, const AugmentParams& p) {
  Volume r = v;
  for (std::size_t axis = 0; axis < 3; ++axis)
    if (p.flip[axis]) r = flip_axis(r, axis);
  if (p.gamma != 1.0) r = apply_gamma(r, p.gamma);
  return r;
}

inline Volume augment(const Volume& v, std::uint64_t seed) { return apply_augment(v, draw_augment(seed)); }

}  // namespace asa
