#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "asa/patching.hpp"
#include "asa/tensor.hpp"

namespace asa {

enum class EncodingKind { symmetric, vanilla };

inline std::string to_string(EncodingKind k) { return k == EncodingKind::symmetric ? "spe" : "vanilla"; }

inline EncodingKind parse_encoding_kind(const std::string& s) {
  if (s == "spe" || s == "symmetric") return EncodingKind::symmetric;
  if (s == "vanilla") return EncodingKind::vanilla;
  throw ContractViolation("unknown encoding kind '" + s + "' (expected spe or vanilla)");
}

namespace detail {

inline void require_even_dim(std::size_t dim) {
  if (dim < 2 || dim % 2 != 0) throw ContractViolation("encoding dimension must be even and >= 2");
}

}  // namespace detail

/// Symmetric position encoding of patch (t, h, w) on a patch grid.
///
/// Pos_i = (T²·t + H·h − |W/2 − w| + W/2) / 10000^(2i/D), i = 1..D/2, written as
/// sin to entry 2(i−1) and cos to entry 2(i−1)+1. Coordinates are zero-based and
/// W/2 is exact, so columns w and W−w get identical vectors.
inline std::vector<double> spe_vector(std::size_t t, std::size_t h, std::size_t w, const PatchGrid& grid,
                                      std::size_t dim) {
  detail::require_even_dim(dim);
  if (t >= grid.t || h >= grid.h || w >= grid.w)
    throw ContractViolation("spe_vector: coordinate (" + std::to_string(t) + "," + std::to_string(h) + "," +
                            std::to_string(w) + ") outside grid");
  const double T = static_cast<double>(grid.t), H = static_cast<double>(grid.h), W = static_cast<double>(grid.w);
  const double half_w = W / 2.0;
  const double numerator =
      T * T * static_cast<double>(t) + H * static_cast<double>(h) - std::fabs(half_w - static_cast<double>(w)) + half_w;
  std::vector<double> out(dim);
  for (std::size_t k = 0; k < dim / 2; ++k) {
    const double i = static_cast<double>(k + 1);
    const double pos = numerator / std::pow(10000.0, 2.0 * i / static_cast<double>(dim));
    out[2 * k] = std::sin(pos);
    out[2 * k + 1] = std::cos(pos);
  }
  return out;
}

/// Standard sinusoidal encoding of a flattened patch index.
inline std::vector<double> vanilla_pe_vector(std::size_t flat_index, std::size_t dim) {
  detail::require_even_dim(dim);
  std::vector<double> out(dim);
  for (std::size_t i = 0; i < dim / 2; ++i) {
    const double pos = static_cast<double>(flat_index) /
                       std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(dim));
    out[2 * i] = std::sin(pos);
    out[2 * i + 1] = std::cos(pos);
  }
  return out;
}

/// One encoding row per patch, in patch order.
struct EncodingTable {
  PatchGrid grid;
  std::size_t dim = 0;
  std::vector<double> values;  // [grid.count(), dim]

  std::span<const double> row(std::size_t patch) const { return {values.data() + patch * dim, dim}; }
  Tensor as_tensor() const { return Tensor({grid.count(), dim}, values); }
};

inline EncodingTable encoding_table(const PatchGrid& grid, std::size_t dim, EncodingKind kind) {
  detail::require_even_dim(dim);
  EncodingTable table{grid, dim, {}};
  table.values.reserve(grid.count() * dim);
  for (std::size_t p = 0; p < grid.count(); ++p) {
    const auto [t, h, w] = grid.coords(p);
    const auto row = kind == EncodingKind::symmetric ? spe_vector(t, h, w, grid, dim) : vanilla_pe_vector(p, dim);
    table.values.insert(table.values.end(), row.begin(), row.end());
  }
  return table;
}

inline EncodingTable spe_table(const PatchGrid& grid, std::size_t dim) {
  return encoding_table(grid, dim, EncodingKind::symmetric);
}

}  // namespace asa
