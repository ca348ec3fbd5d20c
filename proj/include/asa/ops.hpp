#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "asa/tensor.hpp"

// Differentiable primitives. Every op computes its forward result eagerly and
// registers a closure that pulls the output gradient back to its inputs.

namespace asa {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractViolation(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                            shape_str(b.shape()));
}

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

template <class Fwd, class Dfdx>
Tensor unary(const Tensor& x, Fwd f, Dfdx dfdx) {
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x, dfdx](const Node& self) {
    auto* gx = grad_sink(x);
    auto in = x.data();
    for (std::size_t i = 0; i < in.size(); ++i) (*gx)[i] += self.grad[i] * dfdx(in[i], self.data[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [a, b](const detail::Node& self) {
    for (const auto* t : {&a, &b})
      if (auto* g = grad_sink(*t))
        for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [a, b](const detail::Node& self) {
    if (auto* g = grad_sink(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_sink(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "mul");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [a, b](const detail::Node& self) {
    auto x = a.data(), y = b.data();
    if (auto* g = grad_sink(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * y[i];
    if (auto* g = grad_sink(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] * x[i];
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "div");
  auto x = a.data(), y = b.data();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / y[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [a, b](const detail::Node& self) {
    auto x = a.data(), y = b.data();
    if (auto* g = grad_sink(a))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i] / y[i];
    if (auto* g = grad_sink(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] -= self.grad[i] * x[i] / (y[i] * y[i]);
  });
}

/// x + b where b has the length of x's last axis and is broadcast over the rest.
inline Tensor add_bias(const Tensor& x, const Tensor& b) {
  const std::size_t n = x.shape().back();
  if (b.numel() != n)
    throw ContractViolation("add_bias: bias length " + std::to_string(b.numel()) + " != last axis " +
                            std::to_string(n));
  auto in = x.data(), bias = b.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + bias[i % n];
  return Tensor::from_op(x.shape(), std::move(out), {x, b}, [x, b, n](const detail::Node& self) {
    if (auto* g = grad_sink(x))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
    if (auto* g = grad_sink(b))
      for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i % n] += self.grad[i];
  });
}

inline Tensor scale(const Tensor& x, double c) {
  return detail::unary(
      x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

inline Tensor square(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return v * v; }, [](double v, double) { return 2.0 * v; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return detail::unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) { return 0.5 * (1.0 + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(-0.5 * v * v); });
}

inline Tensor sum(const Tensor& x) {
  double total = 0.0;
  for (double v : x.data()) total += v;
  return Tensor::from_op({1}, {total}, {x}, [x](const detail::Node& self) {
    auto* g = grad_sink(x);
    for (auto& v : *g) v += self.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

/// Sums over the last axis. A rank-1 input reduces to shape [1].
inline Tensor sum_last(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Shape out_shape(x.shape().begin(), x.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  auto in = x.data();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < n; ++j) out[r] += in[r * n + j];
  return Tensor::from_op(out_shape, std::move(out), {x}, [x, n, rows](const detail::Node& self) {
    auto* g = grad_sink(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < n; ++j) (*g)[r * n + j] += self.grad[r];
  });
}

inline Tensor mean_last(const Tensor& x) {
  return scale(sum_last(x), 1.0 / static_cast<double>(x.shape().back()));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ContractViolation("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  return Tensor::from_op(std::move(shape), std::move(out), {x}, [x](const detail::Node& self) {
    auto* g = grad_sink(x);
    for (std::size_t i = 0; i < self.grad.size(); ++i) (*g)[i] += self.grad[i];
  });
}

/// Reorders axes: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const auto& in_shape = x.shape();
  const std::size_t rank = in_shape.size();
  if (perm.size() != rank) throw ContractViolation("permute: rank mismatch");
  std::vector<bool> seen(rank, false);
  for (auto p : perm) {
    if (p >= rank || seen[p]) throw ContractViolation("permute: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in_shape[i];
  Shape out_shape(rank);
  std::vector<std::size_t> src_strides(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    out_shape[i] = in_shape[perm[i]];
    src_strides[i] = in_strides[perm[i]];
  }
  // Gather map: output flat index -> input flat index.
  std::vector<std::size_t> src(x.numel());
  std::vector<std::size_t> counter(rank, 0);
  std::size_t offset = 0;
  for (std::size_t i = 0; i < src.size(); ++i) {
    src[i] = offset;
    for (std::size_t ax = rank; ax-- > 0;) {
      offset += src_strides[ax];
      if (++counter[ax] < out_shape[ax]) break;
      offset -= src_strides[ax] * out_shape[ax];
      counter[ax] = 0;
    }
  }
  auto in = x.data();
  std::vector<double> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = in[src[i]];
  return Tensor::from_op(out_shape, std::move(out), {x}, [x, src = std::move(src)](const detail::Node& self) {
    auto* g = grad_sink(x);
    for (std::size_t i = 0; i < src.size(); ++i) (*g)[src[i]] += self.grad[i];
  });
}

/// Matrix product over the last two axes, optionally batched over a leading axis:
/// [m,k]x[k,n] or [B,m,k]x[B,k,n]. With transpose_b, b is [n,k] / [B,n,k].
inline Tensor matmul(const Tensor& a, const Tensor& b, bool transpose_b = false) {
  if (a.rank() != b.rank() || a.rank() < 2 || a.rank() > 3)
    throw ContractViolation("matmul: expects two rank-2 or two rank-3 tensors");
  const bool batched = a.rank() == 3;
  const std::size_t batch = batched ? a.dim(0) : 1;
  if (batched && b.dim(0) != batch) throw ContractViolation("matmul: batch mismatch");
  const std::size_t off = batched ? 1 : 0;
  const std::size_t m = a.dim(off), k = a.dim(off + 1);
  const std::size_t kb = transpose_b ? b.dim(off + 1) : b.dim(off);
  const std::size_t n = transpose_b ? b.dim(off) : b.dim(off + 1);
  if (k != kb)
    throw ContractViolation("matmul: inner extents differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));

  auto A = a.data(), B = b.data();
  std::vector<double> C(batch * m * n, 0.0);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* pa = A.data() + bi * m * k;
    const double* pb = B.data() + bi * k * n;
    double* pc = C.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = pc + i * n;
      if (transpose_b) {
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t p = 0; p < k; ++p) acc += pa[i * k + p] * pb[j * k + p];
          crow[j] = acc;
        }
      } else {
        for (std::size_t p = 0; p < k; ++p) {
          const double av = pa[i * k + p];
          const double* brow = pb + p * n;
          for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
      }
    }
  }
  Shape out_shape = batched ? Shape{batch, m, n} : Shape{m, n};
  return Tensor::from_op(out_shape, std::move(C), {a, b},
                         [a, b, batch, m, k, n, transpose_b](const detail::Node& self) {
                           auto A = a.data(), B = b.data();
                           const double* G = self.grad.data();
                           auto* ga = grad_sink(a);
                           auto* gb = grad_sink(b);
                           for (std::size_t bi = 0; bi < batch; ++bi) {
                             const double* pa = A.data() + bi * m * k;
                             const double* pb = B.data() + bi * k * n;
                             const double* pg = G + bi * m * n;
                             if (ga) {
                               double* pga = ga->data() + bi * m * k;
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t j = 0; j < n; ++j) {
                                   const double gv = pg[i * n + j];
                                   if (transpose_b)
                                     for (std::size_t p = 0; p < k; ++p) pga[i * k + p] += gv * pb[j * k + p];
                                   else
                                     for (std::size_t p = 0; p < k; ++p) pga[i * k + p] += gv * pb[p * n + j];
                                 }
                             }
                             if (gb) {
                               double* pgb = gb->data() + bi * k * n;
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                   const double av = pa[i * k + p];
                                   if (transpose_b)
                                     for (std::size_t j = 0; j < n; ++j) pgb[j * k + p] += av * pg[i * n + j];
                                   else
                                     for (std::size_t j = 0; j < n; ++j) pgb[p * n + j] += av * pg[i * n + j];
                                 }
                             }
                           }
                         });
}

/// x·W + b for x of shape [rows, in], W [in, out], b [out].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  return add_bias(matmul(x, weight), bias);
}

/// Softmax along `axis`, stabilised by subtracting the slice maximum.
/// Entries equal to -inf receive probability 0.
inline Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ContractViolation("softmax: axis out of range");
  const auto s = detail::split_axis(x.shape(), axis);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, in[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(in[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
    }
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x, s](const detail::Node& self) {
    auto* g = grad_sink(x);
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double dot = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) dot += gy[base + j * s.inner] * y[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t idx = base + j * s.inner;
          (*g)[idx] += y[idx] * (gy[idx] - dot);
        }
      }
  });
}

inline Tensor log_softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) throw ContractViolation("log_softmax: axis out of range");
  const auto s = detail::split_axis(x.shape(), axis);
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < s.extent; ++j) mx = std::max(mx, in[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) total += std::exp(in[base + j * s.inner] - mx);
      const double lse = mx + std::log(total);
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] = in[base + j * s.inner] - lse;
    }
  return Tensor::from_op(x.shape(), std::move(out), {x}, [x, s](const detail::Node& self) {
    auto* g = grad_sink(x);
    const auto& y = self.data;
    const auto& gy = self.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.extent * s.inner + i;
        double total = 0.0;
        for (std::size_t j = 0; j < s.extent; ++j) total += gy[base + j * s.inner];
        for (std::size_t j = 0; j < s.extent; ++j) {
          const std::size_t idx = base + j * s.inner;
          (*g)[idx] += gy[idx] - std::exp(y[idx]) * total;
        }
      }
  });
}

/// Normalises each last-axis slice to zero mean / unit variance, then applies gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
  const std::size_t n = x.shape().back();
  if (gain.numel() != n || bias.numel() != n)
    throw ContractViolation("layer_norm: gain/bias must match last axis " + std::to_string(n));
  if (!(eps > 0.0)) throw ContractViolation("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / n;
  auto in = x.data(), gv = gain.data(), bv = bias.data();
  std::vector<double> out(in.size()), xhat(in.size()), rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (row[j] - mu) * rstd[r];
      out[r * n + j] = xhat[r * n + j] * gv[j] + bv[j];
    }
  }
  return Tensor::from_op(
      x.shape(), std::move(out), {x, gain, bias},
      [x, gain, bias, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](const detail::Node& self) {
        auto gv = gain.data();
        const auto& gy = self.grad;
        auto* gx = grad_sink(x);
        auto* gg = grad_sink(gain);
        auto* gb = grad_sink(bias);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = r * n + j;
            const double d = gy[idx] * gv[j];
            mean_d += d;
            mean_dx += d * xhat[idx];
            if (gg) (*gg)[j] += gy[idx] * xhat[idx];
            if (gb) (*gb)[j] += gy[idx];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          if (gx)
            for (std::size_t j = 0; j < n; ++j) {
              const std::size_t idx = r * n + j;
              (*gx)[idx] += rstd[r] * (gy[idx] * gv[j] - mean_d - xhat[idx] * mean_dx);
            }
        }
      });
}

/// Selects rows (slices along axis 0). Indices may repeat; gradients scatter-add.
inline Tensor gather_rows(const Tensor& x, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw ContractViolation("gather_rows: empty index list");
  const std::size_t rows = x.dim(0);
  const std::size_t width = x.numel() / rows;
  for (auto i : indices)
    if (i >= rows) throw ContractViolation("gather_rows: index " + std::to_string(i) + " out of range");
  Shape out_shape = x.shape();
  out_shape[0] = indices.size();
  auto in = x.data();
  std::vector<double> out(indices.size() * width);
  for (std::size_t r = 0; r < indices.size(); ++r)
    std::copy_n(in.data() + indices[r] * width, width, out.data() + r * width);
  return Tensor::from_op(out_shape, std::move(out), {x}, [x, indices, width](const detail::Node& self) {
    auto* g = grad_sink(x);
    for (std::size_t r = 0; r < indices.size(); ++r)
      for (std::size_t j = 0; j < width; ++j) (*g)[indices[r] * width + j] += self.grad[r * width + j];
  });
}

/// Cyclic shift along axis 0: out[i] = x[(i + shift) mod L].
inline Tensor roll_rows(const Tensor& x, std::ptrdiff_t shift) {
  const auto rows = static_cast<std::ptrdiff_t>(x.dim(0));
  std::vector<std::size_t> idx(x.dim(0));
  for (std::ptrdiff_t i = 0; i < rows; ++i) idx[i] = static_cast<std::size_t>(((i + shift) % rows + rows) % rows);
  return gather_rows(x, idx);
}

inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (begin >= end || end > x.dim(0)) throw ContractViolation("slice_rows: bad range");
  std::vector<std::size_t> idx(end - begin);
  std::iota(idx.begin(), idx.end(), begin);
  return gather_rows(x, idx);
}

/// Concatenates along axis 0; all other extents must agree.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractViolation("concat_rows: nothing to concatenate");
  Shape tail(parts[0].shape().begin() + 1, parts[0].shape().end());
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (Shape(p.shape().begin() + 1, p.shape().end()) != tail)
      throw ContractViolation("concat_rows: trailing extents differ");
    rows += p.dim(0);
    out.insert(out.end(), p.data().begin(), p.data().end());
  }
  Shape out_shape{rows};
  out_shape.insert(out_shape.end(), tail.begin(), tail.end());
  return Tensor::from_op(out_shape, std::move(out), parts, [parts](const detail::Node& self) {
    std::size_t offset = 0;
    for (const auto& p : parts) {
      if (auto* g = grad_sink(p))
        for (std::size_t i = 0; i < p.numel(); ++i) (*g)[i] += self.grad[offset + i];
      offset += p.numel();
    }
  });
}

/// Same-size 3D convolution with zero padding.
/// x: [Cin, T, H, W], weight: [Cout, Cin, k, k, k] (k odd), bias: [Cout].
inline Tensor conv3d(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  if (x.rank() != 4 || weight.rank() != 5) throw ContractViolation("conv3d: expects [C,T,H,W] input and 5-D weight");
  const std::size_t cin = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k || weight.dim(4) != k || k % 2 == 0)
    throw ContractViolation("conv3d: weight shape " + shape_str(weight.shape()) + " incompatible with input " +
                            shape_str(x.shape()));
  if (bias.numel() != cout) throw ContractViolation("conv3d: bias length must equal output channels");

  // Visits every (output row, input row, tap) triple; `body` sees the overlapping w-range.
  auto for_each_tap = [=](auto&& body) {
    const auto r = static_cast<std::ptrdiff_t>(k / 2);
    for (std::size_t co = 0; co < cout; ++co)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t kt = 0; kt < k; ++kt)
          for (std::size_t kh = 0; kh < k; ++kh)
            for (std::size_t kw = 0; kw < k; ++kw) {
              const std::size_t widx = (((co * cin + ci) * k + kt) * k + kh) * k + kw;
              const std::ptrdiff_t dt = static_cast<std::ptrdiff_t>(kt) - r;
              const std::ptrdiff_t dh = static_cast<std::ptrdiff_t>(kh) - r;
              const std::ptrdiff_t dw = static_cast<std::ptrdiff_t>(kw) - r;
              const std::size_t w0 = static_cast<std::size_t>(std::max<std::ptrdiff_t>(0, -dw));
              const std::size_t w1 = static_cast<std::size_t>(
                  std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(W), static_cast<std::ptrdiff_t>(W) - dw));
              for (std::size_t t = 0; t < T; ++t) {
                const std::ptrdiff_t st = static_cast<std::ptrdiff_t>(t) + dt;
                if (st < 0 || st >= static_cast<std::ptrdiff_t>(T)) continue;
                for (std::size_t h = 0; h < H; ++h) {
                  const std::ptrdiff_t sh = static_cast<std::ptrdiff_t>(h) + dh;
                  if (sh < 0 || sh >= static_cast<std::ptrdiff_t>(H)) continue;
                  const std::size_t out_row = ((co * T + t) * H + h) * W;
                  const std::size_t in_row = ((ci * T + static_cast<std::size_t>(st)) * H + static_cast<std::size_t>(sh)) * W;
                  body(widx, out_row, static_cast<std::ptrdiff_t>(in_row) + dw, w0, w1);
                }
              }
            }
  };

  auto in = x.data(), wv = weight.data(), bv = bias.data();
  std::vector<double> out(cout * T * H * W);
  for (std::size_t co = 0; co < cout; ++co)
    std::fill_n(out.data() + co * T * H * W, T * H * W, bv[co]);
  for_each_tap([&](std::size_t widx, std::size_t out_row, std::ptrdiff_t in_row, std::size_t w0, std::size_t w1) {
    const double c = wv[widx];
    double* o = out.data() + out_row;
    const double* s = in.data() + in_row;
    for (std::size_t w = w0; w < w1; ++w) o[w] += c * s[w];
  });

  return Tensor::from_op({cout, T, H, W}, std::move(out), {x, weight, bias},
                         [x, weight, bias, for_each_tap, plane = T * H * W, cout](const detail::Node& self) {
                           auto in = x.data(), wv = weight.data();
                           const double* gy = self.grad.data();
                           auto* gx = grad_sink(x);
                           auto* gw = grad_sink(weight);
                           if (auto* gb = grad_sink(bias))
                             for (std::size_t co = 0; co < cout; ++co)
                               for (std::size_t i = 0; i < plane; ++i) (*gb)[co] += gy[co * plane + i];
                           for_each_tap([&](std::size_t widx, std::size_t out_row, std::ptrdiff_t in_row,
                                            std::size_t w0, std::size_t w1) {
                             const double* g = gy + out_row;
                             if (gx) {
                               const double c = wv[widx];
                               double* d = gx->data() + in_row;
                               for (std::size_t w = w0; w < w1; ++w) d[w] += c * g[w];
                             }
                             if (gw) {
                               const double* s = in.data() + in_row;
                               double acc = 0.0;
                               for (std::size_t w = w0; w < w1; ++w) acc += g[w] * s[w];
                               (*gw)[widx] += acc;
                             }
                           });
                         });
}

namespace detail {

// Linear interpolation taps for upsampling one axis by an integer factor
// (half-pixel centres, edge-clamped).
struct InterpTaps {
  std::vector<std::size_t> lo, hi;
  std::vector<double> frac;
};

inline InterpTaps interp_taps(std::size_t in, std::size_t factor) {
  InterpTaps taps;
  const std::size_t out = in * factor;
  taps.lo.resize(out);
  taps.hi.resize(out);
  taps.frac.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) / static_cast<double>(factor) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps.lo[o] = lo;
    taps.hi[o] = std::min(lo + 1, in - 1);
    taps.frac[o] = src - static_cast<double>(lo);
  }
  return taps;
}

}  // namespace detail

/// Trilinear upsampling of [C, T, H, W] by an integer factor on every spatial axis.
inline Tensor upsample_trilinear(const Tensor& x, std::size_t factor) {
  if (x.rank() != 4 || factor == 0) throw ContractViolation("upsample_trilinear: expects [C,T,H,W] and factor >= 1");
  const std::size_t C = x.dim(0), T = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::size_t OT = T * factor, OH = H * factor, OW = W * factor;
  auto tt = detail::interp_taps(T, factor), th = detail::interp_taps(H, factor), tw = detail::interp_taps(W, factor);

  auto visit = [=](auto&& body) {
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t t = 0; t < OT; ++t)
        for (std::size_t h = 0; h < OH; ++h)
          for (std::size_t w = 0; w < OW; ++w) {
            const std::size_t o = ((c * OT + t) * OH + h) * OW + w;
            const std::size_t ts[2] = {tt.lo[t], tt.hi[t]};
            const std::size_t hs[2] = {th.lo[h], th.hi[h]};
            const std::size_t ws[2] = {tw.lo[w], tw.hi[w]};
            const double ft[2] = {1.0 - tt.frac[t], tt.frac[t]};
            const double fh[2] = {1.0 - th.frac[h], th.frac[h]};
            const double fw[2] = {1.0 - tw.frac[w], tw.frac[w]};
            for (int a = 0; a < 2; ++a)
              for (int b = 0; b < 2; ++b)
                for (int d = 0; d < 2; ++d)
                  body(o, ((c * T + ts[a]) * H + hs[b]) * W + ws[d], ft[a] * fh[b] * fw[d]);
          }
  };

  auto in = x.data();
  std::vector<double> out(C * OT * OH * OW, 0.0);
  visit([&](std::size_t o, std::size_t i, double wgt) { out[o] += wgt * in[i]; });
  return Tensor::from_op({C, OT, OH, OW}, std::move(out), {x}, [x, visit](const detail::Node& self) {
    auto* g = grad_sink(x);
    visit([&](std::size_t o, std::size_t i, double wgt) { (*g)[i] += wgt * self.grad[o]; });
  });
}

}  // namespace asa
