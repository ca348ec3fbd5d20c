#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "asa/layers.hpp"
#include "asa/ops.hpp"

// Shifted-window vision transformer over a 1D token sequence. Windows are
// contiguous runs of S tokens in patch order; the shifted variant rolls the
// sequence by floor(S/2) before windowing and rolls it back afterwards.

namespace asa {

struct AttentionConfig {
  std::size_t dim = 64;
  std::size_t n_heads = 4;
  std::size_t window = 16;
  std::size_t depth = 4;
  std::size_t mlp_ratio = 4;

  std::size_t head_dim() const { return dim / n_heads; }
  std::size_t shift() const { return window / 2; }

  void validate() const {
    if (dim == 0 || n_heads == 0 || dim % n_heads != 0)
      throw ContractViolation("attention: dim " + std::to_string(dim) + " not divisible by heads " +
                              std::to_string(n_heads));
    if (depth % 2 != 0) throw ContractViolation("attention: depth must be even (blocks alternate LW/SLW)");
    if (window < 2) throw ContractViolation("attention: window size must be >= 2");
    if (mlp_ratio == 0) throw ContractViolation("attention: mlp_ratio must be positive");
  }
};

struct MsaWeights {
  Linear q, k, v, proj;

  static MsaWeights xavier(std::size_t dim, Rng& rng) {
    MsaWeights w;
    w.q = Linear::xavier(dim, dim, rng);
    w.k = Linear::xavier(dim, dim, rng);
    w.v = Linear::xavier(dim, dim, rng);
    w.proj = Linear::xavier(dim, dim, rng);
    return w;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    q.collect(prefix + ".q", out);
    k.collect(prefix + ".k", out);
    v.collect(prefix + ".v", out);
    proj.collect(prefix + ".proj", out);
  }
};

struct BlockWeights {
  LayerNorm norm1;
  MsaWeights attn;
  LayerNorm norm2;
  Linear fc1, fc2;

  static BlockWeights xavier(const AttentionConfig& cfg, Rng& rng) {
    BlockWeights b;
    b.norm1 = LayerNorm::identity(cfg.dim);
    b.attn = MsaWeights::xavier(cfg.dim, rng);
    b.norm2 = LayerNorm::identity(cfg.dim);
    b.fc1 = Linear::xavier(cfg.dim, cfg.mlp_ratio * cfg.dim, rng);
    b.fc2 = Linear::xavier(cfg.mlp_ratio * cfg.dim, cfg.dim, rng);
    return b;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    norm1.collect(prefix + ".norm1", out);
    attn.collect(prefix + ".attn", out);
    norm2.collect(prefix + ".norm2", out);
    fc1.collect(prefix + ".fc1", out);
    fc2.collect(prefix + ".fc2", out);
  }
};

struct SwVitWeights {
  std::vector<BlockWeights> blocks;
  LayerNorm norm;

  static SwVitWeights xavier(const AttentionConfig& cfg, Rng& rng) {
    cfg.validate();
    SwVitWeights w;
    for (std::size_t i = 0; i < cfg.depth; ++i) w.blocks.push_back(BlockWeights::xavier(cfg, rng));
    w.norm = LayerNorm::identity(cfg.dim);
    return w;
  }

  void collect(const std::string& prefix, ParameterList& out) const {
    for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(prefix + ".blocks." + std::to_string(i), out);
    norm.collect(prefix + ".norm", out);
  }
};

/// Patch embedding: affine map of each flattened patch (rows of `patches`) to D channels.
inline Tensor patch_embed(const Tensor& patches, const Linear& embed) {
  if (patches.rank() != 2 || patches.dim(1) != embed.in_features())
    throw ContractViolation("patch_embed: expected [n, " + std::to_string(embed.in_features()) + "] patches, got " +
                            shape_str(patches.shape()));
  return embed(patches);
}

/// Multi-head self-attention applied independently inside each window of S
/// consecutive tokens. `key_valid`, when non-empty, marks which positions may be
/// attended to; invalid keys get an additive -inf score.
inline Tensor window_attention(const Tensor& x, const AttentionConfig& cfg, const MsaWeights& w,
                               const std::vector<bool>& key_valid = {}) {
  if (x.rank() != 2 || x.dim(1) != cfg.dim)
    throw ContractViolation("window_attention: expected [L, " + std::to_string(cfg.dim) + "] tokens, got " +
                            shape_str(x.shape()));
  const std::size_t L = x.dim(0), S = cfg.window, heads = cfg.n_heads, hd = cfg.head_dim();
  if (L % S != 0)
    throw ContractViolation("window_attention: sequence length " + std::to_string(L) + " not a multiple of window " +
                            std::to_string(S));
  const std::size_t n_windows = L / S;

  // [L, D] -> [nW * heads, S, hd]
  auto split_heads = [&](const Tensor& t) {
    return reshape(permute(reshape(t, {n_windows, S, heads, hd}), {0, 2, 1, 3}), {n_windows * heads, S, hd});
  };
  const Tensor q = split_heads(w.q(x));
  const Tensor k = split_heads(w.k(x));
  const Tensor v = split_heads(w.v(x));

  Tensor scores = scale(matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(hd)));
  if (!key_valid.empty()) {
    if (key_valid.size() != L) throw ContractViolation("window_attention: key mask length mismatch");
    std::vector<double> bias(n_windows * heads * S * S, 0.0);
    for (std::size_t win = 0; win < n_windows; ++win)
      for (std::size_t hh = 0; hh < heads; ++hh)
        for (std::size_t i = 0; i < S; ++i)
          for (std::size_t j = 0; j < S; ++j)
            if (!key_valid[win * S + j])
              bias[((win * heads + hh) * S + i) * S + j] = -std::numeric_limits<double>::infinity();
    scores = add(scores, Tensor({n_windows * heads, S, S}, std::move(bias)));
  }
  const Tensor attn = softmax(scores, 2);
  const Tensor ctx = matmul(attn, v);
  const Tensor merged = reshape(permute(reshape(ctx, {n_windows, heads, S, hd}), {0, 2, 1, 3}), {L, cfg.dim});
  return w.proj(merged);
}

inline Tensor lw_msa(const Tensor& x, const AttentionConfig& cfg, const MsaWeights& w) {
  return window_attention(x, cfg, w);
}

/// Shifted variant: roll by floor(S/2), window attention, roll back.
inline Tensor slw_msa(const Tensor& x, const AttentionConfig& cfg, const MsaWeights& w,
                      const std::vector<bool>& key_valid = {}) {
  const auto shift = static_cast<std::ptrdiff_t>(cfg.shift());
  std::vector<bool> rolled_valid;
  if (!key_valid.empty()) {
    const std::size_t L = key_valid.size();
    rolled_valid.resize(L);
    for (std::size_t i = 0; i < L; ++i) rolled_valid[i] = key_valid[(i + cfg.shift()) % L];
  }
  return roll_rows(window_attention(roll_rows(x, shift), cfg, w, rolled_valid), -shift);
}

/// Pre-norm residual block: x + MSA(LN(x)), then + MLP(LN(.)) with GELU.
inline Tensor transformer_block(const Tensor& x, const AttentionConfig& cfg, const BlockWeights& w, bool shifted,
                                const std::vector<bool>& key_valid = {}) {
  const Tensor normed = w.norm1(x);
  const Tensor attn = shifted ? slw_msa(normed, cfg, w.attn, key_valid) : window_attention(normed, cfg, w.attn, key_valid);
  const Tensor h = add(x, attn);
  return add(h, w.fc2(gelu(w.fc1(w.norm2(h)))));
}

/// Output of the SW-ViT stack plus the (unnormalised) output of every block.
struct SwVitOutput {
  Tensor tokens;
  std::vector<Tensor> block_outputs;
};

/// Alternating LW / SLW blocks followed by a final layer norm. Sequences whose
/// length is not a multiple of S are padded with zero tokens that no query may
/// attend to; the padding is stripped before returning.
inline SwVitOutput swvit_forward_with_taps(const Tensor& x, const AttentionConfig& cfg, const SwVitWeights& w) {
  cfg.validate();
  if (w.blocks.size() != cfg.depth) throw ContractViolation("swvit: weight depth does not match config");
  const std::size_t L = x.dim(0), S = cfg.window;
  const std::size_t padded = (L + S - 1) / S * S;
  Tensor h = x;
  std::vector<bool> key_valid;
  if (padded != L) {
    h = concat_rows({x, Tensor::zeros({padded - L, cfg.dim})});
    key_valid.assign(padded, true);
    for (std::size_t i = L; i < padded; ++i) key_valid[i] = false;
  }
  SwVitOutput out;
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    h = transformer_block(h, cfg, w.blocks[i], i % 2 == 1, key_valid);
    out.block_outputs.push_back(padded != L ? slice_rows(h, 0, L) : h);
  }
  h = w.norm(h);
  out.tokens = padded != L ? slice_rows(h, 0, L) : h;
  return out;
}

inline Tensor swvit_forward(const Tensor& x, const AttentionConfig& cfg, const SwVitWeights& w) {
  return swvit_forward_with_taps(x, cfg, w).tokens;
}

}  // namespace asa
