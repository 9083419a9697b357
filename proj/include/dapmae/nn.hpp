// SPDX-License-Identifier: Apache-2.0
//
// Backbone building blocks: mini point-set patch embedding, positional
// MLP, and pre-norm transformer encoder/decoder with a learnable mask
// token and reconstruction head. Everything runs on the autodiff tape.

#pragma once

#include <string>
#include <vector>

#include "dapmae/autodiff.hpp"
#include "dapmae/geometry.hpp"
#include "dapmae/params.hpp"

namespace dapmae {

/// Widths and depths of every trainable component. Desk-scale tests
/// shrink these; defaults follow the conventions of the MAE baseline
/// family this architecture descends from.
struct ModelDims {
  int d_model = 384;       // transformer width D
  int d_in = 384;          // patch-embedding output width
  int hidden = 384;        // adapter hidden width H
  int enc_layers = 12;
  int dec_layers = 4;
  int heads = 6;
  int dfg_heads = 6;
  int patch_hidden = 64;   // per-point map hidden width
  int pos_hidden = 128;    // positional MLP hidden width
  int fusion_hidden = 64;  // coefficient MLP hidden width
  int head_hidden = 256;   // classification head hidden width

  void validate() const {
    if (d_model <= 0 || d_in <= 0 || hidden <= 0 || enc_layers <= 0 ||
        dec_layers <= 0 || heads <= 0 || dfg_heads <= 0 || patch_hidden <= 0 ||
        pos_hidden <= 0 || fusion_hidden <= 0 || head_hidden <= 0)
      throw ConfigError("dims: all sizes must be positive");
    if (d_model % heads != 0)
      throw ConfigError("dims: d_model must be divisible by heads");
    if (d_model % dfg_heads != 0)
      throw ConfigError("dims: d_model must be divisible by dfg_heads");
  }
};

constexpr double kNormEps = 1e-5;
constexpr double kInitSigma = 0.02;

/// Optional stochastic depth for residual branches (fine-tuning only).
/// rng == nullptr disables it.
struct DropPath {
  double rate = 0.0;
  Rng* rng = nullptr;

  bool active() const { return rng != nullptr && rate > 0.0; }
};

namespace nn {

template <typename T>
void add_linear(ParamStore<T>& ps, Rng& rng, const std::string& prefix,
                int in, int out) {
  ps.add(prefix + ".w", in, out, rng, kInitSigma);
  ps.add(prefix + ".b", 1, out, rng, 0.0);
}

template <typename T>
void add_layer_norm(ParamStore<T>& ps, const std::string& prefix, int w) {
  ps.add_constant(prefix + ".g", 1, w, T(1));
  ps.add_constant(prefix + ".b", 1, w, T(0));
}

template <typename T>
Ten<T> linear(Graph<T>& g, const ParamStore<T>& ps, const std::string& prefix,
              Ten<T> x) {
  return g.add_rowvec(g.matmul(x, ps.leaf(prefix + ".w")), ps.leaf(prefix + ".b"));
}

template <typename T>
Ten<T> layer_norm(Graph<T>& g, const ParamStore<T>& ps,
                  const std::string& prefix, Ten<T> x) {
  return g.layer_norm(x, ps.leaf(prefix + ".g"), ps.leaf(prefix + ".b"),
                      T(kNormEps));
}

template <typename T>
void add_transformer_stack(ParamStore<T>& ps, Rng& rng,
                           const std::string& prefix, int layers,
                           const ModelDims& dims) {
  const int d = dims.d_model;
  for (int i = 0; i < layers; ++i) {
    const std::string b = prefix + ".block" + std::to_string(i);
    add_layer_norm(ps, b + ".ln1", d);
    add_linear(ps, rng, b + ".attn.q", d, d);
    add_linear(ps, rng, b + ".attn.k", d, d);
    add_linear(ps, rng, b + ".attn.v", d, d);
    add_linear(ps, rng, b + ".attn.o", d, d);
    add_layer_norm(ps, b + ".ln2", d);
    add_linear(ps, rng, b + ".mlp.fc1", d, 4 * d);
    add_linear(ps, rng, b + ".mlp.fc2", 4 * d, d);
  }
  add_layer_norm(ps, prefix + ".ln_f", d);
}

/// Multi-head self-attention over one sequence (rows = tokens).
template <typename T>
Ten<T> self_attention(Graph<T>& g, const ParamStore<T>& ps,
                      const std::string& prefix, Ten<T> x, int heads) {
  const Eigen::Index d = g.val(x).cols();
  const Eigen::Index dh = d / heads;
  const T scale = T(1) / std::sqrt(T(dh));
  Ten<T> q = linear(g, ps, prefix + ".q", x);
  Ten<T> k = linear(g, ps, prefix + ".k", x);
  Ten<T> v = linear(g, ps, prefix + ".v", x);
  std::vector<Ten<T>> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Ten<T> qh = g.slice_cols(q, h * dh, dh);
    Ten<T> kh = g.slice_cols(k, h * dh, dh);
    Ten<T> vh = g.slice_cols(v, h * dh, dh);
    Ten<T> att = g.softmax_rows(g.scale(g.matmul_nt(qh, kh), scale));
    outs.push_back(g.matmul(att, vh));
  }
  return linear(g, ps, prefix + ".o", g.concat_cols(outs));
}

template <typename T>
Ten<T> block_mlp(Graph<T>& g, const ParamStore<T>& ps, const std::string& prefix,
                 Ten<T> x) {
  return linear(g, ps, prefix + ".fc2", g.gelu(linear(g, ps, prefix + ".fc1", x)));
}

/// Adds a residual branch, optionally dropped (stochastic depth).
template <typename T>
Ten<T> residual(Graph<T>& g, Ten<T> base, Ten<T> branch, const DropPath& dp) {
  if (dp.active()) {
    if (dp.rng->uniform() < dp.rate) return base;
    return g.add(base, g.scale(branch, T(1.0 / (1.0 - dp.rate))));
  }
  return g.add(base, branch);
}

/// Pre-norm transformer stack. The positional rows are added to the
/// token stream at the input of every block; a final layer norm closes
/// the stack.
template <typename T>
Ten<T> transformer_stack(Graph<T>& g, const ParamStore<T>& ps,
                         const std::string& prefix, Ten<T> x, Ten<T> pos,
                         int layers, int heads, const DropPath& dp = {}) {
  for (int i = 0; i < layers; ++i) {
    const std::string b = prefix + ".block" + std::to_string(i);
    Ten<T> u = g.add(x, pos);
    Ten<T> a = self_attention(g, ps, b + ".attn",
                              layer_norm(g, ps, b + ".ln1", u), heads);
    x = residual(g, u, a, dp);
    Ten<T> m = block_mlp(g, ps, b + ".mlp", layer_norm(g, ps, b + ".ln2", x));
    x = residual(g, x, m, dp);
  }
  return layer_norm(g, ps, prefix + ".ln_f", x);
}

}  // namespace nn

/// Registers patch embedding, positional MLP, encoder, decoder, mask
/// token and reconstruction head. `k` fixes the reconstruction head
/// output width (k points x 3 coordinates per masked patch).
template <typename T>
void register_backbone(ParamStore<T>& ps, Rng& rng, const ModelDims& dims,
                       int k) {
  nn::add_linear(ps, rng, "patch_embed.fc1", 3, dims.patch_hidden);
  nn::add_linear(ps, rng, "patch_embed.fc2", dims.patch_hidden, dims.d_in);
  nn::add_linear(ps, rng, "patch_embed.out", dims.d_in, dims.d_in);
  nn::add_linear(ps, rng, "pos_mlp.fc1", 3, dims.pos_hidden);
  nn::add_linear(ps, rng, "pos_mlp.fc2", dims.pos_hidden, dims.d_model);
  nn::add_transformer_stack(ps, rng, "encoder", dims.enc_layers, dims);
  nn::add_transformer_stack(ps, rng, "decoder", dims.dec_layers, dims);
  ps.add("decoder.mask_token", 1, dims.d_model, rng, kInitSigma);
  nn::add_linear(ps, rng, "recon_head", dims.d_model, 3 * k);
}

/// Selects which patches of a PatchSet an operation consumes.
enum class PatchSel { Visible, Masked, All };

inline std::vector<std::size_t> selected_patches(const PatchSet& ps, PatchSel sel) {
  std::vector<std::size_t> idx;
  idx.reserve(ps.g);
  for (std::size_t i = 0; i < ps.g; ++i) {
    const bool vis = ps.vis_mask[i];
    if (sel == PatchSel::All || (sel == PatchSel::Visible && vis) ||
        (sel == PatchSel::Masked && !vis))
      idx.push_back(i);
  }
  return idx;
}

/// Per-patch point-set embedding: shared per-point two-layer map,
/// coordinate-wise max over the k points of each patch, then an output
/// map. Invariant to point order within a patch.
template <typename T>
Ten<T> embed_patches(Graph<T>& g, const ParamStore<T>& ps, const PatchSet& set,
                     PatchSel sel = PatchSel::All) {
  if (ps.at("patch_embed.fc1.w").value.rows() != 3)
    throw ConfigError("embed_patches: unexpected input width");
  auto idx = selected_patches(set, sel);
  if (idx.empty()) throw std::invalid_argument("embed_patches: no patches selected");
  const auto k = static_cast<Eigen::Index>(set.k);
  typename Graph<T>::Mat pts(static_cast<Eigen::Index>(idx.size()) * k, 3);
  Eigen::Index at = 0;
  for (std::size_t i : idx) {
    for (std::size_t j = 0; j < set.k; ++j, ++at)
      for (int c = 0; c < 3; ++c) pts(at, c) = T(set.patches[i][j][c]);
  }
  Ten<T> x = g.constant(std::move(pts));
  Ten<T> h = nn::linear(g, ps, "patch_embed.fc2",
                        g.relu(nn::linear(g, ps, "patch_embed.fc1", x)));
  std::vector<Ten<T>> pooled;
  pooled.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i)
    pooled.push_back(g.max_rows(g.slice_rows(h, static_cast<Eigen::Index>(i) * k, k)));
  return nn::linear(g, ps, "patch_embed.out", g.concat_rows(pooled));
}

/// Positional embedding of patch centers (row-wise two-layer MLP).
template <typename T>
Ten<T> pos_embed(Graph<T>& g, const ParamStore<T>& ps, const Points& centers) {
  typename Graph<T>::Mat m(static_cast<Eigen::Index>(centers.size()), 3);
  for (std::size_t i = 0; i < centers.size(); ++i)
    for (int c = 0; c < 3; ++c) m(static_cast<Eigen::Index>(i), c) = T(centers[i][c]);
  Ten<T> x = g.constant(std::move(m));
  return nn::linear(g, ps, "pos_mlp.fc2",
                    g.gelu(nn::linear(g, ps, "pos_mlp.fc1", x)));
}

/// Encoder over the visible token rows of one cloud.
template <typename T>
Ten<T> encode(Graph<T>& g, const ParamStore<T>& ps, const ModelDims& dims,
              Ten<T> tokens, Ten<T> pos, const DropPath& dp = {}) {
  if (g.val(tokens).rows() < 1)
    throw std::invalid_argument("encode: needs at least one visible token");
  return nn::transformer_stack(g, ps, "encoder", tokens, pos, dims.enc_layers,
                               dims.heads, dp);
}

/// Decoder: visible features plus one shared learnable mask token per
/// masked patch, positional rows added at every block input. The
/// reconstruction head is applied to the masked positions only; each
/// output row holds one k x 3 center-relative patch, xyz interleaved.
template <typename T>
Ten<T> decode(Graph<T>& g, const ParamStore<T>& ps, const ModelDims& dims,
              Ten<T> f_vis, Ten<T> pos_vis, Ten<T> pos_mask,
              const DropPath& dp = {}) {
  const Eigen::Index n_vis = g.val(f_vis).rows();
  const Eigen::Index n_mask = g.val(pos_mask).rows();
  if (g.val(pos_vis).rows() != n_vis)
    throw std::invalid_argument("decode: visible feature/position count mismatch");
  if (n_mask < 1) throw std::invalid_argument("decode: needs at least one masked patch");
  Ten<T> mask_rows = g.repeat_row(ps.leaf("decoder.mask_token"), n_mask);
  Ten<T> seq = g.concat_rows({f_vis, mask_rows});
  Ten<T> pos = g.concat_rows({pos_vis, pos_mask});
  Ten<T> out = nn::transformer_stack(g, ps, "decoder", seq, pos,
                                     dims.dec_layers, dims.heads, dp);
  return nn::linear(g, ps, "recon_head", g.slice_rows(out, n_vis, n_mask));
}

}  // namespace dapmae
