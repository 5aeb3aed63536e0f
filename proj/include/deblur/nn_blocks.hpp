#pragma once

// Transformer block of the restoration network: multi-dconv head transposed
// attention (MDTA) and the gated-dconv feed-forward network (GDFN), plus the
// pixel-(un)shuffle level transitions.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "deblur/error.hpp"
#include "deblur/ops.hpp"
#include "deblur/params.hpp"

namespace deblur {

inline constexpr double kDefaultGamma = 2.66;
inline constexpr double kLayerNormEps = 1e-5;

// floor(gamma * C), at least 1.
inline std::size_t gdfn_hidden(std::size_t channels, double gamma) {
  auto hidden = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(channels) + 1e-9));
  if (hidden < 1) throw ConfigError("GDFN hidden width must be >= 1 (gamma too small)");
  return hidden;
}

template <class T>
struct LayerNormParams {
  Tensor<T> weight, bias;
};

template <class T>
struct MdtaParams {
  Tensor<T> qkv_weight, qkv_bias;        // (3C, C), (3C)
  Tensor<T> qkv_dw_weight, qkv_dw_bias;  // (3C, 3, 3), (3C)
  Tensor<T> proj_weight, proj_bias;      // (C, C), (C)
  Tensor<T> alpha;                       // (heads)
  std::size_t heads = 1;
};

template <class T>
struct GdfnParams {
  Tensor<T> in_weight, in_bias;  // (2 * hidden, C), (2 * hidden)
  Tensor<T> dw_weight, dw_bias;  // (2 * hidden, 3, 3), (2 * hidden)
  Tensor<T> out_weight, out_bias;  // (C, hidden), (C)
  double gamma = kDefaultGamma;
};

template <class T>
struct BlockParams {
  LayerNormParams<T> norm1, norm2;
  MdtaParams<T> mdta;
  GdfnParams<T> gdfn;
};

inline void check_heads(std::size_t channels, std::size_t heads) {
  if (heads == 0 || channels % heads != 0) {
    throw ConfigError("attention heads (" + std::to_string(heads) + ") must divide channels (" +
                      std::to_string(channels) + ")");
  }
}

// Parameter declarations for one transformer block under `prefix`.
inline std::vector<ParamSpec> block_param_specs(const std::string& prefix, std::size_t channels, std::size_t heads,
                                                double gamma) {
  check_heads(channels, heads);
  const std::size_t c = channels, h2 = 2 * gdfn_hidden(channels, gamma);
  const double alpha0 = 1.0 / std::sqrt(static_cast<double>(channels / heads));
  return {
      {prefix + "norm1.weight", {c}, Init::kOnes},
      {prefix + "norm1.bias", {c}, Init::kZeros},
      {prefix + "attn.qkv.weight", {3 * c, c}},
      {prefix + "attn.qkv.bias", {3 * c}, Init::kZeros},
      {prefix + "attn.qkv_dw.weight", {3 * c, 3, 3}},
      {prefix + "attn.qkv_dw.bias", {3 * c}, Init::kZeros},
      {prefix + "attn.proj.weight", {c, c}},
      {prefix + "attn.proj.bias", {c}, Init::kZeros},
      {prefix + "attn.alpha", {heads}, Init::kConstant, alpha0},
      {prefix + "norm2.weight", {c}, Init::kOnes},
      {prefix + "norm2.bias", {c}, Init::kZeros},
      {prefix + "ffn.in.weight", {h2, c}},
      {prefix + "ffn.in.bias", {h2}, Init::kZeros},
      {prefix + "ffn.dw.weight", {h2, 3, 3}},
      {prefix + "ffn.dw.bias", {h2}, Init::kZeros},
      {prefix + "ffn.out.weight", {c, h2 / 2}},
      {prefix + "ffn.out.bias", {c}, Init::kZeros},
  };
}

// Binds handles into `store`; the block shares storage with the store.
template <class T>
BlockParams<T> bind_block(ParamStore<T>& store, const std::string& prefix, std::size_t heads, double gamma) {
  BlockParams<T> p;
  p.norm1 = {store.at(prefix + "norm1.weight"), store.at(prefix + "norm1.bias")};
  p.norm2 = {store.at(prefix + "norm2.weight"), store.at(prefix + "norm2.bias")};
  auto& m = p.mdta;
  m.qkv_weight = store.at(prefix + "attn.qkv.weight");
  m.qkv_bias = store.at(prefix + "attn.qkv.bias");
  m.qkv_dw_weight = store.at(prefix + "attn.qkv_dw.weight");
  m.qkv_dw_bias = store.at(prefix + "attn.qkv_dw.bias");
  m.proj_weight = store.at(prefix + "attn.proj.weight");
  m.proj_bias = store.at(prefix + "attn.proj.bias");
  m.alpha = store.at(prefix + "attn.alpha");
  m.heads = heads;
  if (m.alpha.numel() != heads) throw ConfigError(prefix + "attn.alpha must have one entry per head");
  auto& g = p.gdfn;
  g.in_weight = store.at(prefix + "ffn.in.weight");
  g.in_bias = store.at(prefix + "ffn.in.bias");
  g.dw_weight = store.at(prefix + "ffn.dw.weight");
  g.dw_bias = store.at(prefix + "ffn.dw.bias");
  g.out_weight = store.at(prefix + "ffn.out.weight");
  g.out_bias = store.at(prefix + "ffn.out.bias");
  g.gamma = gamma;
  return p;
}

// Optional capture of MDTA internals for inspection in tests.
template <class T>
struct MdtaTrace {
  Tensor<T> attention;  // (N, heads, C/heads, C/heads)
};

// W_p * Attention(LN-free input y), without the residual. Per head, the
// query and key rows (one per channel) are L2-normalized over the spatial
// positions; A[i][j] = softmax_j(alpha_h * <q_i, k_j>) and output channel i
// is sum_j A[i][j] v_j. The attention buffer is c x c per head.
template <class T>
Tensor<T> mdta_core(const Tensor<T>& y, const MdtaParams<T>& p, MdtaTrace<T>* trace = nullptr) {
  detail::require_rank4(y, "mdta");
  const std::size_t batch = y.dim(0), channels = y.dim(1), height = y.dim(2), width = y.dim(3);
  check_heads(channels, p.heads);
  const std::size_t per_head = channels / p.heads, plane = height * width;
  Tensor<T> qkv = conv_dw(conv_pw(y, p.qkv_weight, p.qkv_bias), p.qkv_dw_weight, p.qkv_dw_bias);
  const Shape head_shape{batch, p.heads, per_head, plane};
  Tensor<T> q = l2_normalize(reshape(slice_channels(qkv, 0, channels), head_shape));
  Tensor<T> k = l2_normalize(reshape(slice_channels(qkv, channels, channels), head_shape));
  Tensor<T> v = reshape(slice_channels(qkv, 2 * channels, channels), head_shape);
  Tensor<T> attn = softmax(mul(matmul(q, transpose(k)), p.alpha), -1);
  if (trace != nullptr) trace->attention = attn;
  Tensor<T> mixed = reshape(matmul(attn, v), Shape{batch, channels, height, width});
  return conv_pw(mixed, p.proj_weight, p.proj_bias);
}

// X + W_p * Attention(X).
template <class T>
Tensor<T> mdta_forward(const Tensor<T>& x, const MdtaParams<T>& p, MdtaTrace<T>* trace = nullptr) {
  return add(x, mdta_core(x, p, trace));
}

// W_p0 * (gelu(W_d1 W_p1 y) (.) W_d2 W_p2 y), without the residual. The two
// branches are the first and second halves of one expanded tensor.
template <class T>
Tensor<T> gdfn_core(const Tensor<T>& y, const GdfnParams<T>& p) {
  detail::require_rank4(y, "gdfn");
  const std::size_t expanded = p.in_weight.dim(0);
  if (expanded % 2 != 0) throw ShapeError("gdfn: expansion width must be even");
  const std::size_t hidden = expanded / 2;
  Tensor<T> h = conv_dw(conv_pw(y, p.in_weight, p.in_bias), p.dw_weight, p.dw_bias);
  Tensor<T> gate = mul(gelu(slice_channels(h, 0, hidden)), slice_channels(h, hidden, hidden));
  return conv_pw(gate, p.out_weight, p.out_bias);
}

template <class T>
Tensor<T> gdfn_forward(const Tensor<T>& x, const GdfnParams<T>& p) {
  return add(x, gdfn_core(x, p));
}

// Pre-norm residual block: x1 = x + MDTA(LN1(x)); out = x1 + GDFN(LN2(x1)).
template <class T>
Tensor<T> block_forward(const Tensor<T>& x, const BlockParams<T>& p, MdtaTrace<T>* trace = nullptr) {
  const T eps = static_cast<T>(kLayerNormEps);
  Tensor<T> x1 = add(x, mdta_core(layer_norm(x, p.norm1.weight, p.norm1.bias, eps), p.mdta, trace));
  return add(x1, gdfn_core(layer_norm(x1, p.norm2.weight, p.norm2.bias, eps), p.gdfn));
}

// Bias-free 3x3 conv C -> C/2, then pixel_unshuffle(2): N x 2C x H/2 x W/2.
template <class T>
Tensor<T> downsample(const Tensor<T>& x, const Tensor<T>& weight) {
  detail::require_rank4(x, "downsample");
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) throw ShapeError("downsample: odd spatial extent in " + shape_str(x.shape()));
  return pixel_unshuffle(conv3x3(x, weight), 2);
}

// Bias-free 3x3 conv C -> 2C, then pixel_shuffle(2): N x C/2 x 2H x 2W.
template <class T>
Tensor<T> upsample(const Tensor<T>& x, const Tensor<T>& weight) {
  return pixel_shuffle(conv3x3(x, weight), 2);
}

inline ParamSpec downsample_spec(const std::string& name, std::size_t channels) {
  if (channels % 2 != 0) throw ConfigError("downsample needs an even channel count");
  return {name, {channels / 2, channels, 3, 3}};
}

inline ParamSpec upsample_spec(const std::string& name, std::size_t channels) {
  return {name, {2 * channels, channels, 3, 3}};
}

}  // namespace deblur
