#pragma once

#include <vector>

#include "m2m/nn/tensor.hpp"

// Differentiable ops. Images are laid out [B, C, H, W]; token matrices [N, D].
namespace m2m::nn {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T s);

template <typename T> Tensor<T> silu(const Tensor<T>& a);
/// tanh approximation.
template <typename T> Tensor<T> gelu(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);

/// Same-padded convolution with odd square kernel, stride 1. Bias may be undefined.
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// 2x2 max pooling, stride 2. H and W must be even.
template <typename T> Tensor<T> max_pool2(const Tensor<T>& x);
/// Nearest-neighbour 2x upsampling.
template <typename T> Tensor<T> upsample2(const Tensor<T>& x);
template <typename T> Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

/// Group normalization without affine parameters.
template <typename T> Tensor<T> group_norm(const Tensor<T>& x, int groups, T eps = T(1e-5));
/// x * (1 + gain) + bias with gain, bias of shape [B, C] broadcast over H, W.
template <typename T> Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias);

/// x [N, in] * w^T [in, out] + b.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5));

/// [B, C, H, W] -> [B*H*W, C] and back.
template <typename T> Tensor<T> to_tokens(const Tensor<T>& x);
template <typename T> Tensor<T> from_tokens(const Tensor<T>& tokens, int batch, int height, int width);

/// Multi-head self-attention over sequences of length L. `qkv` is [B*L, 3D]
/// with column blocks [q | k | v]; `rel_bias` is [heads, 2L-1] indexed by
/// (i - j + L - 1). Returns [B*L, D].
template <typename T>
Tensor<T> self_attention(const Tensor<T>& qkv, int batch, int length, int heads, const Tensor<T>& rel_bias);

/// Softmax weights of `self_attention`, [B, heads, L, L]. Not differentiable.
template <typename T>
std::vector<T> attention_weights(const Tensor<T>& qkv, int batch, int length, int heads, const Tensor<T>& rel_bias);

/// mean((a - b)^2)
template <typename T> Tensor<T> mse(const Tensor<T>& a, const Tensor<T>& b);
/// sum(weight * BCE(sigmoid(logits), target)) / normalizer. target/weight are constants.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, const std::vector<T>& target, const std::vector<T>& weight,
                          T normalizer);
/// mean over elements of KL(N(mu, exp(logvar)) || N(0, 1)).
template <typename T> Tensor<T> kl_standard_normal(const Tensor<T>& mu, const Tensor<T>& logvar);

}  // namespace m2m::nn
