#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "m2m/core/grid.hpp"
#include "m2m/core/keyvalue.hpp"
#include "m2m/nn/layers.hpp"

namespace m2m::model {

/// Architecture of the TransUNet denoiser. Defaults reproduce the reference
/// shape ladder (64,72,5) -> (64,72,64) -> ... -> (64,72,5).
struct DenoiserConfig {
  Dims input_dims{};
  int stem_width = 64;
  std::vector<int> encoder_widths{128, 256, 256};
  std::vector<int> decoder_widths{128, 64, 64};
  int transformer_layers = 2;
  int transformer_heads = 4;
  int mlp_ratio = 4;
  int time_embed_dim = 16;
  int time_mlp_width = 64;
  int groups = 8;

  /// Throws ConfigError when widths, groups or dims are inconsistent.
  void validate() const;
  int bottleneck_width() const { return encoder_widths.back(); }
  int bottleneck_tokens() const;

  std::string to_text() const;
  /// Consumes the architecture keys it knows; leaves others for the caller.
  static DenoiserConfig from_keys(KeyValues& kv, const DenoiserConfig& defaults);

  /// Dims 8x8, widths [4,8,8], one narrow transformer layer.
  static DenoiserConfig tiny();
};

/// Sinusoidal embedding: [sin(t/w_0) .. sin(t/w_{h-1}), cos(t/w_0) .. cos(t/w_{h-1})]
/// with w_k = 10000^(k/(h-1)), h = dim/2.
std::vector<double> time_embedding(int t, int dim = 16);

/// Stage name and its output shape written as (T, P, C).
struct StageShape {
  std::string stage;
  Dims shape;
};

template <typename T>
struct ForwardProbe {
  std::vector<StageShape> stages;
  std::vector<std::vector<T>> attention;  // per transformer layer, [B, heads, L, L]
};

/// Expected shape ladder for a configuration.
std::vector<StageShape> expected_stages(const DenoiserConfig& cfg);

template <typename T>
struct EncoderOutput {
  std::vector<nn::Tensor<T>> skips;  // stem, down1, down2 outputs
  nn::Tensor<T> bottleneck;          // after the transformer, [B, W, H/8, P/8]
};

/// Convolutional encoder / transformer bottleneck / convolutional decoder with
/// skip connections, conditioned on the diffusion step through AdaGN.
template <typename T>
class TransUNet {
 public:
  TransUNet(const DenoiserConfig& cfg, std::uint64_t seed);
  TransUNet(const TransUNet&) = delete;
  TransUNet& operator=(const TransUNet&) = delete;
  TransUNet(TransUNet&&) noexcept = default;
  TransUNet& operator=(TransUNet&&) noexcept = default;

  /// x [B, C, T, P] -> predicted noise [B, C, T, P].
  nn::Tensor<T> forward(const nn::Tensor<T>& x, std::span<const int> steps, ForwardProbe<T>* probe = nullptr) const;

  /// Processed time conditioning [B, time_mlp_width].
  nn::Tensor<T> conditioning(std::span<const int> steps) const;
  EncoderOutput<T> encode(const nn::Tensor<T>& x, const nn::Tensor<T>& tau, ForwardProbe<T>* probe = nullptr) const;
  nn::Tensor<T> decode(const nn::Tensor<T>& bottleneck, const std::vector<nn::Tensor<T>>& skips,
                       const nn::Tensor<T>& tau, ForwardProbe<T>* probe = nullptr) const;

  nn::ParameterStore<T>& parameters() { return store_; }
  const nn::ParameterStore<T>& parameters() const { return store_; }
  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  nn::ParameterStore<T> store_;
  nn::Linear<T> time_mlp_;
  nn::Conv2d<T> stem_;
  std::vector<nn::ResBlock<T>> down_;
  std::vector<nn::TransformerLayer<T>> transformer_;
  std::vector<nn::ResBlock<T>> up_;
  nn::AdaGroupNorm<T> out_norm_;
  nn::Conv2d<T> out_conv_;
};

/// Small network mapping the masked t=1 sample to per-cell logits:
/// stem conv, two residual blocks, AdaGN + SiLU + conv head.
template <typename T>
class FinalDecoderNet {
 public:
  FinalDecoderNet(const DenoiserConfig& cfg, std::uint64_t seed);
  FinalDecoderNet(const FinalDecoderNet&) = delete;
  FinalDecoderNet& operator=(const FinalDecoderNet&) = delete;
  FinalDecoderNet(FinalDecoderNet&&) noexcept = default;
  FinalDecoderNet& operator=(FinalDecoderNet&&) noexcept = default;

  /// x [B, C, T, P] -> logits [B, C, T, P].
  nn::Tensor<T> logits(const nn::Tensor<T>& x) const;

  nn::ParameterStore<T>& parameters() { return store_; }
  const nn::ParameterStore<T>& parameters() const { return store_; }
  const DenoiserConfig& config() const { return cfg_; }

 private:
  DenoiserConfig cfg_;
  nn::ParameterStore<T> store_;
  nn::Linear<T> time_mlp_;
  nn::Conv2d<T> stem_;
  std::vector<nn::ResBlock<T>> blocks_;
  nn::AdaGroupNorm<T> out_norm_;
  nn::Conv2d<T> out_conv_;
};

/// (t,p,c) grids -> [B, C, T, P] tensor and back.
template <typename T>
nn::Tensor<T> grids_to_tensor(std::span<const RealGrid> grids);
template <typename T>
std::vector<RealGrid> tensor_to_grids(const nn::Tensor<T>& x);

}  // namespace m2m::model
