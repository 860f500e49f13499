#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "m2m/core/rng.hpp"
#include "m2m/nn/tensor.hpp"

namespace m2m::nn {

template <typename T>
struct NamedParameter {
  std::string name;
  Tensor<T> tensor;
};

/// Ordered registry of a model's trainable tensors, keyed by canonical path.
template <typename T>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed) : rng_(make_rng(seed, 0x9a7a)) {}

  /// Uniform(-bound, bound) initialization from the store's generator.
  Tensor<T> uniform(const std::string& name, Shape shape, double bound);
  Tensor<T> constant(const std::string& name, Shape shape, T value);

  const std::vector<NamedParameter<T>>& entries() const { return params_; }
  Tensor<T> find(const std::string& name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  Tensor<T> add(const std::string& name, Shape shape, std::vector<T> init);

  Rng rng_;
  std::vector<NamedParameter<T>> params_;
};

template <typename T>
struct Conv2d {
  Tensor<T> weight;
  Tensor<T> bias;

  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& name, int in, int out, int kernel, double init_scale = 1.0);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

template <typename T>
struct Linear {
  Tensor<T> weight;
  Tensor<T> bias;

  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& name, int in, int out, double init_scale = 1.0);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

/// Group normalization whose scale and shift are affine maps of a
/// conditioning vector: norm(x) * (1 + gain(tau)) + bias(tau).
template <typename T>
struct AdaGroupNorm {
  int groups = 8;
  Linear<T> gain;
  Linear<T> shift;

  AdaGroupNorm() = default;
  AdaGroupNorm(ParameterStore<T>& store, const std::string& name, int channels, int cond_width, int groups);
  /// x [B,C,H,W], tau [B,cond_width].
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& tau) const;
};

/// Two 3x3 convolutions, each preceded by AdaGN + SiLU, with an identity or
/// 1x1-projected skip path.
template <typename T>
struct ResBlock {
  AdaGroupNorm<T> norm1;
  Conv2d<T> conv1;
  AdaGroupNorm<T> norm2;
  Conv2d<T> conv2;
  std::optional<Conv2d<T>> skip;

  ResBlock() = default;
  ResBlock(ParameterStore<T>& store, const std::string& name, int in, int out, int cond_width, int groups);
  Tensor<T> operator()(const Tensor<T>& x, const Tensor<T>& tau) const;
};

/// Pre-norm transformer encoder layer with a learned relative position bias
/// per head over a fixed sequence length.
template <typename T>
struct TransformerLayer {
  int heads = 4;
  int length = 1;
  Tensor<T> ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;
  Linear<T> qkv;
  Tensor<T> rel_bias;  // [heads, 2*length-1]
  Linear<T> proj;
  Linear<T> fc1;
  Linear<T> fc2;

  TransformerLayer() = default;
  TransformerLayer(ParameterStore<T>& store, const std::string& name, int width, int heads, int length,
                   int mlp_width);
  /// tokens [B*length, width]
  Tensor<T> operator()(const Tensor<T>& tokens, int batch, std::vector<T>* attention_out = nullptr) const;
};

}  // namespace m2m::nn
