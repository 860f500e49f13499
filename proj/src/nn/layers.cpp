#include "m2m/nn/layers.hpp"

#include <cmath>
#include <random>

#include "m2m/core/error.hpp"
#include "m2m/nn/ops.hpp"

namespace m2m::nn {

template <typename T>
Tensor<T> ParameterStore<T>::add(const std::string& name, Shape shape, std::vector<T> init) {
  for (const auto& p : params_) {
    if (p.name == name) throw ContractError("duplicate parameter name " + name);
  }
  Tensor<T> t = Tensor<T>::parameter(std::move(shape), std::move(init));
  params_.push_back({name, t});
  return t;
}

template <typename T>
Tensor<T> ParameterStore<T>::uniform(const std::string& name, Shape shape, double bound) {
  std::vector<T> v(numel(shape));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& x : v) x = static_cast<T>(dist(rng_));
  return add(name, std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> ParameterStore<T>::constant(const std::string& name, Shape shape, T value) {
  std::vector<T> v(numel(shape), value);
  return add(name, std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> ParameterStore<T>::find(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.tensor;
  }
  throw ContractError("no parameter named " + name);
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template <typename T>
Conv2d<T>::Conv2d(ParameterStore<T>& store, const std::string& name, int in, int out, int kernel, double init_scale) {
  const double bound = init_scale / std::sqrt(static_cast<double>(in * kernel * kernel));
  weight = store.uniform(name + ".weight", {out, in, kernel, kernel}, bound);
  bias = store.constant(name + ".bias", {out}, T(0));
}

template <typename T>
Tensor<T> Conv2d<T>::operator()(const Tensor<T>& x) const {
  return conv2d(x, weight, bias);
}

template <typename T>
Linear<T>::Linear(ParameterStore<T>& store, const std::string& name, int in, int out, double init_scale) {
  weight = store.uniform(name + ".weight", {out, in}, init_scale / std::sqrt(static_cast<double>(in)));
  bias = store.constant(name + ".bias", {out}, T(0));
}

template <typename T>
Tensor<T> Linear<T>::operator()(const Tensor<T>& x) const {
  return linear(x, weight, bias);
}

template <typename T>
AdaGroupNorm<T>::AdaGroupNorm(ParameterStore<T>& store, const std::string& name, int channels, int cond_width,
                              int groups_)
    : groups(groups_) {
  if (groups <= 0 || channels % groups != 0) {
    throw ConfigError(name + ": " + std::to_string(channels) + " channels not divisible into " +
                      std::to_string(groups) + " groups");
  }
  gain = Linear<T>(store, name + ".gain", cond_width, channels);
  shift = Linear<T>(store, name + ".shift", cond_width, channels);
}

template <typename T>
Tensor<T> AdaGroupNorm<T>::operator()(const Tensor<T>& x, const Tensor<T>& tau) const {
  return modulate(group_norm(x, groups), gain(tau), shift(tau));
}

template <typename T>
ResBlock<T>::ResBlock(ParameterStore<T>& store, const std::string& name, int in, int out, int cond_width,
                      int groups) {
  norm1 = AdaGroupNorm<T>(store, name + ".norm1", in, cond_width, groups);
  conv1 = Conv2d<T>(store, name + ".conv1", in, out, 3);
  norm2 = AdaGroupNorm<T>(store, name + ".norm2", out, cond_width, groups);
  conv2 = Conv2d<T>(store, name + ".conv2", out, out, 3);
  if (in != out) skip.emplace(store, name + ".skip", in, out, 1);
}

template <typename T>
Tensor<T> ResBlock<T>::operator()(const Tensor<T>& x, const Tensor<T>& tau) const {
  Tensor<T> h = conv1(silu(norm1(x, tau)));
  h = conv2(silu(norm2(h, tau)));
  return add(h, skip ? (*skip)(x) : x);
}

template <typename T>
TransformerLayer<T>::TransformerLayer(ParameterStore<T>& store, const std::string& name, int width, int heads_,
                                      int length_, int mlp_width)
    : heads(heads_), length(length_) {
  if (heads <= 0 || width % heads != 0) {
    throw ConfigError(name + ": width " + std::to_string(width) + " not divisible by " + std::to_string(heads) +
                      " heads");
  }
  ln1_gamma = store.constant(name + ".ln1.gamma", {width}, T(1));
  ln1_beta = store.constant(name + ".ln1.beta", {width}, T(0));
  qkv = Linear<T>(store, name + ".qkv", width, 3 * width);
  rel_bias = store.constant(name + ".rel_bias", {heads, 2 * length - 1}, T(0));
  proj = Linear<T>(store, name + ".proj", width, width);
  ln2_gamma = store.constant(name + ".ln2.gamma", {width}, T(1));
  ln2_beta = store.constant(name + ".ln2.beta", {width}, T(0));
  fc1 = Linear<T>(store, name + ".fc1", width, mlp_width);
  fc2 = Linear<T>(store, name + ".fc2", mlp_width, width);
}

template <typename T>
Tensor<T> TransformerLayer<T>::operator()(const Tensor<T>& tokens, int batch, std::vector<T>* attention_out) const {
  Tensor<T> packed = qkv(layer_norm(tokens, ln1_gamma, ln1_beta));
  if (attention_out) *attention_out = attention_weights(packed, batch, length, heads, rel_bias);
  Tensor<T> h = add(tokens, proj(self_attention(packed, batch, length, heads, rel_bias)));
  return add(h, fc2(gelu(fc1(layer_norm(h, ln2_gamma, ln2_beta)))));
}

#define M2M_INSTANTIATE_LAYERS(T) \
  template class ParameterStore<T>; \
  template struct Conv2d<T>;        \
  template struct Linear<T>;        \
  template struct AdaGroupNorm<T>;  \
  template struct ResBlock<T>;      \
  template struct TransformerLayer<T>;

M2M_INSTANTIATE_LAYERS(float)
M2M_INSTANTIATE_LAYERS(double)

}  // namespace m2m::nn
