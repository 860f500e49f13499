#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "m2m/model/transunet.hpp"

namespace m2m::model {

/// How the bottleneck latent is formed.
enum class LatentMode {
  Posterior,  // z = mu + sigma * zeta
  Mean,       // z = mu
  Prior,      // z = zeta
};

/// TransUNet body with mean and log-variance heads on the transformer output.
/// The mixture, replicated across the instrument channels, is the only input.
template <typename T>
class VaeModel {
 public:
  VaeModel(const DenoiserConfig& cfg, std::uint64_t seed);

  struct Output {
    nn::Tensor<T> logits;  // [B, C, T, P], before masking
    nn::Tensor<T> mu;
    nn::Tensor<T> logvar;
  };

  /// `input` [B, C, T, P]; `zeta` shaped like the bottleneck (ignored for Mean).
  Output run(const nn::Tensor<T>& input, const nn::Tensor<T>& zeta, LatentMode mode) const;

  nn::Shape latent_shape(int batch) const;
  nn::ParameterStore<T>& parameters() { return body_.parameters(); }
  const nn::ParameterStore<T>& parameters() const { return body_.parameters(); }
  const DenoiserConfig& config() const { return body_.config(); }

 private:
  TransUNet<T> body_;
  nn::Conv2d<T> mu_head_;
  nn::Conv2d<T> logvar_head_;
};

/// Standard-normal latent noise for one item, drawn from stream `stream` of `seed`.
std::vector<float> latent_noise(const VaeModel<float>& model, std::uint64_t seed, std::uint64_t stream);

/// Masked output probabilities for a batch of mixtures. Item i uses latent
/// stream first_stream + i.
std::vector<RealGrid> vae_forward(const VaeModel<float>& model, std::span<const Mixture> mixtures, LatentMode mode,
                                  std::uint64_t seed, std::uint64_t first_stream = 0);

template <typename T>
struct VaeLoss {
  nn::Tensor<T> total;
  double reconstruction = 0.0;
  double kl = 0.0;
};

/// BCE over cells where the mixture is active (averaged over those cells)
/// plus kl_weight * KL(N(mu, sigma^2) || N(0,1)) averaged over latent units.
/// `target` and `mask` are [B, C, T, P] flattened.
template <typename T>
VaeLoss<T> vae_loss(const VaeModel<T>& model, const nn::Tensor<T>& input, const std::vector<T>& target,
                    const std::vector<T>& mask, const nn::Tensor<T>& zeta, double kl_weight);

}  // namespace m2m::model
