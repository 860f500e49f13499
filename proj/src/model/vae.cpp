#include "m2m/model/vae.hpp"

#include <algorithm>
#include <cmath>

#include "m2m/core/error.hpp"
#include "m2m/nn/ops.hpp"

namespace m2m::model {

using nn::Tensor;

template <typename T>
VaeModel<T>::VaeModel(const DenoiserConfig& cfg, std::uint64_t seed) : body_(cfg, seed) {
  const int w = cfg.bottleneck_width();
  mu_head_ = nn::Conv2d<T>(body_.parameters(), "vae.mu", w, w, 1);
  logvar_head_ = nn::Conv2d<T>(body_.parameters(), "vae.logvar", w, w, 1, 0.1);
}

template <typename T>
nn::Shape VaeModel<T>::latent_shape(int batch) const {
  const auto& cfg = body_.config();
  const int factor = 1 << cfg.encoder_widths.size();
  return {batch, cfg.bottleneck_width(), cfg.input_dims.t / factor, cfg.input_dims.p / factor};
}

template <typename T>
typename VaeModel<T>::Output VaeModel<T>::run(const Tensor<T>& input, const Tensor<T>& zeta, LatentMode mode) const {
  const std::vector<int> steps(static_cast<std::size_t>(input.dim(0)), 0);
  Tensor<T> tau = body_.conditioning(steps);
  EncoderOutput<T> enc = body_.encode(input, tau);
  Output out;
  out.mu = mu_head_(enc.bottleneck);
  out.logvar = logvar_head_(enc.bottleneck);
  for (T v : out.mu.data()) {
    if (!std::isfinite(static_cast<double>(v))) throw TrainingFault("VAE mean head produced a non-finite value", "");
  }
  for (T v : out.logvar.data()) {
    if (!std::isfinite(static_cast<double>(v))) throw TrainingFault("VAE variance head produced a non-finite value", "");
  }
  if (mode != LatentMode::Mean && zeta.shape() != out.mu.shape()) {
    throw ContractError("VAE latent noise shape " + nn::shape_string(zeta.shape()) + " vs " +
                        nn::shape_string(out.mu.shape()));
  }
  Tensor<T> z;
  switch (mode) {
    case LatentMode::Posterior:
      z = nn::add(out.mu, nn::mul(nn::exp(nn::scale(out.logvar, T(0.5))), zeta));
      break;
    case LatentMode::Mean:
      z = out.mu;
      break;
    case LatentMode::Prior:
      z = zeta;
      break;
  }
  out.logits = body_.decode(z, enc.skips, tau);
  return out;
}

std::vector<float> latent_noise(const VaeModel<float>& model, std::uint64_t seed, std::uint64_t stream) {
  Rng rng = make_rng(seed, stream);
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<float> z(nn::numel(model.latent_shape(1)));
  for (float& v : z) v = static_cast<float>(dist(rng));
  return z;
}

std::vector<RealGrid> vae_forward(const VaeModel<float>& model, std::span<const Mixture> mixtures, LatentMode mode,
                                  std::uint64_t seed, std::uint64_t first_stream) {
  if (mixtures.empty()) return {};
  nn::NoGradGuard guard;
  const int channels = model.config().input_dims.c;
  std::vector<RealGrid> masks;
  std::vector<float> zeta;
  for (std::size_t i = 0; i < mixtures.size(); ++i) {
    masks.push_back(broadcast_mask(mixtures[i], channels));
    auto z = latent_noise(model, seed, first_stream + i);
    zeta.insert(zeta.end(), z.begin(), z.end());
  }
  const int batch = static_cast<int>(mixtures.size());
  auto out = model.run(grids_to_tensor<float>(masks), Tensor<float>::from(model.latent_shape(batch), std::move(zeta)), mode);
  auto probs = tensor_to_grids(nn::sigmoid(out.logits));
  for (std::size_t i = 0; i < probs.size(); ++i) apply_mask(probs[i], masks[i]);
  return probs;
}

template <typename T>
VaeLoss<T> vae_loss(const VaeModel<T>& model, const Tensor<T>& input, const std::vector<T>& target,
                    const std::vector<T>& mask, const Tensor<T>& zeta, double kl_weight) {
  auto out = model.run(input, zeta, LatentMode::Posterior);
  T active = 0;
  for (T m : mask) active += m;
  Tensor<T> rec = nn::bce_with_logits(out.logits, target, mask, std::max(active, T(1)));
  Tensor<T> kl = nn::kl_standard_normal(out.mu, out.logvar);
  VaeLoss<T> loss;
  loss.reconstruction = static_cast<double>(rec.item());
  loss.kl = static_cast<double>(kl.item());
  loss.total = nn::add(rec, nn::scale(kl, static_cast<T>(kl_weight)));
  return loss;
}

template class VaeModel<float>;
template class VaeModel<double>;
template VaeLoss<float> vae_loss(const VaeModel<float>&, const Tensor<float>&, const std::vector<float>&,
                                 const std::vector<float>&, const Tensor<float>&, double);
template VaeLoss<double> vae_loss(const VaeModel<double>&, const Tensor<double>&, const std::vector<double>&,
                                  const std::vector<double>&, const Tensor<double>&, double);

}  // namespace m2m::model
