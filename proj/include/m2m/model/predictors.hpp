#pragma once

#include "m2m/diffusion/diffusion.hpp"
#include "m2m/model/transunet.hpp"

namespace m2m::model {

/// Runs a float TransUNet as the sampler's noise predictor, in chunks of at
/// most `max_batch` items and without recording gradients.
class DenoiserAdapter final : public diffusion::NoisePredictor {
 public:
  explicit DenoiserAdapter(const TransUNet<float>& net, int max_batch = 16) : net_(net), max_batch_(max_batch) {}
  std::vector<RealGrid> predict(std::span<const RealGrid> inputs, int t) const override;

 private:
  const TransUNet<float>& net_;
  int max_batch_;
};

/// Sigmoid of the final decoder's logits.
class DecoderAdapter final : public diffusion::ProbabilityDecoder {
 public:
  DecoderAdapter(const FinalDecoderNet<float>& net, bool trained, int max_batch = 16)
      : net_(net), trained_(trained), max_batch_(max_batch) {}
  std::vector<RealGrid> probabilities(std::span<const RealGrid> y1) const override;
  bool trained() const override { return trained_; }

 private:
  const FinalDecoderNet<float>& net_;
  bool trained_;
  int max_batch_;
};

}  // namespace m2m::model
