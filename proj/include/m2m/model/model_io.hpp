#pragma once

#include <string>

#include "m2m/model/transunet.hpp"
#include "m2m/model/vae.hpp"
#include "m2m/nn/checkpoint.hpp"

namespace m2m::model {

enum class ModelKind { Ddpm, Vae, Decoder };

const char* model_kind_name(ModelKind k);
/// Throws ConfigError for anything other than ddpm, vae or decoder.
ModelKind parse_model_kind(const std::string& name);

/// Noise schedule and data-space settings shared by a denoiser and its decoder.
struct DiffusionSettings {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  bool rescale = false;
};

/// Everything needed to rebuild a model from a checkpoint.
struct ModelSpec {
  ModelKind kind = ModelKind::Ddpm;
  DenoiserConfig arch;
  DiffusionSettings diffusion;

  std::string to_text() const;
  static ModelSpec from_text(ModelKind kind, const std::string& text);
};

nn::Checkpoint make_checkpoint(const ModelSpec& spec, const nn::ParameterStore<float>& params, bool trained);

/// A checkpoint's spec plus its trained flag; throws ContractError when the
/// stored kind differs from `expected`.
struct LoadedHeader {
  ModelSpec spec;
  bool trained = false;
};
LoadedHeader read_header(const nn::Checkpoint& ckpt, ModelKind expected);

TransUNet<float> load_denoiser(const nn::Checkpoint& ckpt, ModelSpec* spec = nullptr);
FinalDecoderNet<float> load_decoder(const nn::Checkpoint& ckpt, ModelSpec* spec = nullptr);
VaeModel<float> load_vae(const nn::Checkpoint& ckpt, ModelSpec* spec = nullptr);

}  // namespace m2m::model
