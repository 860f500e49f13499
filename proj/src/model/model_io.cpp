#include "m2m/model/model_io.hpp"

#include <fmt/format.h>

#include "m2m/core/error.hpp"

namespace m2m::model {

const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::Ddpm:
      return "ddpm";
    case ModelKind::Vae:
      return "vae";
    case ModelKind::Decoder:
      return "decoder";
  }
  return "?";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "ddpm") return ModelKind::Ddpm;
  if (name == "vae") return ModelKind::Vae;
  if (name == "decoder") return ModelKind::Decoder;
  throw ConfigError("unknown model kind '" + name + "' (expected ddpm, vae or decoder)");
}

std::string ModelSpec::to_text() const {
  std::string s = arch.to_text();
  s += fmt::format("diffusion_steps = {}\nbeta_start = {:.17g}\nbeta_end = {:.17g}\nrescale = {}\n", diffusion.steps,
                   diffusion.beta_start, diffusion.beta_end, diffusion.rescale ? "true" : "false");
  return s;
}

ModelSpec ModelSpec::from_text(ModelKind kind, const std::string& text) {
  KeyValues kv = KeyValues::parse(text);
  ModelSpec spec;
  spec.kind = kind;
  spec.arch = DenoiserConfig::from_keys(kv, DenoiserConfig{});
  spec.diffusion.steps = kv.take_int("diffusion_steps", spec.diffusion.steps);
  spec.diffusion.beta_start = kv.take_double("beta_start", spec.diffusion.beta_start);
  spec.diffusion.beta_end = kv.take_double("beta_end", spec.diffusion.beta_end);
  spec.diffusion.rescale = kv.take_bool("rescale", spec.diffusion.rescale);
  kv.reject_unknown();
  return spec;
}

nn::Checkpoint make_checkpoint(const ModelSpec& spec, const nn::ParameterStore<float>& params, bool trained) {
  return nn::Checkpoint{model_kind_name(spec.kind), spec.to_text(), trained, nn::snapshot(params)};
}

LoadedHeader read_header(const nn::Checkpoint& ckpt, ModelKind expected) {
  const ModelKind kind = parse_model_kind(ckpt.kind);
  if (kind != expected) {
    throw ContractError(fmt::format("checkpoint holds a {} model, expected {}", ckpt.kind, model_kind_name(expected)));
  }
  return LoadedHeader{ModelSpec::from_text(kind, ckpt.config), ckpt.trained};
}

namespace {

template <typename Model>
Model load_as(const nn::Checkpoint& ckpt, ModelKind kind, ModelSpec* out) {
  LoadedHeader h = read_header(ckpt, kind);
  Model m(h.spec.arch, 0);
  nn::restore(m.parameters(), ckpt.tensors);
  if (out) *out = h.spec;
  return m;
}

}  // namespace

TransUNet<float> load_denoiser(const nn::Checkpoint& ckpt, ModelSpec* spec) {
  return load_as<TransUNet<float>>(ckpt, ModelKind::Ddpm, spec);
}

FinalDecoderNet<float> load_decoder(const nn::Checkpoint& ckpt, ModelSpec* spec) {
  return load_as<FinalDecoderNet<float>>(ckpt, ModelKind::Decoder, spec);
}

VaeModel<float> load_vae(const nn::Checkpoint& ckpt, ModelSpec* spec) {
  return load_as<VaeModel<float>>(ckpt, ModelKind::Vae, spec);
}

}  // namespace m2m::model
