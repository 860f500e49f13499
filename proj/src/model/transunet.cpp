#include "m2m/model/transunet.hpp"

#include <cmath>
#include <sstream>

#include "m2m/core/error.hpp"
#include "m2m/nn/ops.hpp"

namespace m2m::model {

using nn::Tensor;

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("denoiser config: " + m); };
  if (encoder_widths.empty()) fail("at least one encoder stage required");
  if (decoder_widths.size() != encoder_widths.size()) fail("decoder_widths must match encoder_widths in length");
  const int factor = 1 << encoder_widths.size();
  if (input_dims.t % factor != 0 || input_dims.p % factor != 0) {
    fail("input dims " + to_string(input_dims) + " not divisible by " + std::to_string(factor));
  }
  if (input_dims.c < 1) fail("need at least one instrument channel");
  if (groups < 1) fail("groups must be positive");
  auto check_width = [&](int w, const char* what) {
    if (w < 1 || w % groups != 0) fail(std::string(what) + " width " + std::to_string(w) + " not divisible by groups");
  };
  check_width(stem_width, "stem");
  for (int w : encoder_widths) check_width(w, "encoder");
  for (int w : decoder_widths) check_width(w, "decoder");
  if (transformer_layers < 0) fail("transformer_layers must be >= 0");
  if (transformer_heads < 1 || bottleneck_width() % transformer_heads != 0) fail("bottleneck width not divisible by heads");
  if (time_embed_dim < 2 || time_embed_dim % 2 != 0) fail("time_embed_dim must be even and >= 2");
  if (time_mlp_width < 1 || mlp_ratio < 1) fail("time_mlp_width and mlp_ratio must be positive");
}

int DenoiserConfig::bottleneck_tokens() const {
  const int factor = 1 << encoder_widths.size();
  return (input_dims.t / factor) * (input_dims.p / factor);
}

std::string DenoiserConfig::to_text() const {
  std::ostringstream os;
  os << "input_dims = " << input_dims.t << "," << input_dims.p << "," << input_dims.c << "\n"
     << "stem_width = " << stem_width << "\n"
     << "encoder_widths = " << join_ints(encoder_widths) << "\n"
     << "decoder_widths = " << join_ints(decoder_widths) << "\n"
     << "transformer_layers = " << transformer_layers << "\n"
     << "transformer_heads = " << transformer_heads << "\n"
     << "mlp_ratio = " << mlp_ratio << "\n"
     << "time_embed_dim = " << time_embed_dim << "\n"
     << "time_mlp_width = " << time_mlp_width << "\n"
     << "groups = " << groups << "\n";
  return os.str();
}

DenoiserConfig DenoiserConfig::from_keys(KeyValues& kv, const DenoiserConfig& defaults) {
  DenoiserConfig c = defaults;
  auto dims = kv.take_int_list("input_dims", {c.input_dims.t, c.input_dims.p, c.input_dims.c});
  if (dims.size() != 3) throw ConfigError("input_dims needs three values");
  c.input_dims = Dims{dims[0], dims[1], dims[2]};
  c.stem_width = kv.take_int("stem_width", c.stem_width);
  c.encoder_widths = kv.take_int_list("encoder_widths", c.encoder_widths);
  c.decoder_widths = kv.take_int_list("decoder_widths", c.decoder_widths);
  c.transformer_layers = kv.take_int("transformer_layers", c.transformer_layers);
  c.transformer_heads = kv.take_int("transformer_heads", c.transformer_heads);
  c.mlp_ratio = kv.take_int("mlp_ratio", c.mlp_ratio);
  c.time_embed_dim = kv.take_int("time_embed_dim", c.time_embed_dim);
  c.time_mlp_width = kv.take_int("time_mlp_width", c.time_mlp_width);
  c.groups = kv.take_int("groups", c.groups);
  c.validate();
  return c;
}

DenoiserConfig DenoiserConfig::tiny() {
  DenoiserConfig c;
  c.input_dims = Dims{8, 8, kInstruments};
  c.stem_width = 4;
  c.encoder_widths = {4, 8, 8};
  c.decoder_widths = {8, 4, 4};
  c.transformer_layers = 1;
  c.transformer_heads = 2;
  c.mlp_ratio = 2;
  c.time_mlp_width = 8;
  c.groups = 2;
  return c;
}

std::vector<double> time_embedding(int t, int dim) {
  if (dim < 2 || dim % 2 != 0) throw ContractError("time_embedding: dim must be even and >= 2");
  const int half = dim / 2;
  std::vector<double> e(static_cast<std::size_t>(dim));
  for (int k = 0; k < half; ++k) {
    const double omega = half == 1 ? 1.0 : std::pow(10000.0, static_cast<double>(k) / (half - 1));
    e[static_cast<std::size_t>(k)] = std::sin(t / omega);
    e[static_cast<std::size_t>(k + half)] = std::cos(t / omega);
  }
  return e;
}

std::vector<StageShape> expected_stages(const DenoiserConfig& cfg) {
  std::vector<StageShape> out;
  int t = cfg.input_dims.t, p = cfg.input_dims.p;
  out.push_back({"input_layer", Dims{t, p, cfg.stem_width}});
  for (std::size_t i = 0; i < cfg.encoder_widths.size(); ++i) {
    t /= 2;
    p /= 2;
    out.push_back({"down" + std::to_string(i + 1), Dims{t, p, cfg.encoder_widths[i]}});
  }
  out.push_back({"transformer", Dims{t, p, cfg.bottleneck_width()}});
  for (std::size_t i = 0; i < cfg.decoder_widths.size(); ++i) {
    t *= 2;
    p *= 2;
    out.push_back({"up" + std::to_string(i + 1), Dims{t, p, cfg.decoder_widths[i]}});
  }
  out.push_back({"output_layer", Dims{t, p, cfg.input_dims.c}});
  return out;
}

namespace {

template <typename T>
Dims stage_dims(const Tensor<T>& x) {
  return Dims{x.dim(2), x.dim(3), x.dim(1)};
}

template <typename T>
void check_stage(const Tensor<T>& x, const StageShape& want, ForwardProbe<T>* probe) {
  const Dims got = stage_dims(x);
  if (got != want.shape) {
    throw ContractError("stage " + want.stage + ": expected " + to_string(want.shape) + ", got " + to_string(got));
  }
  if (probe) probe->stages.push_back({want.stage, got});
}

template <typename T>
Tensor<T> embed_steps(const nn::Linear<T>& mlp, std::span<const int> steps, int dim) {
  std::vector<T> flat;
  flat.reserve(steps.size() * static_cast<std::size_t>(dim));
  for (int s : steps) {
    for (double v : time_embedding(s, dim)) flat.push_back(static_cast<T>(v));
  }
  return nn::silu(mlp(Tensor<T>::from({static_cast<int>(steps.size()), dim}, std::move(flat))));
}

}  // namespace

template <typename T>
TransUNet<T>::TransUNet(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
  cfg_.validate();
  const int cond = cfg_.time_mlp_width;
  time_mlp_ = nn::Linear<T>(store_, "time.mlp", cfg_.time_embed_dim, cond);
  stem_ = nn::Conv2d<T>(store_, "stem", cfg_.input_dims.c, cfg_.stem_width, 3);
  int width = cfg_.stem_width;
  for (std::size_t i = 0; i < cfg_.encoder_widths.size(); ++i) {
    down_.emplace_back(store_, "down" + std::to_string(i + 1), width, cfg_.encoder_widths[i], cond, cfg_.groups);
    width = cfg_.encoder_widths[i];
  }
  for (int l = 0; l < cfg_.transformer_layers; ++l) {
    transformer_.emplace_back(store_, "transformer" + std::to_string(l + 1), width, cfg_.transformer_heads,
                              cfg_.bottleneck_tokens(), width * cfg_.mlp_ratio);
  }
  const std::size_t n = cfg_.encoder_widths.size();
  for (std::size_t i = 0; i < n; ++i) {
    const int skip_width = i + 1 < n ? cfg_.encoder_widths[n - 2 - i] : cfg_.stem_width;
    up_.emplace_back(store_, "up" + std::to_string(i + 1), width + skip_width, cfg_.decoder_widths[i], cond,
                     cfg_.groups);
    width = cfg_.decoder_widths[i];
  }
  out_norm_ = nn::AdaGroupNorm<T>(store_, "out.norm", width, cond, cfg_.groups);
  out_conv_ = nn::Conv2d<T>(store_, "out.conv", width, cfg_.input_dims.c, 3, 0.1);
}

template <typename T>
Tensor<T> TransUNet<T>::conditioning(std::span<const int> steps) const {
  return embed_steps(time_mlp_, steps, cfg_.time_embed_dim);
}

template <typename T>
EncoderOutput<T> TransUNet<T>::encode(const Tensor<T>& x, const Tensor<T>& tau, ForwardProbe<T>* probe) const {
  const Dims& in = cfg_.input_dims;
  if (x.rank() != 4 || x.dim(1) != in.c || x.dim(2) != in.t || x.dim(3) != in.p) {
    throw ContractError("stage input: expected [B, " + std::to_string(in.c) + ", " + std::to_string(in.t) + ", " +
                        std::to_string(in.p) + "], got " + nn::shape_string(x.shape()));
  }
  const auto want = expected_stages(cfg_);
  std::size_t stage = 0;
  EncoderOutput<T> out;
  Tensor<T> h = stem_(x);
  check_stage(h, want[stage++], probe);
  for (const auto& block : down_) {
    out.skips.push_back(h);
    h = block(nn::max_pool2(h), tau);
    check_stage(h, want[stage++], probe);
  }
  const int batch = x.dim(0);
  const int bh = h.dim(2), bw = h.dim(3);
  Tensor<T> tokens = nn::to_tokens(h);
  for (const auto& layer : transformer_) {
    std::vector<T> attn;
    tokens = layer(tokens, batch, probe ? &attn : nullptr);
    if (probe) probe->attention.push_back(std::move(attn));
  }
  out.bottleneck = nn::from_tokens(tokens, batch, bh, bw);
  check_stage(out.bottleneck, want[stage], probe);
  return out;
}

template <typename T>
Tensor<T> TransUNet<T>::decode(const Tensor<T>& bottleneck, const std::vector<Tensor<T>>& skips, const Tensor<T>& tau,
                               ForwardProbe<T>* probe) const {
  const auto want = expected_stages(cfg_);
  std::size_t stage = cfg_.encoder_widths.size() + 2;
  Tensor<T> h = bottleneck;
  for (std::size_t i = 0; i < up_.size(); ++i) {
    h = up_[i](nn::concat_channels(nn::upsample2(h), skips[skips.size() - 1 - i]), tau);
    check_stage(h, want[stage++], probe);
  }
  h = out_conv_(nn::silu(out_norm_(h, tau)));
  check_stage(h, want[stage], probe);
  return h;
}

template <typename T>
Tensor<T> TransUNet<T>::forward(const Tensor<T>& x, std::span<const int> steps, ForwardProbe<T>* probe) const {
  if (x.rank() != 4 || static_cast<std::size_t>(x.dim(0)) != steps.size()) {
    throw ContractError("forward: need one step per batch item");
  }
  Tensor<T> tau = conditioning(steps);
  EncoderOutput<T> enc = encode(x, tau, probe);
  return decode(enc.bottleneck, enc.skips, tau, probe);
}

template <typename T>
FinalDecoderNet<T>::FinalDecoderNet(const DenoiserConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
  cfg_.validate();
  const int cond = cfg_.time_mlp_width;
  const int w = cfg_.stem_width;
  time_mlp_ = nn::Linear<T>(store_, "time.mlp", cfg_.time_embed_dim, cond);
  stem_ = nn::Conv2d<T>(store_, "stem", cfg_.input_dims.c, w, 3);
  for (int i = 0; i < 2; ++i) blocks_.emplace_back(store_, "block" + std::to_string(i + 1), w, w, cond, cfg_.groups);
  out_norm_ = nn::AdaGroupNorm<T>(store_, "out.norm", w, cond, cfg_.groups);
  out_conv_ = nn::Conv2d<T>(store_, "out.conv", w, cfg_.input_dims.c, 3);
}

template <typename T>
Tensor<T> FinalDecoderNet<T>::logits(const Tensor<T>& x) const {
  std::vector<int> steps(static_cast<std::size_t>(x.dim(0)), 1);
  Tensor<T> tau = embed_steps(time_mlp_, steps, cfg_.time_embed_dim);
  Tensor<T> h = stem_(x);
  for (const auto& b : blocks_) h = b(h, tau);
  return out_conv_(nn::silu(out_norm_(h, tau)));
}

template <typename T>
Tensor<T> grids_to_tensor(std::span<const RealGrid> grids) {
  if (grids.empty()) throw ContractError("grids_to_tensor: empty batch");
  const Dims d = grids.front().dims;
  const std::size_t plane = static_cast<std::size_t>(d.t) * d.p;
  std::vector<T> flat(grids.size() * d.cells());
  for (std::size_t b = 0; b < grids.size(); ++b) {
    if (grids[b].dims != d) throw ContractError("grids_to_tensor: mixed dims in batch");
    T* dst = flat.data() + b * d.cells();
    const double* src = grids[b].values.data();
    for (std::size_t tp = 0; tp < plane; ++tp) {
      for (int c = 0; c < d.c; ++c) dst[static_cast<std::size_t>(c) * plane + tp] = static_cast<T>(src[tp * d.c + c]);
    }
  }
  return Tensor<T>::from({static_cast<int>(grids.size()), d.c, d.t, d.p}, std::move(flat));
}

template <typename T>
std::vector<RealGrid> tensor_to_grids(const Tensor<T>& x) {
  const Dims d{x.dim(2), x.dim(3), x.dim(1)};
  const std::size_t plane = static_cast<std::size_t>(d.t) * d.p;
  std::vector<RealGrid> out;
  for (int b = 0; b < x.dim(0); ++b) {
    RealGrid g(d);
    const T* src = x.data().data() + static_cast<std::size_t>(b) * d.cells();
    for (std::size_t tp = 0; tp < plane; ++tp) {
      for (int c = 0; c < d.c; ++c) g.values[tp * d.c + c] = static_cast<double>(src[static_cast<std::size_t>(c) * plane + tp]);
    }
    out.push_back(std::move(g));
  }
  return out;
}

template class TransUNet<float>;
template class TransUNet<double>;
template class FinalDecoderNet<float>;
template class FinalDecoderNet<double>;
template Tensor<float> grids_to_tensor(std::span<const RealGrid>);
template Tensor<double> grids_to_tensor(std::span<const RealGrid>);
template std::vector<RealGrid> tensor_to_grids(const Tensor<float>&);
template std::vector<RealGrid> tensor_to_grids(const Tensor<double>&);

}  // namespace m2m::model
