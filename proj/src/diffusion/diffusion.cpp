#include "m2m/diffusion/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "m2m/core/error.hpp"

namespace m2m::diffusion {

NoiseSchedule linear_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ConfigError("linear_schedule: steps must be >= 2");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("linear_schedule: need 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.beta.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  s.alpha.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  s.alpha_bar.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    const auto i = static_cast<std::size_t>(t);
    s.beta[i] = beta_start + (beta_end - beta_start) * static_cast<double>(t - 1) / static_cast<double>(steps - 1);
    s.alpha[i] = 1.0 - s.beta[i];
    s.alpha_bar[i] = s.alpha_bar[i - 1] * s.alpha[i];
  }
  return s;
}

const char* sampler_name(SamplerKind k) { return k == SamplerKind::Ddpm ? "ddpm" : "ddim"; }

SamplerKind parse_sampler(const std::string& name) {
  if (name == "ddpm") return SamplerKind::Ddpm;
  if (name == "ddim") return SamplerKind::Ddim;
  throw ConfigError("unknown sampler '" + name + "' (expected ddpm or ddim)");
}

RealGrid to_model_space(const Pianoroll& y0, bool rescale) {
  RealGrid g = to_real(y0);
  if (rescale) {
    for (double& v : g.values) v = 2.0 * v - 1.0;
  }
  return g;
}

namespace {

void require_step(const NoiseSchedule& sched, int t, const char* op) {
  if (t < 1 || t > sched.steps) {
    throw ContractError(std::string(op) + ": step " + std::to_string(t) + " outside [1, " +
                        std::to_string(sched.steps) + "]");
  }
}

void require_mixture(const RealGrid& g, const Mixture& x, const char* op) {
  if (g.dims.t != x.steps() || g.dims.p != x.pitches()) {
    throw ContractError(std::string(op) + ": sample dims " + to_string(g.dims) + " do not match mixture");
  }
}

// Noise is drawn only where the mask is on; the other cells are zeroed
// afterwards anyway, and skipping them keeps sparse mixtures cheap.
void add_noise(RealGrid& y, const RealGrid& mask, double sigma, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (std::size_t k = 0; k < y.values.size(); ++k) {
    if (mask.values[k] != 0.0) y.values[k] += sigma * dist(rng);
  }
}

RealGrid gaussian(const RealGrid& mask, Rng& rng) {
  RealGrid g(mask.dims);
  add_noise(g, mask, 1.0, rng);
  return g;
}

bool all_finite(const RealGrid& g) {
  return std::all_of(g.values.begin(), g.values.end(), [](double v) { return std::isfinite(v); });
}

// One DDPM update from t to t-1 given the predicted noise.
void ddpm_update(RealGrid& y, const RealGrid& eps_hat, const RealGrid& mask, const NoiseSchedule& s, int t, Rng& rng) {
  const auto i = static_cast<std::size_t>(t);
  const double c1 = 1.0 / std::sqrt(s.alpha[i]);
  const double c2 = s.beta[i] / std::sqrt(1.0 - s.alpha_bar[i]);
  for (std::size_t k = 0; k < y.values.size(); ++k) y.values[k] = c1 * (y.values[k] - c2 * eps_hat.values[k]);
  if (t > 1) {
    const double var = s.beta[i] * (1.0 - s.alpha_bar[i - 1]) / (1.0 - s.alpha_bar[i]);
    add_noise(y, mask, std::sqrt(var), rng);
  }
  apply_mask(y, mask);
}

void ddim_update(RealGrid& y, const RealGrid& eps_hat, const RealGrid& mask, const NoiseSchedule& s, int t, int t_next,
                 double eta, Rng& rng) {
  const double ab_t = s.alpha_bar[static_cast<std::size_t>(t)];
  const double ab_n = s.alpha_bar[static_cast<std::size_t>(t_next)];
  if (!(ab_t > 0.0)) throw ContractError("ddim_reverse_step: alpha_bar[" + std::to_string(t) + "] is zero");
  const double sigma = eta * std::sqrt((1.0 - ab_n) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_n);
  const double dir = std::sqrt(std::max(0.0, 1.0 - ab_n - sigma * sigma));
  const double sq_t = std::sqrt(1.0 - ab_t);
  const double inv = 1.0 / std::sqrt(ab_t);
  const double sq_n = std::sqrt(ab_n);
  for (std::size_t k = 0; k < y.values.size(); ++k) {
    const double e = eps_hat.values[k];
    const double y0_hat = (y.values[k] - sq_t * e) * inv;
    y.values[k] = sq_n * y0_hat + dir * e;
  }
  if (sigma > 0.0) add_noise(y, mask, sigma, rng);
  apply_mask(y, mask);
}

RealGrid predict_one(const NoisePredictor& denoiser, const RealGrid& input, int t) {
  auto out = denoiser.predict(std::span<const RealGrid>(&input, 1), t);
  if (out.size() != 1 || out.front().dims != input.dims) throw ContractError("denoiser returned wrong shape");
  return std::move(out.front());
}

}  // namespace

NoisySample q_sample(const RealGrid& y0, int t, const RealGrid& eps, const NoiseSchedule& sched) {
  require_step(sched, t, "q_sample");
  if (y0.dims != eps.dims) throw ContractError("q_sample: eps shape " + to_string(eps.dims) + " vs " + to_string(y0.dims));
  const double ab = sched.alpha_bar[static_cast<std::size_t>(t)];
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  NoisySample out{RealGrid(y0.dims), t};
  for (std::size_t k = 0; k < y0.values.size(); ++k) out.values.values[k] = a * y0.values[k] + b * eps.values[k];
  return out;
}

double masked_loss(const NoisePredictor& denoiser, const RealGrid& y0, const Mixture& x, int t, const RealGrid& eps,
                   const NoiseSchedule& sched) {
  require_mixture(y0, x, "masked_loss");
  const RealGrid mask = broadcast_mask(x, y0.dims.c);
  NoisySample yt = q_sample(y0, t, eps, sched);
  apply_mask(yt.values, mask);
  const RealGrid pred = predict_one(denoiser, yt.values, t);
  double acc = 0.0;
  for (std::size_t k = 0; k < pred.values.size(); ++k) {
    const double d = (eps.values[k] - pred.values[k]) * mask.values[k];
    acc += d * d;
  }
  const double loss = acc / static_cast<double>(pred.values.size());
  if (!std::isfinite(loss)) throw TrainingFault("non-finite masked loss at step " + std::to_string(t), "");
  return loss;
}

NoisySample ddpm_reverse_step(const NoisePredictor& denoiser, const NoisySample& y_t, const Mixture& x,
                              const NoiseSchedule& sched, Rng& rng) {
  if (y_t.t == 0) throw ContractError("ddpm_reverse_step: t = 0 has no reverse step; use decode_final");
  require_step(sched, y_t.t, "ddpm_reverse_step");
  require_mixture(y_t.values, x, "ddpm_reverse_step");
  const RealGrid mask = broadcast_mask(x, y_t.values.dims.c);
  NoisySample out{y_t.values, y_t.t - 1};
  apply_mask(out.values, mask);
  const RealGrid eps_hat = predict_one(denoiser, out.values, y_t.t);
  ddpm_update(out.values, eps_hat, mask, sched, y_t.t, rng);
  return out;
}

NoisySample ddim_reverse_step(const NoisePredictor& denoiser, const NoisySample& y_t, const Mixture& x,
                              const NoiseSchedule& sched, int t_next, double eta, Rng& rng) {
  require_step(sched, y_t.t, "ddim_reverse_step");
  if (t_next < 0 || t_next >= y_t.t) throw ContractError("ddim_reverse_step: t_next must be in [0, t)");
  require_mixture(y_t.values, x, "ddim_reverse_step");
  const RealGrid mask = broadcast_mask(x, y_t.values.dims.c);
  NoisySample out{y_t.values, t_next};
  apply_mask(out.values, mask);
  const RealGrid eps_hat = predict_one(denoiser, out.values, y_t.t);
  ddim_update(out.values, eps_hat, mask, sched, y_t.t, t_next, eta, rng);
  return out;
}

RealGrid decode_final(const ProbabilityDecoder& decoder, const NoisySample& y1, const Mixture& x) {
  if (!decoder.trained()) throw StateError("decode_final: decoder has not been trained or loaded");
  require_mixture(y1.values, x, "decode_final");
  const RealGrid mask = broadcast_mask(x, y1.values.dims.c);
  RealGrid input = y1.values;
  apply_mask(input, mask);
  auto probs = decoder.probabilities(std::span<const RealGrid>(&input, 1));
  if (probs.size() != 1 || probs.front().dims != input.dims) throw ContractError("decoder returned wrong shape");
  RealGrid p = std::move(probs.front());
  for (double& v : p.values) v = std::clamp(v, 0.0, 1.0);
  apply_mask(p, mask);
  return p;
}

std::vector<int> ddim_timesteps(int steps, int count) {
  if (count < 1 || count > steps) throw ConfigError("ddim_steps must be in [1, " + std::to_string(steps) + "]");
  std::vector<int> seq;
  for (int i = 0; i <= count; ++i) {
    const double v = static_cast<double>(steps) - static_cast<double>(steps - 1) * i / count;
    const int t = static_cast<int>(std::lround(v));
    if (seq.empty() || seq.back() != t) seq.push_back(t);
  }
  return seq;
}

std::vector<SampleResult> sample_batch(const NoisePredictor& denoiser, const ProbabilityDecoder& decoder,
                                       std::span<const Mixture> mixtures, const NoiseSchedule& sched,
                                       const SamplerConfig& cfg, int channels, std::uint64_t first_stream) {
  if (!decoder.trained()) throw StateError("sample: decoder has not been trained or loaded");
  if (cfg.kind == SamplerKind::Ddim && (cfg.eta < 0.0 || cfg.eta > 1.0)) throw ConfigError("eta must be in [0, 1]");
  const std::size_t n = mixtures.size();
  std::vector<SampleResult> results(n);
  if (n == 0) return results;

  struct Item {
    RealGrid y;
    RealGrid mask;
    Rng rng;
    bool live = true;
  };
  std::vector<Item> items;
  items.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const Mixture& x = mixtures[i];
    Item it{RealGrid(), broadcast_mask(x, channels), make_rng(cfg.seed, first_stream + i)};
    it.y = gaussian(it.mask, it.rng);
    apply_mask(it.y, it.mask);
    items.push_back(std::move(it));
  }

  std::vector<int> seq;
  if (cfg.kind == SamplerKind::Ddpm) {
    for (int t = sched.steps; t >= 1; --t) seq.push_back(t);
  } else {
    seq = ddim_timesteps(sched.steps, cfg.ddim_steps);
  }

  std::vector<RealGrid> inputs;
  std::vector<std::size_t> index;
  for (std::size_t s = 0; s + 1 < seq.size(); ++s) {
    const int t = seq[s];
    const int t_next = seq[s + 1];
    inputs.clear();
    index.clear();
    for (std::size_t i = 0; i < n; ++i) {
      if (!items[i].live) continue;
      inputs.push_back(items[i].y);
      index.push_back(i);
    }
    if (inputs.empty()) break;
    auto eps = denoiser.predict(inputs, t);
    if (eps.size() != inputs.size()) throw ContractError("denoiser returned wrong batch size");
    for (std::size_t j = 0; j < index.size(); ++j) {
      Item& it = items[index[j]];
      if (cfg.kind == SamplerKind::Ddpm) {
        ddpm_update(it.y, eps[j], it.mask, sched, t, it.rng);
      } else {
        ddim_update(it.y, eps[j], it.mask, sched, t, t_next, cfg.eta, it.rng);
      }
      if (!all_finite(it.y)) {
        it.live = false;
        results[index[j]].fault_step = t;
      }
    }
  }

  inputs.clear();
  index.clear();
  for (std::size_t i = 0; i < n; ++i) {
    if (!items[i].live) continue;
    inputs.push_back(items[i].y);
    index.push_back(i);
  }
  if (inputs.empty()) return results;
  auto probs = decoder.probabilities(inputs);
  if (probs.size() != inputs.size()) throw ContractError("decoder returned wrong batch size");
  for (std::size_t j = 0; j < index.size(); ++j) {
    const std::size_t i = index[j];
    const RealGrid& p = probs[j];
    if (!all_finite(p)) {
      results[i].fault_step = 1;
      continue;
    }
    const Dims d = items[i].mask.dims;
    Pianoroll roll(d);
    auto cells = roll.cells();
    for (std::size_t k = 0; k < cells.size(); ++k) {
      cells[k] = (items[i].mask.values[k] > 0.0 && p.values[k] > 0.5) ? 1 : 0;
    }
    results[i].roll = std::move(roll);
  }
  return results;
}

Pianoroll sample(const NoisePredictor& denoiser, const ProbabilityDecoder& decoder, const Mixture& x,
                 const NoiseSchedule& sched, const SamplerConfig& cfg, int channels) {
  auto r = sample_batch(denoiser, decoder, std::span<const Mixture>(&x, 1), sched, cfg, channels, 0);
  if (!r.front().roll) throw SamplingFault(r.front().fault_step);
  return std::move(*r.front().roll);
}

}  // namespace m2m::diffusion
