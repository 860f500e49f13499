#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m2m/core/grid.hpp"
#include "m2m/core/rng.hpp"

namespace m2m::diffusion {

/// Per-step coefficients indexed 0..steps. Index 0 holds the clean-data
/// convention beta = 0, alpha = alpha_bar = 1.
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
};

/// beta[t] interpolates linearly from beta_start (t = 1) to beta_end (t = steps).
NoiseSchedule linear_schedule(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);

enum class SamplerKind { Ddpm, Ddim };

const char* sampler_name(SamplerKind k);
SamplerKind parse_sampler(const std::string& name);

struct SamplerConfig {
  SamplerKind kind = SamplerKind::Ddim;
  int ddim_steps = 50;
  double eta = 0.0;
  std::uint64_t seed = 0;
};

struct NoisySample {
  RealGrid values;
  int t = 0;
};

/// eps-prediction network. All inputs of one call share the step `t`.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual std::vector<RealGrid> predict(std::span<const RealGrid> inputs, int t) const = 0;
};

/// Maps masked t=1 samples to per-cell note probabilities.
class ProbabilityDecoder {
 public:
  virtual ~ProbabilityDecoder() = default;
  virtual std::vector<RealGrid> probabilities(std::span<const RealGrid> y1) const = 0;
  virtual bool trained() const = 0;
};

/// Diffusion runs on y0 in {0,1}; with `rescale` it runs on 2*y0 - 1.
RealGrid to_model_space(const Pianoroll& y0, bool rescale = false);

/// y_t = sqrt(alpha_bar[t]) * y0 + sqrt(1 - alpha_bar[t]) * eps
NoisySample q_sample(const RealGrid& y0, int t, const RealGrid& eps, const NoiseSchedule& sched);

/// mean over all cells of (eps*X - predict(y_t*X)*X)^2 with X the broadcast mixture.
double masked_loss(const NoisePredictor& denoiser, const RealGrid& y0, const Mixture& x, int t, const RealGrid& eps,
                   const NoiseSchedule& sched);

/// Ancestral step t -> t-1, masked by X. No noise is added when t = 1.
NoisySample ddpm_reverse_step(const NoisePredictor& denoiser, const NoisySample& y_t, const Mixture& x,
                              const NoiseSchedule& sched, Rng& rng);

/// Generalized (eta) DDIM step t -> t_next < t, masked by X.
NoisySample ddim_reverse_step(const NoisePredictor& denoiser, const NoisySample& y_t, const Mixture& x,
                              const NoiseSchedule& sched, int t_next, double eta, Rng& rng);

/// Probabilities in [0,1]; exactly 0 where the mixture is silent.
RealGrid decode_final(const ProbabilityDecoder& decoder, const NoisySample& y1, const Mixture& x);

/// Evenly spaced descending steps from `steps` to 1 (count + 1 points before
/// de-duplication).
std::vector<int> ddim_timesteps(int steps, int count);

struct SampleResult {
  std::optional<Pianoroll> roll;  // empty when sampling faulted
  int fault_step = 0;
};

/// Full reverse process for a batch of mixtures. Item i draws its noise from
/// stream `first_stream + i` of cfg.seed, so results do not depend on batching.
std::vector<SampleResult> sample_batch(const NoisePredictor& denoiser, const ProbabilityDecoder& decoder,
                                       std::span<const Mixture> mixtures, const NoiseSchedule& sched,
                                       const SamplerConfig& cfg, int channels = kInstruments,
                                       std::uint64_t first_stream = 0);

/// Single mixture (stream 0). Throws SamplingFault on non-finite values.
Pianoroll sample(const NoisePredictor& denoiser, const ProbabilityDecoder& decoder, const Mixture& x,
                 const NoiseSchedule& sched, const SamplerConfig& cfg, int channels = kInstruments);

}  // namespace m2m::diffusion
