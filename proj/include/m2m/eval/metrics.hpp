#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "m2m/core/grid.hpp"
#include "m2m/data/pianoroll_data.hpp"
#include "m2m/diffusion/diffusion.hpp"
#include "m2m/model/vae.hpp"

namespace m2m::eval {

/// Mean of |a - b| over all cells. Throws ContractError on a shape mismatch.
double hamming_mean(const Pianoroll& a, const Pianoroll& b);
double hamming_mean(const Mixture& a, const Mixture& b);

/// Mean over pairs of hamming_mean(mixture_from_roll(sample), mixture).
double consistency(std::span<const Pianoroll> samples, std::span<const Mixture> mixtures);
/// Mean over pairs of hamming_mean(sample, original).
double diversity(std::span<const Pianoroll> samples, std::span<const Pianoroll> originals);

/// Produces one separation per mixture. Item i of a call must depend only on
/// its mixture and on `first_stream + i`, never on batch composition.
class Separator {
 public:
  virtual ~Separator() = default;
  virtual std::string tag() const = 0;
  virtual std::vector<std::optional<Pianoroll>> separate(std::span<const Mixture> mixtures,
                                                         std::uint64_t first_stream) const = 0;
};

class DiffusionSeparator final : public Separator {
 public:
  DiffusionSeparator(std::string tag, const diffusion::NoisePredictor& denoiser,
                     const diffusion::ProbabilityDecoder& decoder, diffusion::NoiseSchedule sched,
                     diffusion::SamplerConfig cfg, int channels = kInstruments)
      : tag_(std::move(tag)), denoiser_(denoiser), decoder_(decoder), sched_(std::move(sched)), cfg_(cfg),
        channels_(channels) {}
  std::string tag() const override { return tag_; }
  std::vector<std::optional<Pianoroll>> separate(std::span<const Mixture> mixtures,
                                                 std::uint64_t first_stream) const override;

 private:
  std::string tag_;
  const diffusion::NoisePredictor& denoiser_;
  const diffusion::ProbabilityDecoder& decoder_;
  diffusion::NoiseSchedule sched_;
  diffusion::SamplerConfig cfg_;
  int channels_;
};

/// Latent drawn from the prior, probabilities thresholded at 0.5.
class VaeSeparator final : public Separator {
 public:
  VaeSeparator(std::string tag, const model::VaeModel<float>& model, std::uint64_t seed)
      : tag_(std::move(tag)), model_(model), seed_(seed) {}
  std::string tag() const override { return tag_; }
  std::vector<std::optional<Pianoroll>> separate(std::span<const Mixture> mixtures,
                                                 std::uint64_t first_stream) const override;

 private:
  std::string tag_;
  const model::VaeModel<float>& model_;
  std::uint64_t seed_;
};

struct SampleRow {
  std::size_t index = 0;
  bool ok = false;
  double consistency = 0.0;
  double diversity = 0.0;
};

struct MetricsReport {
  std::string model;
  double consistency = 0.0;
  double diversity = 0.0;
  std::size_t sample_count = 0;  // successful samples
  std::size_t failed = 0;
  std::vector<SampleRow> rows;

  /// Stable text layout: header fields, then one row per sample.
  std::string to_text() const;
};

/// One separation per phrase of `split`, generated `batch` at a time.
/// Failed samples are counted and excluded from the averages.
MetricsReport evaluate(const Separator& separator, std::span<const Phrase> split, std::size_t batch = 16);

/// Side-by-side summary of several reports.
std::string comparison_table(std::span<const MetricsReport> reports);

}  // namespace m2m::eval
