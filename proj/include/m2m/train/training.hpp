#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "m2m/core/rng.hpp"
#include "m2m/data/pianoroll_data.hpp"
#include "m2m/model/model_io.hpp"
#include "m2m/nn/tensor.hpp"

namespace m2m::train {

struct TrainConfig {
  model::ModelKind kind = model::ModelKind::Ddpm;
  int epochs = 50;
  int batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double plateau_factor = 0.9;
  int patience = 1;
  double grad_clip = 1.0;
  double kl_weight = 1.0;
  std::uint64_t seed = 0;
  std::uint64_t valid_seed = 1234;
  int max_batches_per_epoch = 0;    // 0: the whole split
  double time_budget_seconds = 0.0; // 0: unlimited
  model::DenoiserConfig arch;
  model::DiffusionSettings diffusion;

  void validate() const;
  model::ModelSpec spec() const { return model::ModelSpec{kind, arch, diffusion}; }
  std::string to_text() const;
  /// Parses `key = value` text; unknown keys raise ConfigError naming the key.
  static TrainConfig parse(const std::string& text, model::ModelKind kind);
  static TrainConfig read_file(const std::string& path, model::ModelKind kind);
};

/// One model family's training loss over a parameter store.
class Objective {
 public:
  virtual ~Objective() = default;
  virtual const model::ModelSpec& spec() const = 0;
  virtual nn::ParameterStore<float>& parameters() = 0;
  /// Mean loss over the batch, recorded for backpropagation when gradients are
  /// enabled. `warmup` in [0,1] scales the VAE's KL weight.
  virtual nn::Tensor<float> batch_loss(std::span<const Phrase> batch, Rng& rng, double warmup) = 0;
};

std::unique_ptr<Objective> make_objective(const model::ModelSpec& spec, std::uint64_t init_seed, double kl_weight = 1.0);
/// Restores parameters from a checkpoint of the matching kind.
std::unique_ptr<Objective> load_objective(const nn::Checkpoint& ckpt, double kl_weight = 1.0);

/// Step index uniform on [1, steps].
int draw_step(Rng& rng, int steps);

/// Loss averaged over every phrase of `split` with noise drawn from `seed`.
/// Throws ConfigError on an empty split.
double validate(Objective& objective, std::span<const Phrase> split, int batch_size, std::uint64_t seed);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double valid_loss = 0.0;
  double lr = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  std::string best_checkpoint;
  std::string last_checkpoint;
  double best_valid_loss = 0.0;

  /// Rows `epoch,train_loss,valid_loss,lr` under a header line.
  std::string to_csv() const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Runs the optimization loop, writing `last.m2mc` every epoch and `best.m2mc`
/// whenever validation loss improves. A non-finite loss raises TrainingFault
/// carrying the last checkpoint written.
TrainReport train(const TrainConfig& cfg, std::span<const Phrase> train_split, std::span<const Phrase> valid_split,
                  const std::string& out_dir, const EpochCallback& on_epoch = {});

}  // namespace m2m::train
