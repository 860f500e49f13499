#include "m2m/train/training.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>

#include "m2m/core/error.hpp"
#include "m2m/diffusion/diffusion.hpp"
#include "m2m/nn/ops.hpp"
#include "m2m/train/optim.hpp"

namespace m2m::train {

using model::ModelKind;
using nn::Tensor;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("adam betas must be in [0, 1)");
  if (!(plateau_factor > 0.0 && plateau_factor < 1.0)) throw ConfigError("plateau_factor must be in (0, 1)");
  if (patience < 1) throw ConfigError("patience must be >= 1");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (kl_weight < 0.0) throw ConfigError("kl_weight must be >= 0");
  if (max_batches_per_epoch < 0) throw ConfigError("max_batches_per_epoch must be >= 0");
  if (time_budget_seconds < 0.0) throw ConfigError("time_budget_seconds must be >= 0");
  arch.validate();
  diffusion::linear_schedule(diffusion.steps, diffusion.beta_start, diffusion.beta_end);
}

std::string TrainConfig::to_text() const {
  std::string s = fmt::format(
      "model = {}\nepochs = {}\nbatch_size = {}\nlr = {:.17g}\nweight_decay = {:.17g}\nbeta1 = {:.17g}\n"
      "beta2 = {:.17g}\nplateau_factor = {:.17g}\npatience = {}\ngrad_clip = {:.17g}\nkl_weight = {:.17g}\n"
      "seed = {}\nvalid_seed = {}\nmax_batches_per_epoch = {}\ntime_budget_seconds = {:.17g}\n",
      model::model_kind_name(kind), epochs, batch_size, lr, weight_decay, beta1, beta2, plateau_factor, patience,
      grad_clip, kl_weight, seed, valid_seed, max_batches_per_epoch, time_budget_seconds);
  return s + spec().to_text();
}

TrainConfig TrainConfig::parse(const std::string& text, ModelKind kind) {
  KeyValues kv = KeyValues::parse(text);
  TrainConfig c;
  c.kind = kind;
  if (kv.has("model")) {
    const ModelKind named = model::parse_model_kind(kv.take_string("model", ""));
    if (named != kind) {
      throw ConfigError(fmt::format("config names model '{}' but '{}' was requested", model::model_kind_name(named),
                                    model::model_kind_name(kind)));
    }
  }
  c.epochs = kv.take_int("epochs", c.epochs);
  c.batch_size = kv.take_int("batch_size", c.batch_size);
  c.lr = kv.take_double("lr", c.lr);
  c.weight_decay = kv.take_double("weight_decay", c.weight_decay);
  c.beta1 = kv.take_double("beta1", c.beta1);
  c.beta2 = kv.take_double("beta2", c.beta2);
  c.plateau_factor = kv.take_double("plateau_factor", c.plateau_factor);
  c.patience = kv.take_int("patience", c.patience);
  c.grad_clip = kv.take_double("grad_clip", c.grad_clip);
  c.kl_weight = kv.take_double("kl_weight", c.kl_weight);
  c.seed = static_cast<std::uint64_t>(kv.take_int64("seed", 0));
  c.valid_seed = static_cast<std::uint64_t>(kv.take_int64("valid_seed", static_cast<long long>(c.valid_seed)));
  c.max_batches_per_epoch = kv.take_int("max_batches_per_epoch", c.max_batches_per_epoch);
  c.time_budget_seconds = kv.take_double("time_budget_seconds", c.time_budget_seconds);
  c.arch = model::DenoiserConfig::from_keys(kv, model::DenoiserConfig{});
  c.diffusion.steps = kv.take_int("diffusion_steps", c.diffusion.steps);
  c.diffusion.beta_start = kv.take_double("beta_start", c.diffusion.beta_start);
  c.diffusion.beta_end = kv.take_double("beta_end", c.diffusion.beta_end);
  c.diffusion.rescale = kv.take_bool("rescale", c.diffusion.rescale);
  kv.reject_unknown();
  c.validate();
  return c;
}

TrainConfig TrainConfig::read_file(const std::string& path, ModelKind kind) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse(text, kind);
}

int draw_step(Rng& rng, int steps) { return std::uniform_int_distribution<int>(1, steps)(rng); }

namespace {

struct PreparedItem {
  RealGrid y0;    // model space
  RealGrid mask;  // mixture broadcast over channels
};

PreparedItem prepare(const Phrase& ph, const model::ModelSpec& spec) {
  if (ph.roll.dims() != spec.arch.input_dims) {
    throw ContractError("phrase dims " + to_string(ph.roll.dims()) + " do not match model input " +
                        to_string(spec.arch.input_dims));
  }
  return {diffusion::to_model_space(ph.roll, spec.diffusion.rescale),
          broadcast_mask(mixture_from_roll(ph.roll), ph.roll.dims().c)};
}

RealGrid gaussian_like(Dims d, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  RealGrid g(d);
  for (double& v : g.values) v = dist(rng);
  return g;
}

std::vector<float> flat(std::span<const RealGrid> grids) {
  Tensor<float> t = model::grids_to_tensor<float>(grids);
  return {t.data().begin(), t.data().end()};
}

class DdpmObjective final : public Objective {
 public:
  DdpmObjective(const model::ModelSpec& spec, std::uint64_t seed)
      : spec_(spec),
        net_(spec.arch, seed),
        sched_(diffusion::linear_schedule(spec.diffusion.steps, spec.diffusion.beta_start, spec.diffusion.beta_end)) {}
  DdpmObjective(const model::ModelSpec& spec, model::TransUNet<float> net)
      : spec_(spec),
        net_(std::move(net)),
        sched_(diffusion::linear_schedule(spec.diffusion.steps, spec.diffusion.beta_start, spec.diffusion.beta_end)) {}

  const model::ModelSpec& spec() const override { return spec_; }
  nn::ParameterStore<float>& parameters() override { return net_.parameters(); }

  Tensor<float> batch_loss(std::span<const Phrase> batch, Rng& rng, double) override {
    std::vector<RealGrid> inputs, targets, masks;
    std::vector<int> steps;
    for (const Phrase& ph : batch) {
      PreparedItem item = prepare(ph, spec_);
      const int t = draw_step(rng, sched_.steps);
      RealGrid eps = gaussian_like(item.y0.dims, rng);
      RealGrid yt = diffusion::q_sample(item.y0, t, eps, sched_).values;
      apply_mask(yt, item.mask);
      apply_mask(eps, item.mask);
      inputs.push_back(std::move(yt));
      targets.push_back(std::move(eps));
      masks.push_back(std::move(item.mask));
      steps.push_back(t);
    }
    Tensor<float> pred = net_.forward(model::grids_to_tensor<float>(inputs), steps);
    return nn::mse(nn::mul(pred, model::grids_to_tensor<float>(masks)), model::grids_to_tensor<float>(targets));
  }

 private:
  model::ModelSpec spec_;
  model::TransUNet<float> net_;
  diffusion::NoiseSchedule sched_;
};

class DecoderObjective final : public Objective {
 public:
  DecoderObjective(const model::ModelSpec& spec, std::uint64_t seed)
      : spec_(spec),
        net_(spec.arch, seed),
        sched_(diffusion::linear_schedule(spec.diffusion.steps, spec.diffusion.beta_start, spec.diffusion.beta_end)) {}
  DecoderObjective(const model::ModelSpec& spec, model::FinalDecoderNet<float> net)
      : spec_(spec),
        net_(std::move(net)),
        sched_(diffusion::linear_schedule(spec.diffusion.steps, spec.diffusion.beta_start, spec.diffusion.beta_end)) {}

  const model::ModelSpec& spec() const override { return spec_; }
  nn::ParameterStore<float>& parameters() override { return net_.parameters(); }

  Tensor<float> batch_loss(std::span<const Phrase> batch, Rng& rng, double) override {
    std::vector<RealGrid> inputs, targets, masks;
    for (const Phrase& ph : batch) {
      PreparedItem item = prepare(ph, spec_);
      RealGrid eps = gaussian_like(item.y0.dims, rng);
      RealGrid y1 = diffusion::q_sample(item.y0, 1, eps, sched_).values;
      apply_mask(y1, item.mask);
      inputs.push_back(std::move(y1));
      targets.push_back(to_real(ph.roll));
      masks.push_back(std::move(item.mask));
    }
    const std::vector<float> weight = flat(masks);
    const float active = std::accumulate(weight.begin(), weight.end(), 0.0f);
    Tensor<float> logits = net_.logits(model::grids_to_tensor<float>(inputs));
    return nn::bce_with_logits(logits, flat(targets), weight, std::max(active, 1.0f));
  }

 private:
  model::ModelSpec spec_;
  model::FinalDecoderNet<float> net_;
  diffusion::NoiseSchedule sched_;
};

class VaeObjective final : public Objective {
 public:
  VaeObjective(const model::ModelSpec& spec, std::uint64_t seed, double kl_weight)
      : spec_(spec), net_(spec.arch, seed), kl_weight_(kl_weight) {}
  VaeObjective(const model::ModelSpec& spec, model::VaeModel<float> net, double kl_weight)
      : spec_(spec), net_(std::move(net)), kl_weight_(kl_weight) {}

  const model::ModelSpec& spec() const override { return spec_; }
  nn::ParameterStore<float>& parameters() override { return net_.parameters(); }

  Tensor<float> batch_loss(std::span<const Phrase> batch, Rng& rng, double warmup) override {
    std::vector<RealGrid> targets, masks;
    std::vector<float> zeta;
    const std::size_t latent = nn::numel(net_.latent_shape(1));
    std::normal_distribution<double> dist(0.0, 1.0);
    for (const Phrase& ph : batch) {
      PreparedItem item = prepare(ph, spec_);
      targets.push_back(to_real(ph.roll));
      masks.push_back(std::move(item.mask));
      for (std::size_t k = 0; k < latent; ++k) zeta.push_back(static_cast<float>(dist(rng)));
    }
    const int n = static_cast<int>(batch.size());
    auto loss = model::vae_loss(net_, model::grids_to_tensor<float>(masks), flat(targets), flat(masks),
                                Tensor<float>::from(net_.latent_shape(n), std::move(zeta)),
                                kl_weight_ * std::clamp(warmup, 0.0, 1.0));
    return loss.total;
  }

 private:
  model::ModelSpec spec_;
  model::VaeModel<float> net_;
  double kl_weight_;
};

}  // namespace

std::unique_ptr<Objective> make_objective(const model::ModelSpec& spec, std::uint64_t init_seed, double kl_weight) {
  switch (spec.kind) {
    case ModelKind::Ddpm:
      return std::make_unique<DdpmObjective>(spec, init_seed);
    case ModelKind::Decoder:
      return std::make_unique<DecoderObjective>(spec, init_seed);
    case ModelKind::Vae:
      return std::make_unique<VaeObjective>(spec, init_seed, kl_weight);
  }
  throw ContractError("unknown model kind");
}

std::unique_ptr<Objective> load_objective(const nn::Checkpoint& ckpt, double kl_weight) {
  model::ModelSpec spec;
  switch (model::parse_model_kind(ckpt.kind)) {
    case ModelKind::Ddpm: {
      auto net = model::load_denoiser(ckpt, &spec);
      return std::make_unique<DdpmObjective>(spec, std::move(net));
    }
    case ModelKind::Decoder: {
      auto net = model::load_decoder(ckpt, &spec);
      return std::make_unique<DecoderObjective>(spec, std::move(net));
    }
    case ModelKind::Vae: {
      auto net = model::load_vae(ckpt, &spec);
      return std::make_unique<VaeObjective>(spec, std::move(net), kl_weight);
    }
  }
  throw ContractError("unknown model kind");
}

double validate(Objective& objective, std::span<const Phrase> split, int batch_size, std::uint64_t seed) {
  if (split.empty()) throw ConfigError("validation split is empty");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  nn::NoGradGuard guard;
  Rng rng = make_rng(seed, 0);
  double total = 0.0;
  const auto step = static_cast<std::size_t>(batch_size);
  for (std::size_t begin = 0; begin < split.size(); begin += step) {
    const auto part = split.subspan(begin, std::min(step, split.size() - begin));
    total += static_cast<double>(objective.batch_loss(part, rng, 1.0).item()) * static_cast<double>(part.size());
  }
  return total / static_cast<double>(split.size());
}

std::string TrainReport::to_csv() const {
  std::string s = "epoch,train_loss,valid_loss,lr\n";
  for (const auto& e : epochs) s += fmt::format("{},{:.17g},{:.17g},{:.17g}\n", e.epoch, e.train_loss, e.valid_loss, e.lr);
  return s;
}

TrainReport train(const TrainConfig& cfg, std::span<const Phrase> train_split, std::span<const Phrase> valid_split,
                  const std::string& out_dir, const EpochCallback& on_epoch) {
  cfg.validate();
  if (train_split.empty()) throw ConfigError("training split is empty");
  if (valid_split.empty()) throw ConfigError("validation split is empty");
  std::filesystem::create_directories(out_dir);

  const model::ModelSpec spec = cfg.spec();
  auto objective = make_objective(spec, cfg.seed, cfg.kl_weight);
  AdamW opt(objective->parameters(), AdamWOptions{cfg.lr, cfg.beta1, cfg.beta2, 1e-8, cfg.weight_decay});
  PlateauSchedule plateau(cfg.lr, cfg.plateau_factor, cfg.patience);

  TrainReport report;
  const std::string last_path = (std::filesystem::path(out_dir) / "last.m2mc").string();
  const std::string best_path = (std::filesystem::path(out_dir) / "best.m2mc").string();
  std::string last_good;

  Rng order_rng = make_rng(cfg.seed, 1);
  Rng noise_rng = make_rng(cfg.seed, 2);
  std::vector<std::size_t> order(train_split.size());
  std::iota(order.begin(), order.end(), 0);

  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  std::size_t batches_per_epoch = (train_split.size() + bs - 1) / bs;
  if (cfg.max_batches_per_epoch > 0) {
    batches_per_epoch = std::min(batches_per_epoch, static_cast<std::size_t>(cfg.max_batches_per_epoch));
  }
  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count(); };
  bool out_of_time = false;
  long long global_batch = 0;

  for (int epoch = 1; epoch <= cfg.epochs && !out_of_time; ++epoch) {
    const double epoch_start = elapsed();
    std::shuffle(order.begin(), order.end(), order_rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::vector<Phrase> batch;
    for (std::size_t b = 0; b < batches_per_epoch; ++b) {
      batch.clear();
      for (std::size_t k = b * bs; k < std::min(train_split.size(), (b + 1) * bs); ++k) {
        batch.push_back(train_split[order[k]]);
      }
      objective->parameters().zero_grad();
      const double warmup = static_cast<double>(global_batch + 1) / static_cast<double>(batches_per_epoch);
      Tensor<float> loss = objective->batch_loss(batch, noise_rng, warmup);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw TrainingFault(fmt::format("non-finite training loss in epoch {} batch {}", epoch, b + 1), last_good);
      }
      loss.backward();
      clip_grad_norm(objective->parameters(), cfg.grad_clip);
      opt.step();
      ++global_batch;
      loss_sum += value * static_cast<double>(batch.size());
      seen += batch.size();
      if (cfg.time_budget_seconds > 0.0 && elapsed() >= cfg.time_budget_seconds) {
        out_of_time = true;
        break;
      }
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = opt.lr();
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.valid_loss = validate(*objective, valid_split, cfg.batch_size, cfg.valid_seed);
    if (!std::isfinite(rec.valid_loss)) {
      throw TrainingFault(fmt::format("non-finite validation loss in epoch {}", epoch), last_good);
    }
    const auto ckpt = model::make_checkpoint(spec, objective->parameters(), true);
    nn::write_checkpoint_file(ckpt, last_path);
    last_good = last_path;
    if (report.epochs.empty() || rec.valid_loss < report.best_valid_loss) {
      nn::write_checkpoint_file(ckpt, best_path);
      report.best_valid_loss = rec.valid_loss;
      report.best_checkpoint = best_path;
    }
    plateau.observe(rec.valid_loss);
    opt.set_lr(plateau.lr());
    rec.seconds = elapsed() - epoch_start;
    report.epochs.push_back(rec);
    report.last_checkpoint = last_path;
    if (on_epoch) on_epoch(rec);
  }
  return report;
}

}  // namespace m2m::train
