#include "m2m/cli/cli.hpp"

#include <CLI11.hpp>
#include <fmt/format.h>
#include <fmt/ostream.h>

#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <ostream>

#include "m2m/core/error.hpp"
#include "m2m/data/dataset.hpp"
#include "m2m/data/ingest.hpp"
#include "m2m/eval/metrics.hpp"
#include "m2m/model/model_io.hpp"
#include "m2m/model/predictors.hpp"
#include "m2m/render/render.hpp"
#include "m2m/train/training.hpp"

namespace m2m::cli {

namespace fs = std::filesystem;

namespace {

// Input problems map to exit 2, runtime faults to exit 3.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void write_text(const std::string& path, const std::string& text) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << text;
}

void write_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes) {
  if (auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

nn::Checkpoint open_checkpoint(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("checkpoint " + path + " not found");
  return nn::read_checkpoint_file(path);
}

std::vector<Phrase> open_dataset(const std::string& path) {
  if (!fs::is_regular_file(path)) throw UsageError("dataset " + path + " not found");
  return load_dataset(path);
}

std::array<int, 3> parse_percentages(const std::string& text) {
  std::array<int, 3> pct{};
  char s1 = 0, s2 = 0;
  std::istringstream is(text);
  if (!(is >> pct[0] >> s1 >> pct[1] >> s2 >> pct[2]) || s1 != '/' || s2 != '/' || !is.eof()) {
    throw UsageError("--split expects train/valid/test percentages such as 90/5/5");
  }
  return pct;
}

struct SamplerFlags {
  std::string sampler = "ddim";
  int ddim_steps = 50;
  double eta = 0.0;
  std::uint64_t seed = 0;

  diffusion::SamplerConfig config(const std::string& kind) const {
    return {diffusion::parse_sampler(kind), ddim_steps, eta, seed};
  }
};

void add_sampler_flags(CLI::App* cmd, SamplerFlags& f) {
  cmd->add_option("--ddim-steps", f.ddim_steps, "DDIM step count")->capture_default_str();
  cmd->add_option("--eta", f.eta, "DDIM stochasticity in [0,1]")->capture_default_str();
  cmd->add_option("--seed", f.seed, "sampling seed")->capture_default_str();
}

/// A loaded separator together with the models it borrows.
struct LoadedSeparator {
  std::unique_ptr<model::TransUNet<float>> denoiser;
  std::unique_ptr<model::FinalDecoderNet<float>> decoder;
  std::unique_ptr<model::VaeModel<float>> vae;
  std::unique_ptr<model::DenoiserAdapter> predictor;
  std::unique_ptr<model::DecoderAdapter> prob;
  std::unique_ptr<eval::Separator> separator;
  Dims dims;
};

LoadedSeparator load_separator(const std::string& checkpoint, const std::string& decoder_checkpoint,
                               const std::string& sampler, const SamplerFlags& flags, const std::string& tag) {
  LoadedSeparator ls;
  const nn::Checkpoint ckpt = open_checkpoint(checkpoint);
  const model::ModelKind kind = model::parse_model_kind(ckpt.kind);
  model::ModelSpec spec;
  if (kind == model::ModelKind::Vae) {
    ls.vae = std::make_unique<model::VaeModel<float>>(model::load_vae(ckpt, &spec));
    ls.separator = std::make_unique<eval::VaeSeparator>(tag.empty() ? "vae" : tag, *ls.vae, flags.seed);
  } else if (kind == model::ModelKind::Ddpm) {
    if (decoder_checkpoint.empty()) throw UsageError("a ddpm checkpoint needs --decoder-checkpoint");
    const nn::Checkpoint dec = open_checkpoint(decoder_checkpoint);
    model::ModelSpec dec_spec;
    ls.denoiser = std::make_unique<model::TransUNet<float>>(model::load_denoiser(ckpt, &spec));
    ls.decoder = std::make_unique<model::FinalDecoderNet<float>>(model::load_decoder(dec, &dec_spec));
    if (dec_spec.arch.input_dims != spec.arch.input_dims) throw UsageError("decoder and denoiser dims differ");
    ls.predictor = std::make_unique<model::DenoiserAdapter>(*ls.denoiser);
    ls.prob = std::make_unique<model::DecoderAdapter>(*ls.decoder, dec.trained);
    auto sched = diffusion::linear_schedule(spec.diffusion.steps, spec.diffusion.beta_start, spec.diffusion.beta_end);
    ls.separator = std::make_unique<eval::DiffusionSeparator>(tag.empty() ? sampler : tag, *ls.predictor, *ls.prob,
                                                              std::move(sched), flags.config(sampler),
                                                              spec.arch.input_dims.c);
  } else {
    throw UsageError("checkpoint " + checkpoint + " holds a decoder; pass it with --decoder-checkpoint");
  }
  ls.dims = spec.arch.input_dims;
  return ls;
}

int cmd_ingest(const std::string& in, const std::string& out_dir, const std::string& split, std::uint64_t seed,
               std::ostream& out) {
  const auto pct = parse_percentages(split);
  IngestResult result = ingest_directory(in, pct, seed);
  fmt::print(out, "{}", result.report.to_text());
  if (result.report.eligible == 0) {
    fmt::print(out, "no eligible files in {}\n", in);
    return kExitUsage;
  }
  write_ingest(result, out_dir);
  return kExitOk;
}

int cmd_train(const std::string& kind_name, const std::string& data, const std::string& valid_path,
              const std::string& config, const std::string& out_dir, std::ostream& out, std::ostream& err) {
  const model::ModelKind kind = model::parse_model_kind(kind_name);
  train::TrainConfig cfg = config.empty() ? train::TrainConfig::parse("", kind) : [&] {
    if (!fs::is_regular_file(config)) throw UsageError("config " + config + " not found");
    return train::TrainConfig::read_file(config, kind);
  }();
  std::vector<Phrase> train_set, valid_set;
  if (fs::is_directory(data)) {
    train_set = open_dataset((fs::path(data) / "train.m2m").string());
    valid_set = open_dataset((fs::path(data) / "valid.m2m").string());
  } else {
    train_set = open_dataset(data);
    valid_set = valid_path.empty() ? train_set : open_dataset(valid_path);
  }
  if (!valid_path.empty() && fs::is_directory(data)) valid_set = open_dataset(valid_path);
  write_text((fs::path(out_dir) / "train_config.txt").string(), cfg.to_text());
  auto report = train::train(cfg, train_set, valid_set, out_dir, [&](const train::EpochRecord& r) {
    fmt::print(err, "epoch {} train {:.6g} valid {:.6g} lr {:.3g} ({:.1f}s)\n", r.epoch, r.train_loss, r.valid_loss,
               r.lr, r.seconds);
  });
  write_text((fs::path(out_dir) / "report.csv").string(), report.to_csv());
  fmt::print(out, "best checkpoint {}\nlast checkpoint {}\nbest valid loss {:.17g}\n", report.best_checkpoint,
             report.last_checkpoint, report.best_valid_loss);
  return kExitOk;
}

int cmd_separate(const std::string& mixture_path, const std::string& checkpoint, const std::string& decoder,
                 const std::string& sampler, const SamplerFlags& flags, const std::string& out_path,
                 const std::string& phrases_out, std::ostream& out) {
  if (!fs::is_regular_file(mixture_path)) throw UsageError("mixture " + mixture_path + " not found");
  const midi::Song song = midi::read_midi_file(mixture_path);
  MixtureTiles tiles = mixture_tiles(song.events, song.ticks_per_quarter);
  std::vector<Mixture> active;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < tiles.tiles.size(); ++i) {
    if (tiles.tiles[i].active_count() == 0) continue;
    active.push_back(tiles.tiles[i]);
    where.push_back(i);
  }
  if (active.empty()) throw UsageError("mixture " + mixture_path + " yields no phrases");
  LoadedSeparator ls = load_separator(checkpoint, decoder, sampler, flags, "");
  if (ls.dims != Dims{}) throw UsageError("checkpoint dims " + to_string(ls.dims) + " differ from the phrase grid");
  auto results = ls.separator->separate(active, 0);
  std::vector<Pianoroll> rolls(tiles.tiles.size(), Pianoroll(Dims{}));
  for (std::size_t j = 0; j < results.size(); ++j) {
    if (!results[j]) throw SamplingFault(0);
    rolls[where[j]] = std::move(*results[j]);
  }
  write_bytes(out_path, export_midi(rolls));
  if (!phrases_out.empty()) {
    std::vector<Phrase> phrases;
    for (std::size_t i = 0; i < rolls.size(); ++i) {
      phrases.push_back({rolls[i], fs::path(mixture_path).filename().string(), static_cast<std::uint32_t>(i * 4)});
    }
    save_dataset(phrases, phrases_out);
  }
  std::size_t notes = 0;
  for (const auto& r : rolls) notes += r.active_count();
  fmt::print(out, "separated {} phrase(s), {} active cells -> {}\n", active.size(), notes, out_path);
  return kExitOk;
}

int cmd_evaluate(const std::string& data, const std::vector<std::string>& checkpoints, const std::string& decoder,
                 const std::vector<std::string>& samplers, const SamplerFlags& flags, std::size_t limit,
                 std::size_t batch, const std::string& out_path, std::ostream& out) {
  std::vector<Phrase> test = open_dataset(data);
  if (limit > 0 && test.size() > limit) test.resize(limit);
  if (test.empty()) throw UsageError("evaluation split " + data + " is empty");
  std::vector<eval::MetricsReport> reports;
  for (const auto& path : checkpoints) {
    const std::string kind = open_checkpoint(path).kind;
    const std::vector<std::string> runs = kind == "ddpm" ? samplers : std::vector<std::string>{"vae"};
    for (const auto& s : runs) {
      const std::string tag = s + "@" + fs::path(path).filename().string();
      LoadedSeparator ls = load_separator(path, decoder, s == "vae" ? "ddim" : s, flags, tag);
      if (ls.dims != test.front().roll.dims()) throw UsageError("checkpoint dims do not match the dataset");
      reports.push_back(eval::evaluate(*ls.separator, test, batch));
    }
  }
  std::string text = eval::comparison_table(reports);
  fmt::print(out, "{}", text);
  for (const auto& r : reports) text += "\n" + r.to_text();
  if (!out_path.empty()) write_text(out_path, text);
  return kExitOk;
}

int cmd_render(const std::string& sample, std::size_t sample_index, const std::string& original,
               std::size_t original_index, int scale, const std::string& out_path, std::ostream& out) {
  const auto a = open_dataset(sample);
  const auto b = open_dataset(original);
  if (sample_index >= a.size()) throw UsageError("--sample-index out of range");
  if (original_index >= b.size()) throw UsageError("--original-index out of range");
  render::RenderSpec spec;
  spec.scale = scale;
  const auto& ra = a[sample_index].roll;
  const auto& rb = b[original_index].roll;
  if (ra.dims() != rb.dims()) throw UsageError("sample and original shapes differ");
  render::write_png(render::render_pair(ra, rb, spec), out_path);
  fmt::print(out, "wrote {}\n", out_path);
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Mixture-to-multitrack instrument separation toolkit", "m2m"};
  app.require_subcommand(1);

  std::string in_dir, out_path, split = "90/5/5";
  std::uint64_t seed = 0;
  auto* ingest = app.add_subcommand("ingest", "Build train/valid/test datasets from a directory of MIDI files");
  ingest->add_option("--in", in_dir, "directory of .mid files")->required();
  ingest->add_option("--out", out_path, "output dataset directory")->required();
  ingest->add_option("--split", split, "train/valid/test percentages")->capture_default_str();
  ingest->add_option("--seed", seed, "split seed")->capture_default_str();

  std::string kind, data, valid, config;
  auto* train_cmd = app.add_subcommand("train", "Train a ddpm, vae or decoder model");
  train_cmd->add_option("--model", kind, "ddpm | vae | decoder")->required();
  train_cmd->add_option("--data", data, "dataset directory (train.m2m, valid.m2m) or a single dataset file")
      ->required();
  train_cmd->add_option("--valid", valid, "validation dataset (defaults to the training data for a single file)");
  train_cmd->add_option("--config", config, "key = value configuration file");
  train_cmd->add_option("--out", out_path, "output directory")->required();

  std::string mixture, checkpoint, decoder, sampler = "ddim", phrases_out;
  SamplerFlags flags;
  auto* separate = app.add_subcommand("separate", "Assign instruments to the notes of a MIDI mixture");
  separate->add_option("--mixture", mixture, "input MIDI file")->required();
  separate->add_option("--checkpoint", checkpoint, "ddpm or vae checkpoint")->required();
  separate->add_option("--decoder-checkpoint", decoder, "final decoder checkpoint (ddpm only)");
  separate->add_option("--sampler", sampler, "ddpm | ddim")->check(CLI::IsMember({"ddpm", "ddim"}))
      ->capture_default_str();
  add_sampler_flags(separate, flags);
  separate->add_option("--out", out_path, "output MIDI file")->required();
  separate->add_option("--phrases-out", phrases_out, "also write the separated phrases as a dataset");

  std::vector<std::string> checkpoints, samplers{"ddim"};
  std::size_t limit = 0, batch = 16;
  auto* evaluate = app.add_subcommand("evaluate", "Consistency and diversity of trained models on a split");
  evaluate->add_option("--data", data, "dataset file, usually test.m2m")->required();
  evaluate->add_option("--checkpoints", checkpoints, "ddpm and/or vae checkpoints")->required();
  evaluate->add_option("--decoder-checkpoint", decoder, "final decoder checkpoint for ddpm models");
  evaluate->add_option("--samplers", samplers, "samplers for ddpm checkpoints")
      ->check(CLI::IsMember({"ddpm", "ddim"}))
      ->delimiter(',');
  add_sampler_flags(evaluate, flags);
  evaluate->add_option("--limit", limit, "evaluate at most this many phrases (0 = all)");
  evaluate->add_option("--batch", batch, "mixtures sampled together")->capture_default_str();
  evaluate->add_option("--out", out_path, "report file");

  std::string sample, original;
  std::size_t sample_index = 0, original_index = 0;
  int scale = 4;
  auto* render_cmd = app.add_subcommand("render", "Draw a generated phrase above its original as a PNG");
  render_cmd->add_option("--sample", sample, "dataset holding the generated phrase")->required();
  render_cmd->add_option("--sample-index", sample_index)->capture_default_str();
  render_cmd->add_option("--original", original, "dataset holding the original phrase")->required();
  render_cmd->add_option("--original-index", original_index)->capture_default_str();
  render_cmd->add_option("--scale", scale, "pixels per cell")->capture_default_str();
  render_cmd->add_option("--out", out_path, "output PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*ingest) return cmd_ingest(in_dir, out_path, split, seed, out);
    if (*train_cmd) return cmd_train(kind, data, valid, config, out_path, out, err);
    if (*separate) return cmd_separate(mixture, checkpoint, decoder, sampler, flags, out_path, phrases_out, out);
    if (*evaluate) {
      return cmd_evaluate(data, checkpoints, decoder, samplers, flags, limit, batch, out_path, out);
    }
    if (*render_cmd) return cmd_render(sample, sample_index, original, original_index, scale, out_path, out);
  } catch (const TrainingFault& e) {
    fmt::print(err, "training fault: {}\nlast checkpoint: {}\n", e.what(),
               e.last_checkpoint().empty() ? "(none)" : e.last_checkpoint());
    return kExitFault;
  } catch (const SamplingFault& e) {
    fmt::print(err, "sampling fault at step {}: {}\n", e.step(), e.what());
    return kExitFault;
  } catch (const UsageError& e) {
    fmt::print(err, "error: {}\n", e.what());
    return kExitUsage;
  } catch (const ConfigError& e) {
    fmt::print(err, "config error: {}\n", e.what());
    return kExitUsage;
  } catch (const ParseError& e) {
    fmt::print(err, "parse error: {}\n", e.what());
    return kExitUsage;
  } catch (const ContractError& e) {
    fmt::print(err, "invalid input: {}\n", e.what());
    return kExitUsage;
  } catch (const StateError& e) {
    fmt::print(err, "invalid state: {}\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    fmt::print(err, "fault: {}\n", e.what());
    return kExitFault;
  }
  return kExitUsage;
}

}  // namespace m2m::cli
