#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "m2m/core/error.hpp"
#include "m2m/train/optim.hpp"
#include "m2m/train/training.hpp"
#include "support.hpp"

using namespace m2m;
using namespace m2m::train;
using model::ModelKind;

namespace {

std::vector<Phrase> tiny_phrases(int n, std::uint64_t seed) {
  std::vector<Phrase> out;
  for (int i = 0; i < n; ++i) {
    out.push_back({test::random_roll(Dims{8, 8, 5}, 0.15, seed + static_cast<std::uint64_t>(i)),
                   "song" + std::to_string(i / 2), static_cast<std::uint32_t>(i % 2)});
  }
  return out;
}

TrainConfig tiny_config(ModelKind kind) {
  TrainConfig c;
  c.kind = kind;
  c.epochs = 3;
  c.batch_size = 4;
  c.lr = 2e-3;
  c.arch = model::DenoiserConfig::tiny();
  c.diffusion.steps = 100;
  c.diffusion.beta_end = 0.05;
  return c;
}

std::vector<std::uint8_t> file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("plateau schedule") {
  PlateauSchedule s(1e-3, 0.9, 1);
  int reductions = 0;
  for (double v : {1.0, 0.9, 0.9, 0.8}) reductions += s.observe(v) ? 1 : 0;
  CHECK(reductions == 1);
  CHECK(s.lr() == doctest::Approx(0.9e-3).epsilon(1e-12));
  CHECK(s.best() == 0.8);

  PlateauSchedule p2(1.0, 0.5, 2);
  std::vector<bool> fired;
  for (double v : {1.0, 1.1, 1.2, 1.3, 1.4}) fired.push_back(p2.observe(v));
  CHECK(fired == std::vector<bool>{false, false, true, false, true});
  CHECK(p2.lr() == 0.25);
  CHECK_THROWS_AS(PlateauSchedule(1.0, 1.5, 1), ConfigError);
}

TEST_CASE("adamw first step matches the closed form") {
  nn::ParameterStore<float> store(3);
  auto w = store.uniform("w", {2, 2}, 1.0);
  auto b = store.constant("b", {2}, 0.5f);
  const std::vector<float> w0(w.data().begin(), w.data().end());
  const std::vector<float> gw{0.3f, -2.0f, 1e-3f, 0.0f};
  const std::vector<float> gb{-0.7f, 4.0f};
  std::copy(gw.begin(), gw.end(), w.grad().begin());
  std::copy(gb.begin(), gb.end(), b.grad().begin());
  const double lr = 0.01, wd = 0.1, eps = 1e-8;
  AdamW opt(store, AdamWOptions{lr, 0.9, 0.999, eps, wd});
  opt.step();
  for (std::size_t k = 0; k < 4; ++k) {
    const double g = gw[k];
    const double want = w0[k] * (1 - lr * wd) - lr * g / (std::abs(g) + eps);
    CHECK(w.data()[k] == doctest::Approx(want).epsilon(1e-5));
  }
  for (std::size_t k = 0; k < 2; ++k) {
    const double want = 0.5 - lr * gb[k] / (std::abs(gb[k]) + eps);
    CHECK(b.data()[k] == doctest::Approx(want).epsilon(1e-5));
  }
  CHECK(opt.steps_taken() == 1);
}

TEST_CASE("gradient clipping rescales to the global norm") {
  nn::ParameterStore<float> store(1);
  auto a = store.constant("a", {2}, 0.0f);
  auto b = store.constant("b", {1}, 0.0f);
  a.grad()[0] = 3.0f;
  a.grad()[1] = 0.0f;
  b.grad()[0] = 4.0f;
  CHECK(clip_grad_norm(store, 1.0) == doctest::Approx(5.0));
  CHECK(a.grad()[0] == doctest::Approx(0.6));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
  CHECK(clip_grad_norm(store, 2.0) == doctest::Approx(1.0));
  CHECK(b.grad()[0] == doctest::Approx(0.8));
}

TEST_CASE("step draws are uniform over the schedule") {
  Rng rng = make_rng(42);
  std::array<int, 10> decile{};
  const int n = 100000;
  for (int i = 0; i < n; ++i) {
    const int t = draw_step(rng, 1000);
    REQUIRE((t >= 1 && t <= 1000));
    ++decile[static_cast<std::size_t>((t - 1) / 100)];
  }
  for (int c : decile) CHECK(std::abs(c / double(n) - 0.1) < 0.01);
}

TEST_CASE("config parsing") {
  const auto c = TrainConfig::parse("epochs = 7\nlr = 0.5\ngroups = 4\nstem_width = 8\nencoder_widths = 8,8,8\n"
                                    "decoder_widths = 8,8,8\ninput_dims = 16,16,5\ntransformer_heads = 2\n",
                                    ModelKind::Vae);
  CHECK(c.epochs == 7);
  CHECK(c.lr == 0.5);
  CHECK(c.arch.input_dims == Dims{16, 16, 5});
  const auto again = TrainConfig::parse(c.to_text(), ModelKind::Vae);
  CHECK(again.to_text() == c.to_text());

  try {
    TrainConfig::parse("epochs = 2\nlearning_rat = 0.1\n", ModelKind::Ddpm);
    FAIL("unknown key accepted");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("learning_rat") != std::string::npos);
  }
  CHECK_THROWS_AS(TrainConfig::parse("model = vae\n", ModelKind::Ddpm), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("model = gan\n", ModelKind::Ddpm), ConfigError);
  CHECK_THROWS_AS(TrainConfig::parse("epochs = 0\n", ModelKind::Ddpm), ConfigError);
  CHECK_THROWS_AS(TrainConfig::read_file("/nonexistent/config.txt", ModelKind::Ddpm), ConfigError);
}

TEST_CASE("untrained denoiser loss sits at the masked noise energy") {
  auto spec = tiny_config(ModelKind::Ddpm).spec();
  auto obj = make_objective(spec, 5);
  const auto valid = tiny_phrases(32, 100);
  double active = 0, cells = 0;
  for (const auto& ph : valid) {
    const auto mix = mixture_from_roll(ph.roll);
    for (auto v : mix.cells()) active += v;
    cells += static_cast<double>(mix.cells().size());
  }
  const double density = active / cells;
  const double a = validate(*obj, valid, 8, 9);
  const double b = validate(*obj, valid, 8, 9);
  CHECK(a == b);
  CHECK(validate(*obj, valid, 5, 9) == doctest::Approx(a).epsilon(1e-6));
  CAPTURE(density);
  CHECK(std::abs(a / density - 1.0) < 0.2);
  CHECK_THROWS_AS(validate(*obj, std::span<const Phrase>{}, 8, 9), ConfigError);
}

TEST_CASE("training is deterministic and checkpoints reproduce validation loss") {
  const auto train_set = tiny_phrases(12, 1);
  const auto valid_set = tiny_phrases(4, 50);
  for (ModelKind kind : {ModelKind::Ddpm, ModelKind::Vae, ModelKind::Decoder}) {
    CAPTURE(std::string(model::model_kind_name(kind)));
    const auto cfg = tiny_config(kind);
    const auto d1 = test::scratch_dir("train_a"), d2 = test::scratch_dir("train_b");
    std::vector<int> seen;
    const auto r1 = train::train(cfg, train_set, valid_set, d1.string(), [&](const EpochRecord& e) { seen.push_back(e.epoch); });
    const auto r2 = train::train(cfg, train_set, valid_set, d2.string());
    CHECK(seen == std::vector<int>{1, 2, 3});
    CHECK(r1.to_csv() == r2.to_csv());
    CHECK(file_bytes(d1 / "last.m2mc") == file_bytes(d2 / "last.m2mc"));
    REQUIRE(std::filesystem::exists(d1 / "best.m2mc"));

    for (std::size_t i = 1; i < r1.epochs.size(); ++i) {
      const double ratio = r1.epochs[i].lr / r1.epochs[i - 1].lr;
      CHECK((ratio == 1.0 || std::abs(ratio - 0.9) < 1e-12));
    }
    double best = 1e300;
    for (const auto& e : r1.epochs) best = std::min(best, e.valid_loss);
    CHECK(r1.best_valid_loss == best);

    auto reloaded = load_objective(nn::read_checkpoint_file((d1 / "last.m2mc").string()), cfg.kl_weight);
    CHECK(validate(*reloaded, valid_set, cfg.batch_size, cfg.valid_seed) == r1.epochs.back().valid_loss);
  }
}

TEST_CASE("training rejects bad inputs") {
  auto cfg = tiny_config(ModelKind::Ddpm);
  const auto data = tiny_phrases(4, 1);
  const auto dir = test::scratch_dir("train_bad").string();
  CHECK_THROWS_AS(train::train(cfg, data, {}, dir), ConfigError);
  CHECK_THROWS_AS(train::train(cfg, {}, data, dir), ConfigError);
  std::vector<Phrase> wrong{{test::random_roll(Dims{16, 8, 5}, 0.2, 1), "x", 0}};
  CHECK_THROWS_AS(train::train(cfg, wrong, data, dir), ContractError);
}

TEST_CASE("diverging optimization raises a training fault") {
  auto cfg = tiny_config(ModelKind::Decoder);
  cfg.epochs = 4;
  const auto data = tiny_phrases(8, 3);
  const auto dir = test::scratch_dir("train_nan").string();
  // An infinite learning rate turns the first update into NaN weights.
  cfg.lr = std::numeric_limits<double>::max();
  cfg.weight_decay = 0.0;
  try {
    train::train(cfg, data, data, dir);
    FAIL("no fault raised");
  } catch (const TrainingFault& e) {
    CHECK(std::string(e.what()).find("non-finite") != std::string::npos);
  }
}

TEST_CASE("small models overfit a handful of phrases") {
  const auto data = tiny_phrases(4, 7);
  for (ModelKind kind : {ModelKind::Decoder, ModelKind::Vae}) {
    CAPTURE(std::string(model::model_kind_name(kind)));
    auto spec = tiny_config(kind).spec();
    auto obj = make_objective(spec, 2, 0.01);
    AdamW opt(obj->parameters(), AdamWOptions{1e-2, 0.9, 0.999, 1e-8, 0.0});
    const double initial = validate(*obj, data, 4, 3);
    Rng rng = make_rng(1);
    for (int it = 0; it < 300; ++it) {
      obj->parameters().zero_grad();
      auto loss = obj->batch_loss(data, rng, 1.0);
      loss.backward();
      clip_grad_norm(obj->parameters(), 1.0);
      opt.step();
    }
    const double final_loss = validate(*obj, data, 4, 3);
    CAPTURE(initial);
    CAPTURE(final_loss);
    CHECK(final_loss < 0.25 * initial);
  }
}
