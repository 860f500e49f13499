#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "m2m/cli/cli.hpp"
#include "m2m/data/dataset.hpp"
#include "m2m/data/ingest.hpp"
#include "m2m/data/midi.hpp"
#include "support.hpp"

using namespace m2m;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code = -1;
  std::string out;
  std::string err;
};

Outcome run_tool(std::vector<std::string> args) {
  args.insert(args.begin(), "m2m");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Outcome o;
  o.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  o.out = out.str();
  o.err = err.str();
  return o;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Full phrase grid, very narrow network: enough to exercise every command quickly.
const char* kSmallModel =
    "epochs = 1\nbatch_size = 4\nmax_batches_per_epoch = 2\nlr = 0.001\n"
    "stem_width = 8\nencoder_widths = 8,8,8\ndecoder_widths = 8,8,8\ngroups = 4\n"
    "transformer_layers = 1\ntransformer_heads = 2\nmlp_ratio = 2\ntime_mlp_width = 8\n"
    "diffusion_steps = 100\nbeta_end = 0.05\n";

/// Built once: ingested corpus plus small ddpm, decoder and vae checkpoints.
struct Workspace {
  fs::path root;
  fs::path data;
  fs::path ddpm, decoder, vae;

  Workspace() {
    root = test::scratch_dir("cli");
    data = root / "data";
    REQUIRE(run_tool({"ingest", "--in", test::fixture("corpus"), "--out", data.string()}).code == 0);
    spit(root / "small.cfg", kSmallModel);
    for (const char* kind : {"ddpm", "decoder", "vae"}) {
      const auto o = run_tool({"train", "--model", kind, "--data", data.string(), "--config",
                               (root / "small.cfg").string(), "--out", (root / kind).string()});
      CAPTURE(o.err);
      REQUIRE(o.code == 0);
    }
    ddpm = root / "ddpm" / "best.m2mc";
    decoder = root / "decoder" / "best.m2mc";
    vae = root / "vae" / "best.m2mc";
  }
};

Workspace& workspace() {
  static Workspace w;
  return w;
}

}  // namespace

TEST_CASE("cli usage errors") {
  CHECK(run_tool({}).code == cli::kExitUsage);
  CHECK(run_tool({"--help"}).code == cli::kExitOk);
  CHECK(run_tool({"frobnicate"}).code == cli::kExitUsage);
  CHECK(run_tool({"ingest", "--in", "x"}).code == cli::kExitUsage);
}

TEST_CASE("cli ingest") {
  const auto dir = test::scratch_dir("cli_ingest");
  const auto a = run_tool({"ingest", "--in", test::fixture("corpus"), "--out", (dir / "a").string(), "--seed", "3"});
  REQUIRE(a.code == 0);
  CHECK(a.out.find("files_seen 5\n") != std::string::npos);
  CHECK(a.out.find("eligible 3\n") != std::string::npos);
  std::size_t total = 0;
  for (const char* s : {"train", "valid", "test"}) {
    const auto phrases = load_dataset((dir / "a" / (std::string(s) + ".m2m")).string());
    CHECK(!phrases.empty());
    total += phrases.size();
  }
  CHECK(total == 12);
  CHECK(fs::exists(dir / "a" / "manifest.txt"));
  CHECK(slurp(dir / "a" / "ingest_report.txt") == a.out);

  REQUIRE(run_tool({"ingest", "--in", test::fixture("corpus"), "--out", (dir / "b").string(), "--seed", "3"}).code == 0);
  for (const char* f : {"train.m2m", "valid.m2m", "test.m2m", "manifest.txt", "ingest_report.txt"}) {
    CHECK(slurp(dir / "a" / f) == slurp(dir / "b" / f));
  }

  fs::create_directories(dir / "empty");
  CHECK(run_tool({"ingest", "--in", (dir / "empty").string(), "--out", (dir / "c").string()}).code ==
        cli::kExitUsage);
  CHECK(run_tool({"ingest", "--in", (dir / "missing").string(), "--out", (dir / "c").string()}).code ==
        cli::kExitUsage);
  CHECK(run_tool({"ingest", "--in", test::fixture("corpus"), "--out", (dir / "c").string(), "--split", "90-5-5"})
            .code == cli::kExitUsage);
}

TEST_CASE("cli train") {
  auto& w = workspace();
  CHECK(fs::exists(w.root / "ddpm" / "last.m2mc"));
  const auto report = slurp(w.root / "ddpm" / "report.csv");
  CHECK(report.rfind("epoch,train_loss,valid_loss,lr\n1,", 0) == 0);
  CHECK(slurp(w.root / "ddpm" / "train_config.txt").find("stem_width = 8") != std::string::npos);

  spit(w.root / "typo.cfg", std::string(kSmallModel) + "batchsize = 3\n");
  const auto typo = run_tool({"train", "--model", "ddpm", "--data", w.data.string(), "--config",
                              (w.root / "typo.cfg").string(), "--out", (w.root / "typo").string()});
  CHECK(typo.code == cli::kExitUsage);
  CHECK(typo.err.find("batchsize") != std::string::npos);
  CHECK(run_tool({"train", "--model", "gan", "--data", w.data.string(), "--out", (w.root / "x").string()}).code ==
        cli::kExitUsage);
  CHECK(run_tool({"train", "--model", "ddpm", "--data", (w.root / "nowhere").string(), "--out",
                  (w.root / "x").string()})
            .code == cli::kExitUsage);
}

TEST_CASE("cli separate") {
  auto& w = workspace();
  const auto out1 = w.root / "sep1.mid", out2 = w.root / "sep2.mid";
  const std::vector<std::string> base{"separate", "--mixture", test::fixture("piano_bass.mid"), "--checkpoint",
                                      w.ddpm.string(), "--decoder-checkpoint", w.decoder.string(), "--ddim-steps", "5",
                                      "--seed", "4"};
  auto with_out = [&](const fs::path& p, std::vector<std::string> extra = {}) {
    auto a = base;
    a.insert(a.end(), {"--out", p.string()});
    a.insert(a.end(), extra.begin(), extra.end());
    return run_tool(a);
  };
  const auto r1 = with_out(out1, {"--phrases-out", (w.root / "sep.m2m").string()});
  CAPTURE(r1.err);
  REQUIRE(r1.code == 0);
  REQUIRE(with_out(out2).code == 0);
  CHECK(slurp(out1) == slurp(out2));

  // Every separated note lies on a cell the mixture already plays.
  const auto input = midi::read_midi_file(test::fixture("piano_bass.mid"));
  const auto in_tiles = mixture_tiles(input.events, input.ticks_per_quarter).tiles;
  const auto output = midi::read_midi_file(out1.string());
  const auto out_tiles = mixture_tiles(output.events, output.ticks_per_quarter).tiles;
  REQUIRE(out_tiles.size() <= in_tiles.size());
  for (std::size_t i = 0; i < out_tiles.size(); ++i) {
    for (int t = 0; t < kSteps; ++t) {
      for (int p = 0; p < kPitches; ++p) {
        if (out_tiles[i].at(t, p)) CHECK(in_tiles[i].at(t, p));
      }
    }
  }
  const auto phrases = load_dataset((w.root / "sep.m2m").string());
  CHECK(phrases.size() == in_tiles.size());

  const auto vae = run_tool({"separate", "--mixture", test::fixture("piano_bass.mid"), "--checkpoint", w.vae.string(),
                             "--out", (w.root / "sep_vae.mid").string()});
  CHECK(vae.code == 0);

  CHECK(run_tool({"separate", "--mixture", test::fixture("piano_bass.mid"), "--checkpoint",
                  (w.root / "none.m2mc").string(), "--out", (w.root / "x.mid").string()})
            .code == cli::kExitUsage);
  CHECK(run_tool({"separate", "--mixture", test::fixture("piano_bass.mid"), "--checkpoint", w.ddpm.string(), "--out",
                  (w.root / "x.mid").string()})
            .code == cli::kExitUsage);
  CHECK(run_tool({"separate", "--mixture", test::fixture("piano_bass.mid"), "--checkpoint", w.decoder.string(),
                  "--out", (w.root / "x.mid").string()})
            .code == cli::kExitUsage);
  CHECK(run_tool({"separate", "--mixture", test::fixture("empty.mid"), "--checkpoint", w.vae.string(), "--out",
                  (w.root / "x.mid").string()})
            .code == cli::kExitUsage);
  auto bad_eta = base;
  bad_eta.insert(bad_eta.end(), {"--eta", "1.5", "--out", (w.root / "x.mid").string()});
  CHECK(run_tool(bad_eta).code == cli::kExitUsage);
}

TEST_CASE("cli evaluate and render") {
  auto& w = workspace();
  const auto report = w.root / "eval.txt";
  const auto r = run_tool({"evaluate", "--data", (w.data / "test.m2m").string(), "--checkpoints", w.ddpm.string(),
                           w.vae.string(), "--decoder-checkpoint", w.decoder.string(), "--samplers", "ddim",
                           "--ddim-steps", "4", "--limit", "2", "--out", report.string()});
  CAPTURE(r.err);
  REQUIRE(r.code == 0);
  CHECK(r.out.find("ddim@best.m2mc") != std::string::npos);
  CHECK(r.out.find("vae@best.m2mc") != std::string::npos);
  CHECK(slurp(report).find("model ddim@best.m2mc\nconsistency ") != std::string::npos);

  const auto png = w.root / "pair.png";
  const auto rr = run_tool({"render", "--sample", (w.data / "test.m2m").string(), "--original",
                            (w.data / "test.m2m").string(), "--scale", "2", "--out", png.string()});
  REQUIRE(rr.code == 0);
  CHECK(slurp(png).substr(1, 3) == "PNG");
  CHECK(run_tool({"render", "--sample", (w.data / "test.m2m").string(), "--sample-index", "999", "--original",
                  (w.data / "test.m2m").string(), "--out", png.string()})
            .code == cli::kExitUsage);
}
