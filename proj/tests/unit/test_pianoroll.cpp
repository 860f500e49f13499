#include <doctest.h>

#include <cstdlib>

#include "m2m/core/error.hpp"
#include "m2m/data/pianoroll_data.hpp"
#include "support.hpp"

using namespace m2m;
using midi::NoteEvent;

namespace {

// Nearest grid index by exhaustive search, ties toward the later cell.
std::int64_t nearest_cell(std::int64_t start, std::int64_t tpq) {
  std::int64_t best = 0;
  for (std::int64_t k = 1; k * tpq <= 4 * start + tpq; ++k) {
    const auto d_best = std::llabs(best * tpq - 4 * start);
    const auto d_k = std::llabs(k * tpq - 4 * start);
    if (d_k <= d_best) best = k;
  }
  return best;
}

// Scans every grid cell against every note in exact integer arithmetic.
Pianoroll rasterize(const std::vector<NoteEvent>& notes, int tpq) {
  std::int64_t max_cell = -1;
  struct Hit {
    std::int64_t k;
    int p, c;
  };
  std::vector<Hit> hits;
  for (const auto& n : notes) {
    auto inst = classify_instrument(n.program, n.channel);
    if (!inst || n.pitch < 24 || n.pitch > 95) continue;
    const std::int64_t first = nearest_cell(n.start_tick, tpq);
    const std::int64_t end = n.start_tick + n.duration_ticks;
    for (std::int64_t k = 0; k * tpq < 4 * end + 4 * tpq; ++k) {
      const bool overlaps = k * tpq < 4 * end && (k + 1) * tpq > 4 * n.start_tick;
      if (k == first || (k > first && overlaps)) {
        hits.push_back({k, n.pitch - 24, static_cast<int>(*inst)});
        max_cell = std::max(max_cell, k);
      }
    }
  }
  std::int64_t total = 0;
  while (total < max_cell + 1) total += 16;
  Pianoroll r(Dims{static_cast<int>(total), 72, 5});
  for (const auto& h : hits) r.set(static_cast<int>(h.k), h.p, h.c);
  return r;
}

}  // namespace

TEST_CASE("instrument classes follow the General MIDI families") {
  CHECK(classify_instrument(0, 0) == Instrument::Piano);
  CHECK(classify_instrument(80, 3) == std::nullopt);
  CHECK(classify_instrument(0, 9) == Instrument::Drum);
  for (int ch = 0; ch < 16; ++ch) {
    for (int prog = 0; prog < 128; ++prog) {
      std::optional<Instrument> want;
      if (ch == 9) want = Instrument::Drum;
      else if (prog <= 7) want = Instrument::Piano;
      else if (prog >= 24 && prog <= 31) want = Instrument::Guitar;
      else if (prog >= 32 && prog <= 39) want = Instrument::Bass;
      else if (prog >= 40 && prog <= 51) want = Instrument::String;
      CHECK(classify_instrument(prog, ch) == want);
    }
  }
}

TEST_CASE("eligibility needs 4/4 and two instrument classes") {
  std::vector<NoteEvent> piano_bass = {{0, 96, 60, 0, 0}, {0, 96, 40, 1, 33}};
  std::vector<midi::TimeSignature> four{{0, 4, 4}};
  std::vector<midi::TimeSignature> three{{0, 3, 4}};
  CHECK(is_eligible(piano_bass, four));
  CHECK(is_eligible(piano_bass, {}));
  std::vector<NoteEvent> band = {{0, 1, 60, 0, 0}, {0, 1, 60, 1, 25}, {0, 1, 40, 2, 33}, {0, 1, 70, 3, 48},
                                 {0, 1, 38, 9, 0}};
  CHECK_FALSE(is_eligible(band, three));
  CHECK_FALSE(is_eligible(band, {{0, 4, 4}, {960, 3, 4}}));
  CHECK_FALSE(is_eligible({{0, 96, 64, 0, 25}, {96, 96, 65, 0, 26}}, four));
  CHECK_FALSE(is_eligible({{0, 96, 64, 0, 25}, {96, 96, 65, 0, 80}}, four));
}

TEST_CASE("one quarter note fills four sixteenth cells") {
  auto q = quantize_to_roll({{0, 480, 60, 0, 0}}, 480);
  CHECK(q.roll.dims() == Dims{16, 72, 5});
  for (int t = 0; t < 16; ++t) CHECK(q.roll.at(t, 36, 0) == (t < 4 ? 1 : 0));
  CHECK(q.roll.active_count() == 4);
}

TEST_CASE("out-of-range and unclassified notes are counted, not placed") {
  auto q = quantize_to_roll({{0, 480, 20, 0, 0}, {0, 480, 96, 0, 0}, {0, 480, 60, 0, 90}, {0, 480, 95, 0, 1}}, 480);
  CHECK(q.dropped_out_of_range == 2);
  CHECK(q.dropped_unclassified == 1);
  CHECK(q.roll.active_count() == 4);
  CHECK(q.roll.at(0, 71, 0) == 1);
}

TEST_CASE("quantization equals the brute-force rasterizer") {
  for (std::uint64_t song = 0; song < 100; ++song) {
    Rng rng = make_rng(song, 3);
    const int tpqs[] = {96, 90, 480, 100, 7};
    const int tpq = tpqs[song % 5];
    std::vector<NoteEvent> notes;
    const int count = 1 + static_cast<int>(rng() % 50);
    for (int i = 0; i < count; ++i) {
      NoteEvent e;
      e.start_tick = static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(tpq * 32));
      e.duration_ticks = 1 + static_cast<std::int64_t>(rng() % static_cast<std::uint64_t>(tpq * 3));
      e.pitch = static_cast<int>(rng() % 128);
      e.channel = static_cast<int>(rng() % 16);
      e.program = static_cast<int>(rng() % 56);
      notes.push_back(e);
    }
    CAPTURE(song);
    auto q = quantize_to_roll(notes, tpq);
    auto want = rasterize(notes, tpq);
    CHECK(q.roll.dims().t % 16 == 0);
    CHECK(q.roll == want);
  }
}

TEST_CASE("windowing at a stride of one bar") {
  auto filled = [](int steps) {
    Pianoroll r(Dims{steps, 72, 5});
    for (int t = 0; t < steps; ++t) r.set(t, 10, 0);
    return r;
  };
  CHECK(window_phrases(filled(64), "a").size() == 1);
  auto four = window_phrases(filled(112), "b");
  REQUIRE(four.size() == 4);
  for (std::uint32_t i = 0; i < 4; ++i) {
    CHECK(four[i].bar_offset == i);
    CHECK(four[i].source_id == "b");
    CHECK(four[i].roll.dims() == Dims{});
  }
  CHECK(window_phrases(filled(63), "c").empty());

  // Silent middle section: windows with an empty mixture disappear.
  Pianoroll gap(Dims{192, 72, 5});
  for (int t = 0; t < 16; ++t) gap.set(t, 3, 1);
  for (int t = 176; t < 192; ++t) gap.set(t, 3, 2);
  const auto kept = window_phrases(gap, "g");
  const std::size_t slots = (192 - 64) / 16 + 1;
  CHECK(kept.size() == 2);
  CHECK(slots == 9);
  CHECK(kept[0].bar_offset == 0);
  CHECK(kept[1].bar_offset == 8);
  CHECK(kept[0].roll == gap.slice_steps(0, 64));
}

TEST_CASE("mixture is the clipped channel sum") {
  Pianoroll zero(Dims{});
  CHECK(mixture_from_roll(zero).active_count() == 0);

  Pianoroll two(Dims{});
  two.set(0, 0, 0);
  two.set(0, 0, 1);
  CHECK(mixture_from_roll(two).at(0, 0) == 1);
  CHECK(mixture_from_roll(two).active_count() == 1);

  for (std::uint64_t s = 0; s < 20; ++s) {
    auto r = test::random_roll(Dims{4, 4, 3}, 0.3, s);
    auto x = mixture_from_roll(r);
    for (int t = 0; t < 4; ++t) {
      for (int p = 0; p < 4; ++p) {
        bool any = false;
        for (int c = 0; c < 3; ++c) any = any || r.at(t, p, c);
        CHECK(x.at(t, p) == (any ? 1 : 0));
      }
    }
  }
}

TEST_CASE("adding a note never clears a mixture cell") {
  for (std::uint64_t s = 0; s < 30; ++s) {
    auto r = test::random_roll(Dims{8, 8, 5}, 0.1, s);
    const auto before = mixture_from_roll(r);
    Rng rng = make_rng(s, 1);
    r.set(static_cast<int>(rng() % 8), static_cast<int>(rng() % 8), static_cast<int>(rng() % 5));
    const auto after = mixture_from_roll(r);
    for (std::size_t i = 0; i < before.cells().size(); ++i) CHECK(after.cells()[i] >= before.cells()[i]);
  }
}
