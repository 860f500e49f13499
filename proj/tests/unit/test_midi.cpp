#include <doctest.h>

#include <fstream>
#include <sstream>

#include "m2m/core/error.hpp"
#include "m2m/data/midi.hpp"
#include "support.hpp"

using namespace m2m;
using midi::NoteEvent;

namespace {

struct Dump {
  int tpq = 0;
  int unresolved = 0;
  std::vector<midi::TimeSignature> sigs;
  std::vector<NoteEvent> notes;
};

Dump read_dump(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in);
  Dump d;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream is(line);
    std::string tag;
    is >> tag;
    if (tag == "tpq") {
      is >> d.tpq;
    } else if (tag == "unresolved") {
      is >> d.unresolved;
    } else if (tag == "timesig") {
      midi::TimeSignature s;
      is >> s.tick >> s.numerator >> s.denominator;
      d.sigs.push_back(s);
    } else if (tag == "note") {
      NoteEvent e;
      is >> e.start_tick >> e.duration_ticks >> e.pitch >> e.channel >> e.program;
      d.notes.push_back(e);
    }
  }
  return d;
}

std::vector<std::uint8_t> bytes_of(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("single quarter note C4") {
  auto song = midi::read_midi_file(test::fixture("single_note.mid"));
  REQUIRE(song.events.size() == 1);
  CHECK(song.events[0] == NoteEvent{0, song.ticks_per_quarter, 60, 0, 0});
}

TEST_CASE("file without notes parses to an empty list") {
  auto song = midi::read_midi_file(test::fixture("empty.mid"));
  CHECK(song.events.empty());
  CHECK(song.unresolved_notes == 0);
}

TEST_CASE("parser agrees with the independent dump on every fixture") {
  for (const char* name : {"single_note.mid", "empty.mid", "piano_bass.mid", "band_odd_tpq.mid", "overlap.mid"}) {
    CAPTURE(name);
    const Dump want = read_dump(test::fixture(std::string(name) + ".dump"));
    const auto song = midi::read_midi_file(test::fixture(name));
    CHECK(song.ticks_per_quarter == want.tpq);
    CHECK(song.unresolved_notes == want.unresolved);
    CHECK(song.time_signatures == want.sigs);
    CHECK(song.events == want.notes);
    for (std::size_t i = 1; i < song.events.size(); ++i) CHECK(song.events[i - 1].start_tick <= song.events[i].start_tick);
  }
}

TEST_CASE("malformed input names the byte offset") {
  auto good = bytes_of(test::fixture("piano_bass.mid"));

  SUBCASE("bad header magic") {
    auto b = good;
    b[0] = 'X';
    CHECK_THROWS_AS(midi::parse_midi(b), ParseError);
  }
  SUBCASE("truncated inside a track") {
    std::vector<std::uint8_t> b(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(good.size() - 7));
    try {
      midi::parse_midi(b);
      FAIL("expected a parse error");
    } catch (const ParseError& e) {
      CHECK(e.offset() > 14);
      CHECK(e.offset() <= b.size());
    }
  }
  SUBCASE("format 2 is rejected") {
    auto b = good;
    b[9] = 2;
    CHECK_THROWS_AS(midi::parse_midi(b), ParseError);
  }
  SUBCASE("empty buffer") { CHECK_THROWS_AS(midi::parse_midi(std::vector<std::uint8_t>{}), ParseError); }
}

TEST_CASE("note-on without a note-off is dropped and counted") {
  // Format 0, one track: note-on 60 then end of track.
  std::vector<std::uint8_t> b = {'M', 'T', 'h', 'd', 0, 0, 0, 6, 0, 0, 0, 1, 0, 96, 'M', 'T', 'r', 'k', 0, 0, 0, 12,
                                 0,   0x90, 60, 100, 0x60, 0x80, 62, 0, 0x00, 0xFF, 0x2F, 0x00};
  auto song = midi::parse_midi(b);
  CHECK(song.events.empty());
  CHECK(song.unresolved_notes == 1);
}

TEST_CASE("running status is honoured") {
  // note-on 60, then running-status note-on 60 velocity 0 acting as note-off.
  std::vector<std::uint8_t> b = {'M', 'T', 'h', 'd', 0, 0, 0, 6, 0, 0, 0, 1, 0, 96, 'M', 'T', 'r', 'k', 0, 0, 0, 11,
                                 0,   0x90, 60, 100, 0x60, 60, 0, 0x00, 0xFF, 0x2F, 0x00};
  auto song = midi::parse_midi(b);
  REQUIRE(song.events.size() == 1);
  CHECK(song.events[0] == NoteEvent{0, 96, 60, 0, 0});
}

TEST_CASE("written files read back to the same notes") {
  midi::TrackSpec piano{"piano", 0, 0, {{0, 120, 60, 0, 0}, {120, 240, 64, 0, 0}, {120, 120, 60, 0, 0}}};
  midi::TrackSpec drums{"drum", 9, 0, {{0, 120, 38, 9, 0}, {480, 120, 42, 9, 0}}};
  const auto bytes = midi::write_midi({piano, drums}, 480);
  const auto song = midi::parse_midi(bytes);
  CHECK(song.ticks_per_quarter == 480);
  REQUIRE(song.time_signatures.size() == 1);
  CHECK(song.time_signatures[0].numerator == 4);
  std::vector<NoteEvent> want = {{0, 120, 60, 0, 0}, {0, 120, 38, 9, 0}, {120, 120, 60, 0, 0},
                                 {120, 240, 64, 0, 0}, {480, 120, 42, 9, 0}};
  CHECK(song.events == want);
  CHECK(midi::write_midi({piano, drums}, 480) == bytes);
}
