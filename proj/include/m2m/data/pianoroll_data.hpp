#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "m2m/core/grid.hpp"
#include "m2m/data/midi.hpp"

namespace m2m {

/// A 64-step window of one song.
struct Phrase {
  Pianoroll roll;
  std::string source_id;
  std::uint32_t bar_offset = 0;

  friend bool operator==(const Phrase&, const Phrase&) = default;
};

/// Channel 9 (zero-based) is drums; otherwise General MIDI program families:
/// 0-7 piano, 24-31 guitar, 32-39 bass, 40-51 string. Anything else has no class.
std::optional<Instrument> classify_instrument(int program, int channel);

/// Every time signature is 4/4 and at least two instrument classes sound.
bool is_eligible(const std::vector<midi::NoteEvent>& events,
                 const std::vector<midi::TimeSignature>& time_signatures);

struct QuantizedSong {
  Pianoroll roll;                 // dims (T_total, 72, 5), T_total a multiple of 16
  int dropped_out_of_range = 0;   // pitch outside 24..95
  int dropped_unclassified = 0;   // program/channel with no instrument class
};

/// Sixteenth-note grid, onset-and-hold. Cell k spans ticks [k*tpq/4, (k+1)*tpq/4).
/// A note occupies cells from round(start) through the last cell it overlaps.
/// With `collapse_instruments` every note lands in channel 0 regardless of class.
QuantizedSong quantize_to_roll(const std::vector<midi::NoteEvent>& events, int ticks_per_quarter,
                               bool collapse_instruments = false);

/// 64-step windows every 16 steps; drops windows with an empty mixture and any
/// trailing partial window.
std::vector<Phrase> window_phrases(const Pianoroll& full, const std::string& source_id);

}  // namespace m2m
