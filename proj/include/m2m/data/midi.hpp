#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace m2m::midi {

struct NoteEvent {
  std::int64_t start_tick = 0;
  std::int64_t duration_ticks = 1;
  int pitch = 0;
  int channel = 0;
  int program = 0;

  friend bool operator==(const NoteEvent&, const NoteEvent&) = default;
};

struct TimeSignature {
  std::int64_t tick = 0;
  int numerator = 4;
  int denominator = 4;

  friend bool operator==(const TimeSignature&, const TimeSignature&) = default;
};

struct Song {
  std::vector<NoteEvent> events;  // sorted by (start, channel, pitch, duration)
  int ticks_per_quarter = 480;
  std::vector<TimeSignature> time_signatures;
  int unresolved_notes = 0;  // note-ons never closed, or zero length
};

/// Decodes a Standard MIDI File (format 0 or 1). Tempo and velocity are ignored.
/// Throws ParseError naming the byte offset on malformed input.
Song parse_midi(std::span<const std::uint8_t> bytes);

Song read_midi_file(const std::string& path);

/// One output track: notes on a fixed channel with a fixed program.
struct TrackSpec {
  std::string name;
  int channel = 0;
  int program = 0;
  std::vector<NoteEvent> notes;  // channel/program fields are ignored
};

/// Serializes a format-1 file: a conductor track (tempo, 4/4) followed by one
/// track per spec. Output bytes are a pure function of the arguments.
std::vector<std::uint8_t> write_midi(const std::vector<TrackSpec>& tracks, int ticks_per_quarter,
                                     double bpm = 120.0);

}  // namespace m2m::midi
