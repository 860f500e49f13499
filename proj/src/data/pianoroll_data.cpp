#include "m2m/data/pianoroll_data.hpp"

#include <algorithm>
#include <array>

#include "m2m/core/error.hpp"

namespace m2m {

std::optional<Instrument> classify_instrument(int program, int channel) {
  if (channel == 9) return Instrument::Drum;
  if (program >= 0 && program <= 7) return Instrument::Piano;
  if (program >= 24 && program <= 31) return Instrument::Guitar;
  if (program >= 32 && program <= 39) return Instrument::Bass;
  if (program >= 40 && program <= 51) return Instrument::String;
  return std::nullopt;
}

bool is_eligible(const std::vector<midi::NoteEvent>& events,
                 const std::vector<midi::TimeSignature>& time_signatures) {
  for (const auto& ts : time_signatures) {
    if (ts.numerator != 4 || ts.denominator != 4) return false;
  }
  std::array<bool, kInstruments> seen{};
  for (const auto& e : events) {
    if (auto inst = classify_instrument(e.program, e.channel)) seen[static_cast<int>(*inst)] = true;
  }
  return std::count(seen.begin(), seen.end(), true) >= 2;
}

namespace {

struct CellSpan {
  std::int64_t first;
  std::int64_t last;
};

CellSpan cell_span(const midi::NoteEvent& e, std::int64_t tpq) {
  // Nearest grid index to start * 4 / tpq, halves rounded up.
  const std::int64_t first = (8 * e.start_tick + tpq) / (2 * tpq);
  const std::int64_t end = e.start_tick + e.duration_ticks;
  const std::int64_t last = (4 * end + tpq - 1) / tpq - 1;
  return {first, std::max(first, last)};
}

}  // namespace

QuantizedSong quantize_to_roll(const std::vector<midi::NoteEvent>& events, int ticks_per_quarter,
                               bool collapse_instruments) {
  if (ticks_per_quarter <= 0) throw ContractError("ticks_per_quarter must be positive");
  QuantizedSong out;
  struct Placed {
    CellSpan span;
    int pitch;
    int channel;
  };
  std::vector<Placed> placed;
  std::int64_t max_last = -1;
  for (const auto& e : events) {
    int channel = 0;
    if (!collapse_instruments) {
      auto inst = classify_instrument(e.program, e.channel);
      if (!inst) {
        ++out.dropped_unclassified;
        continue;
      }
      channel = static_cast<int>(*inst);
    }
    if (e.pitch < kLowestPitch || e.pitch > kHighestPitch) {
      ++out.dropped_out_of_range;
      continue;
    }
    CellSpan span = cell_span(e, ticks_per_quarter);
    max_last = std::max(max_last, span.last);
    placed.push_back({span, e.pitch - kLowestPitch, channel});
  }
  const std::int64_t total = (max_last + 1 + kStepsPerBar - 1) / kStepsPerBar * kStepsPerBar;
  out.roll = Pianoroll(Dims{static_cast<int>(total), kPitches, kInstruments});
  for (const auto& n : placed) {
    for (std::int64_t k = n.span.first; k <= n.span.last; ++k) out.roll.set(static_cast<int>(k), n.pitch, n.channel);
  }
  return out;
}

std::vector<Phrase> window_phrases(const Pianoroll& full, const std::string& source_id) {
  std::vector<Phrase> phrases;
  const int total = full.dims().t;
  for (int offset = 0; offset + kSteps <= total; offset += kStepsPerBar) {
    Pianoroll window = full.slice_steps(offset, kSteps);
    if (window.active_count() == 0) continue;
    phrases.push_back({std::move(window), source_id, static_cast<std::uint32_t>(offset / kStepsPerBar)});
  }
  return phrases;
}

}  // namespace m2m
