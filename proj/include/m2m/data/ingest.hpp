#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m2m/data/dataset.hpp"
#include "m2m/data/midi.hpp"

namespace m2m {

struct IngestReport {
  int files_seen = 0;
  int parse_failures = 0;
  int eligible = 0;
  std::array<std::uint64_t, 3> phrases{};  // train, valid, test
  long long dropped_out_of_range = 0;
  long long dropped_unclassified = 0;
  long long unresolved_notes = 0;

  std::string to_text() const;
};

struct IngestResult {
  IngestReport report;
  std::array<std::vector<Phrase>, 3> splits;
  std::vector<DatasetManifest> manifests;
};

/// Every *.mid / *.midi file directly under `dir`, in lexicographic order,
/// becomes a source named by its file name.
IngestResult ingest_directory(const std::string& dir, std::array<int, 3> percentages, std::uint64_t seed);

/// Writes train.m2m, valid.m2m, test.m2m, manifest.txt and ingest_report.txt.
void write_ingest(const IngestResult& result, const std::string& out_dir);

/// Zero-padded, non-overlapping 64-step tiles of a song with every note put in
/// a single channel. Tiles with no notes are kept so that positions line up.
struct MixtureTiles {
  std::vector<Mixture> tiles;
  long long dropped_out_of_range = 0;
};
MixtureTiles mixture_tiles(const std::vector<midi::NoteEvent>& events, int ticks_per_quarter);

/// Export grid: 480 ticks per quarter at 120 BPM, one sixteenth = 120 ticks.
inline constexpr int kExportTicksPerQuarter = 480;
inline constexpr int kExportTicksPerCell = kExportTicksPerQuarter / 4;

/// One track per instrument (piano 0, guitar 25, bass 33, string 48 as GM
/// programs; drums on channel 9). Consecutive active cells of a pitch merge
/// into one note. Tiles are laid end to end.
std::vector<midi::TrackSpec> rolls_to_tracks(std::span<const Pianoroll> tiles);
std::vector<std::uint8_t> export_midi(std::span<const Pianoroll> tiles);

}  // namespace m2m
