#include "m2m/data/ingest.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <filesystem>
#include <fstream>

#include "m2m/core/error.hpp"

namespace m2m {

namespace fs = std::filesystem;

std::string IngestReport::to_text() const {
  return fmt::format(
      "files_seen {}\nparse_failures {}\neligible {}\nphrases_train {}\nphrases_valid {}\nphrases_test {}\n"
      "dropped_out_of_range {}\ndropped_unclassified {}\nunresolved_notes {}\n",
      files_seen, parse_failures, eligible, phrases[0], phrases[1], phrases[2], dropped_out_of_range,
      dropped_unclassified, unresolved_notes);
}

IngestResult ingest_directory(const std::string& dir, std::array<int, 3> percentages, std::uint64_t seed) {
  if (!fs::is_directory(dir)) throw ConfigError("input directory " + dir + " does not exist");
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    std::string ext = entry.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (ext == ".mid" || ext == ".midi") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  IngestResult result;
  IngestReport& rep = result.report;
  std::vector<std::pair<std::string, std::vector<Phrase>>> per_source;
  for (const auto& path : files) {
    ++rep.files_seen;
    midi::Song song;
    try {
      song = midi::read_midi_file(path.string());
    } catch (const ParseError&) {
      ++rep.parse_failures;
      continue;
    }
    rep.unresolved_notes += song.unresolved_notes;
    if (!is_eligible(song.events, song.time_signatures)) continue;
    ++rep.eligible;
    QuantizedSong q = quantize_to_roll(song.events, song.ticks_per_quarter);
    rep.dropped_out_of_range += q.dropped_out_of_range;
    rep.dropped_unclassified += q.dropped_unclassified;
    const std::string id = path.filename().string();
    per_source.emplace_back(id, window_phrases(q.roll, id));
  }

  std::vector<std::string> ids;
  for (const auto& s : per_source) ids.push_back(s.first);
  const auto assignment = assign_splits(ids, percentages, seed);
  for (auto& [id, phrases] : per_source) {
    auto& dst = result.splits[static_cast<std::size_t>(assignment.at(id))];
    for (auto& ph : phrases) dst.push_back(std::move(ph));
  }
  for (std::size_t s = 0; s < 3; ++s) {
    rep.phrases[s] = result.splits[s].size();
    result.manifests.push_back(build_manifest(result.splits[s], static_cast<Split>(s)));
  }
  return result;
}

void write_ingest(const IngestResult& result, const std::string& out_dir) {
  fs::create_directories(out_dir);
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string name = std::string(split_name(static_cast<Split>(s))) + ".m2m";
    save_dataset(result.splits[s], (fs::path(out_dir) / name).string());
  }
  auto write_text = [&](const std::string& name, const std::string& text) {
    std::ofstream out(fs::path(out_dir) / name, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + name);
    out << text;
  };
  write_text("manifest.txt", format_manifests(result.manifests));
  write_text("ingest_report.txt", result.report.to_text());
}

MixtureTiles mixture_tiles(const std::vector<midi::NoteEvent>& events, int ticks_per_quarter) {
  QuantizedSong q = quantize_to_roll(events, ticks_per_quarter, true);
  MixtureTiles out;
  out.dropped_out_of_range = q.dropped_out_of_range;
  const Mixture full = mixture_from_roll(q.roll);
  const int total = full.steps();
  for (int begin = 0; begin < total; begin += kSteps) {
    Mixture tile(kSteps, kPitches);
    for (int t = 0; t < kSteps && begin + t < total; ++t) {
      for (int p = 0; p < kPitches; ++p) tile.set(t, p, full.at(begin + t, p) != 0);
    }
    out.tiles.push_back(std::move(tile));
  }
  return out;
}

std::vector<midi::TrackSpec> rolls_to_tracks(std::span<const Pianoroll> tiles) {
  static constexpr int kPrograms[kInstruments] = {0, 25, 33, 48, 0};
  static constexpr int kChannels[kInstruments] = {0, 1, 2, 3, 9};
  std::vector<midi::TrackSpec> tracks;
  for (int c = 0; c < kInstruments; ++c) {
    tracks.push_back({instrument_name(static_cast<Instrument>(c)), kChannels[c], kPrograms[c], {}});
  }
  long long offset = 0;
  for (const Pianoroll& roll : tiles) {
    const Dims d = roll.dims();
    if (d.p != kPitches || d.c != kInstruments) throw ContractError("export: unexpected roll dims " + to_string(d));
    for (int c = 0; c < d.c; ++c) {
      for (int p = 0; p < d.p; ++p) {
        int t = 0;
        while (t < d.t) {
          if (!roll.at(t, p, c)) {
            ++t;
            continue;
          }
          const int start = t;
          while (t < d.t && roll.at(t, p, c)) ++t;
          midi::NoteEvent e;
          e.start_tick = (offset + start) * kExportTicksPerCell;
          e.duration_ticks = static_cast<long long>(t - start) * kExportTicksPerCell;
          e.pitch = p + kLowestPitch;
          e.channel = kChannels[c];
          e.program = kPrograms[c];
          tracks[static_cast<std::size_t>(c)].notes.push_back(e);
        }
      }
    }
    offset += d.t;
  }
  for (auto& tr : tracks) {
    std::sort(tr.notes.begin(), tr.notes.end(), [](const midi::NoteEvent& a, const midi::NoteEvent& b) {
      return a.start_tick != b.start_tick ? a.start_tick < b.start_tick : a.pitch < b.pitch;
    });
  }
  return tracks;
}

std::vector<std::uint8_t> export_midi(std::span<const Pianoroll> tiles) {
  return midi::write_midi(rolls_to_tracks(tiles), kExportTicksPerQuarter, 120.0);
}

}  // namespace m2m
