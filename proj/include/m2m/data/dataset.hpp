#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "m2m/data/pianoroll_data.hpp"

namespace m2m {

enum class Split { Train, Valid, Test };

const char* split_name(Split s);
Split parse_split(const std::string& name);

// Binary layout (little-endian):
//   "M2M1" | u16 version=1 | u32 T | u32 P | u32 C | u64 phrase_count
//   per phrase: u16 id_len | id bytes | u32 bar_offset | cells bit-packed
//   in (t,p,c) order, MSB first, padded to a whole byte.
inline constexpr std::array<char, 4> kDatasetMagic{'M', '2', 'M', '1'};
inline constexpr std::uint16_t kDatasetVersion = 1;

std::vector<std::uint8_t> encode_dataset(std::span<const Phrase> phrases, Dims dims = Dims{});
/// Throws ParseError on bad magic, version or truncation. Never returns partial data.
std::vector<Phrase> decode_dataset(std::span<const std::uint8_t> bytes);

void save_dataset(std::span<const Phrase> phrases, const std::string& path, Dims dims = Dims{});
std::vector<Phrase> load_dataset(const std::string& path);

struct SourceRange {
  std::string source_id;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;

  friend bool operator==(const SourceRange&, const SourceRange&) = default;
};

struct DatasetManifest {
  Split split = Split::Train;
  std::uint64_t phrase_count = 0;
  Dims dims;
  std::vector<SourceRange> sources;

  friend bool operator==(const DatasetManifest&, const DatasetManifest&) = default;
};

/// Phrases of one source must be contiguous.
DatasetManifest build_manifest(std::span<const Phrase> phrases, Split split, Dims dims = Dims{});
/// Ranges are disjoint and cover [0, phrase_count).
bool manifest_is_consistent(const DatasetManifest& m);

std::string format_manifests(const std::vector<DatasetManifest>& manifests);
std::vector<DatasetManifest> parse_manifests(const std::string& text);

/// Assigns whole sources to splits. Sources are shuffled with `seed` then cut by
/// the given train/valid/test percentages; with three or more sources, valid and
/// test each get at least one.
std::map<std::string, Split> assign_splits(std::vector<std::string> source_ids,
                                           std::array<int, 3> percentages, std::uint64_t seed);

}  // namespace m2m
