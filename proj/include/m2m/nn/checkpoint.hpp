#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "m2m/nn/layers.hpp"

namespace m2m::nn {

// Checkpoint container (little-endian):
//   "M2MC" | u16 version=1 | u16 len + model kind | u32 len + config text
//   | u8 flags (bit 0: trained) | u32 tensor count
//   per tensor: u16 len + path | u8 rank | u32 dims[rank] | f32 values
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<float> values;

  friend bool operator==(const StoredTensor&, const StoredTensor&) = default;
};

struct Checkpoint {
  std::string kind;    // "ddpm", "vae", "decoder"
  std::string config;  // key = value text
  bool trained = false;
  std::vector<StoredTensor> tensors;

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

/// Writes to `path + ".tmp"` then renames over `path`.
void write_checkpoint_file(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint_file(const std::string& path);

std::vector<StoredTensor> snapshot(const ParameterStore<float>& store);
/// Copies values by name. Names and shapes must match the store exactly.
void restore(ParameterStore<float>& store, const std::vector<StoredTensor>& tensors);

}  // namespace m2m::nn
