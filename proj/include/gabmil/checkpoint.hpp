#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gabmil/tensor.hpp"

namespace gabmil {

/// One serialized parameter: name, shape, 32-bit values.
struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

// Flat little-endian container: magic "GMCK", version byte, u32 entry count,
// then per entry u16 name length + name, u8 rank, u32 dims, f32 values.
// Round trips byte-exactly.

std::vector<std::uint8_t> encode_checkpoint(const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> decode_checkpoint(const std::vector<std::uint8_t>& bytes);

void write_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(const std::string& path);

}  // namespace gabmil
