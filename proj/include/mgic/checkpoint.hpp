#pragma once

#include <cstdint>
#include <string>

#include "mgic/arch.hpp"

namespace mgic {

// Binary checkpoint container (all integers little-endian):
//   "MGIC" | u32 version | u64 arch-json length | arch-json bytes
//   | u32 parameter count | records | u32 buffer count | records
//   | u32 CRC-32 of everything before it
// Record: u32 name length | name bytes | u32 rank | u64 extents | f32 data.
constexpr std::uint32_t kCheckpointVersion = 1;

std::uint32_t crc32(const unsigned char* data, std::size_t n);

void save_checkpoint(Model<float>& model, const std::string& path);
Model<float> load_checkpoint(const std::string& path);

// Reads only the embedded architecture description (no tensors touched).
json checkpoint_arch(const std::string& path);

}  // namespace mgic
