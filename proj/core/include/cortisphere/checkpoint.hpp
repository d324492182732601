#pragma once

#include <map>
#include <string>

#include "cortisphere/numerics.hpp"

namespace cortisphere {

// Versioned binary container for named f64 arrays.
//
//   "CSCK"  u32 version
//   str kind            (u32 length + bytes)
//   str config          key=value lines
//   u32 array_count
//   per array: str name, u32 rows, u32 cols, rows*cols f64, u32 crc32
//
// All integers and floats little-endian; the per-array CRC covers the name,
// the two dimensions and the payload.
struct Checkpoint {
    static constexpr std::uint32_t kVersion = 1;

    std::string kind;
    std::map<std::string, std::string> config;
    num::ParameterSet arrays;
};

std::vector<unsigned char> serialize_checkpoint(const Checkpoint& checkpoint);
Checkpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes, const std::string& source = "checkpoint");
void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

} // namespace cortisphere
