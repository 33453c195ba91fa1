#pragma once

// Parameter checkpoint container: a leading u32 record count followed by one
// record per named float32 array:
//
//   u32 name_len | name (UTF-8) | "MTEN" | u8 version=1 | u8 dtype=0x01 (f32)
//   | u8 rank | u8 0 | rank x u32 dims | payload (f32, little-endian)

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace casseg {

struct NamedArray {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> values;

  bool operator==(const NamedArray&) const = default;
};

std::vector<std::uint8_t> encode_checkpoint(std::span<const NamedArray> arrays);
std::vector<NamedArray> decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(std::span<const NamedArray> arrays, const std::filesystem::path& path);
std::vector<NamedArray> read_checkpoint(const std::filesystem::path& path);

}  // namespace casseg
