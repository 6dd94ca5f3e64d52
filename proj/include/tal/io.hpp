#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "tal/net.hpp"
#include "tal/tensor.hpp"

namespace tal {

// Weight file (.talw), little-endian:
//   "TALW" | u32 version=1 | u32 line_count | line_count × (u32 len, UTF-8 bytes)
//   | per parametric layer in declaration order: f32 weight[], f32 bias[]
//   | u32 CRC32 of every byte between the magic and the CRC.
inline constexpr std::uint32_t kWeightFormatVersion = 1;

void save_weights(const Model<float>& model, const std::filesystem::path& path);
/// Throws FormatError on bad magic, version, CRC or truncation.
Model<float> load_weights(const std::filesystem::path& path);
/// As above, and throws SpecMismatchError unless the stored architecture
/// equals `expected`.
Model<float> load_weights(const std::filesystem::path& path, const Architecture& expected);

// Adversarial batch file (.bin), little-endian:
//   "TALB" | u32 version=1 | u32 rank | rank × u32 extent
//   | u32 label_count | label_count × i32 target label
//   | f32 data[] | u32 CRC32 of every byte between the magic and the CRC.
inline constexpr std::uint32_t kBatchFormatVersion = 1;

struct AdversarialBatch {
  Tensor images;
  std::vector<std::size_t> targets;
};

void save_batch(const AdversarialBatch& batch, const std::filesystem::path& path);
AdversarialBatch load_batch(const std::filesystem::path& path);

std::uint32_t crc32_of(const std::vector<unsigned char>& bytes, std::size_t begin,
                       std::size_t end);

} // namespace tal
