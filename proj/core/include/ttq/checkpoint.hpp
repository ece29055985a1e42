#pragma once

// Binary checkpoint, little-endian. Layout (byte-exact description in docs/formats.md):
//
//   header  : "TTQ1" | u32 version | u64 config digest | u64 body length | u32 crc32(body)
//   body    : u32 config length | config JSON | u32 record count | records...
//
// Record payloads are exactly the bytes counted by model_size_bytes; everything else is
// metadata. Loading yields snapshot(model): quantized cores become delta * code and other
// values are FP32.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "ttq/model.hpp"

namespace ttq::io {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kHeaderBytes = 28;

struct CheckpointLayout {
  std::uint64_t file_bytes = 0;
  /// Parameter payload; equals model_size_bytes(model).bytes.
  std::uint64_t payload_bytes = 0;
  /// Header, config block and per-record descriptors.
  std::uint64_t metadata_bytes = 0;
};

std::vector<std::uint8_t> serialize(const model::TransformerModel& model, CheckpointLayout* layout = nullptr);
/// Throws IntegrityError on bad magic, version, length or checksum.
model::TransformerModel deserialize(std::span<const std::uint8_t> bytes);

CheckpointLayout save_checkpoint(const model::TransformerModel& model, const std::filesystem::path& path);
model::TransformerModel load_checkpoint(const std::filesystem::path& path);

}  // namespace ttq::io
