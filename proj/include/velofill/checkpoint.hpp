#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "velofill/unet.hpp"

namespace velofill {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { VersionMismatch, CorruptCheckpoint };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

// Layout (integers little-endian):
//   "VLFL" | u32 version | u32 len, config JSON |
//   per tensor: u32 len, name | u32 rank | u32 dims[rank] | f32 data[] |
//   u32 CRC-32 of everything before it
// Tensors are the trainable parameters followed by batch-norm buffers.
std::vector<std::uint8_t> serialize_checkpoint(const UNet& model);
UNet deserialize_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const UNet& model, const std::string& path);
UNet load_checkpoint(const std::string& path);

}  // namespace velofill
