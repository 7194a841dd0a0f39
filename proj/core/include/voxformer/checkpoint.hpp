// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container:
//   "VXCK" | u32 version | u64 manifest length | JSON manifest | payloads
// The manifest holds the caller's config object and, per tensor, its name,
// dtype, shape, byte offset (relative to the payload start) and length.
// All integers and payload scalars are little-endian.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "voxformer/nn/layers.hpp"

namespace voxformer {

struct Checkpoint {
  /// Compact JSON text of the stored config object.
  std::string config_json;
  std::vector<nn::NamedTensor> tensors;
};

/// `config_json` must be a JSON object; it is embedded verbatim in the manifest.
std::vector<std::uint8_t> encode_checkpoint(const nn::Module& module, std::string_view config_json);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const std::filesystem::path& path, const nn::Module& module, std::string_view config_json);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Copies every stored tensor into the module's state by name. Names, shapes
/// and dtypes must match exactly.
void load_state(nn::Module& module, const Checkpoint& checkpoint);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
/// Writes to a sibling temporary and renames it into place.
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace voxformer
