#pragma once

// Binary checkpoint layout (all integers little-endian):
//
//   "CMC1"                       magic
//   u32 version = 1
//   u32 tensor count
//   per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank],
//               f64 data (row-major)
//   u32 token count, then per token: u32 length, UTF-8 bytes (index order)
//   u32 config length, UTF-8 "key=value" lines
//
// Column vectors are written with rank 1; everything else with rank 2.

#include <filesystem>
#include <string>

#include "comatch/trainer.hpp"

namespace comatch::train {

inline constexpr char kCheckpointMagic[4] = {'C', 'M', 'C', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Throws MismatchError when the checkpoint was trained with other dimensions.
void require_dims(const Checkpoint& ckpt, const model::ModelDims& requested);

}  // namespace comatch::train
