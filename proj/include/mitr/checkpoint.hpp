#pragma once

// Checkpoint container, all integers and floats little-endian:
//
//   magic    8 bytes  "MITRCKPT"
//   version  u32      1
//   config   7 x u64  d_model n_heads n_layers d_ffn vocab_size d_visual max_len
//   vocab    u64 count, then per word: u32 byte length + UTF-8 bytes
//   params   u64 count, then per tensor:
//              u32 name length + name bytes
//              u32 rank (always 2) + rank x u64 extents
//              extents product x f64 values, row-major

#include <cstdint>
#include <string>
#include <string_view>

#include "mitr/model.hpp"

namespace mitr {

inline constexpr char kCheckpointMagic[8] = {'M', 'I', 'T', 'R', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

std::string serialize_checkpoint(const Mitr& model);
Mitr deserialize_checkpoint(std::string_view bytes);

void save_checkpoint(const Mitr& model, const std::string& path);
Mitr load_checkpoint(const std::string& path);

// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace mitr
