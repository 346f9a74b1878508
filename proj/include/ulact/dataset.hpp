#pragma once

#include <string>
#include <vector>

#include "ulact/world.hpp"

namespace ulact::world {

// Episode container format, magic "ULDS". Little-endian:
//   header: magic, u32 version, u32 episode count, u32 frame size S
//   per episode: u64 seed, u32 instruction, u16 step count, then per step
//     rgb f32[3*S*S], depth f32[S*S], action f32[7], state f32[32]
//   trailer: u32 CRC32 over everything after the header.
// The state block is [ex, ey, ez, grip, task, target, ref, nobj] followed by
// [color, x, y, h, held, lift] per object.

inline constexpr std::uint32_t kDatasetVersion = 1;

void write_dataset(const std::vector<Episode>& episodes, const std::string& path, int frame_size);
std::vector<Episode> read_dataset(const std::string& path, int* frame_size_out = nullptr);

// Frame size recorded in an existing dataset header (no payload validation).
int dataset_frame_size(const std::string& path);

}  // namespace ulact::world
