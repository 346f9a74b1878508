#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ulact {

// Latent label cache, magic "ULLC". Little-endian:
//   header: magic, u32 version, u32 tokens per step (N), u32 record count
//   per record: u32 episode id, u16 step, u16[N] rgb, u16[N] depth, u16[N] unified
//   trailer: u32 CRC32 over everything after the header.

inline constexpr std::uint32_t kLatentCacheVersion = 1;

struct LatentRecord {
    std::uint32_t episode = 0;
    std::uint16_t step = 0;
    std::vector<std::uint16_t> rgb, depth, unified;  // N each
};

void write_latent_cache(const std::vector<LatentRecord>& records, int tokens_per_step,
                        const std::string& path);
std::vector<LatentRecord> read_latent_cache(const std::string& path, int* tokens_per_step_out = nullptr);

}  // namespace ulact
