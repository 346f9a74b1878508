#include "ulact/latent_cache.hpp"

#include <cstring>

#include "ulact/binio.hpp"

namespace ulact {

namespace {
constexpr char kMagic[4] = {'U', 'L', 'L', 'C'};
constexpr std::size_t kHeaderSize = 4 + 4 + 4 + 4;
}  // namespace

void write_latent_cache(const std::vector<LatentRecord>& records, int tokens_per_step,
                        const std::string& path) {
    BinWriter w;
    w.bytes(kMagic, 4);
    w.u32(kLatentCacheVersion);
    w.u32(static_cast<std::uint32_t>(tokens_per_step));
    w.u32(static_cast<std::uint32_t>(records.size()));
    for (const auto& rec : records) {
        if (static_cast<int>(rec.rgb.size()) != tokens_per_step ||
            static_cast<int>(rec.depth.size()) != tokens_per_step ||
            static_cast<int>(rec.unified.size()) != tokens_per_step)
            throw std::invalid_argument("latent cache: record token count mismatch");
        w.u32(rec.episode);
        w.u16(rec.step);
        for (auto v : rec.rgb) w.u16(v);
        for (auto v : rec.depth) w.u16(v);
        for (auto v : rec.unified) w.u16(v);
    }
    w.u32(w.crc_from(kHeaderSize));
    write_file_bytes(path, w.data());
}

std::vector<LatentRecord> read_latent_cache(const std::string& path, int* tokens_per_step_out) {
    const auto bytes = read_file_bytes(path);
    BinReader r(bytes.data(), bytes.size(), "latent cache " + path);
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) r.fail("bad magic, expected ULLC");
    for (int i = 0; i < 4; ++i) r.u8("magic");
    const auto version = r.u32("version");
    if (version != kLatentCacheVersion) r.fail("unsupported version " + std::to_string(version));
    const int n = static_cast<int>(r.u32("tokens per step"));
    const auto count = r.u32("record count");
    if (tokens_per_step_out) *tokens_per_step_out = n;

    if (bytes.size() < kHeaderSize + 4) r.fail("missing CRC trailer");
    const std::size_t payload_end = bytes.size() - 4;
    const std::uint32_t expect = r.crc_between(kHeaderSize, payload_end);

    std::vector<LatentRecord> records;
    records.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        LatentRecord rec;
        rec.episode = r.u32("record episode");
        rec.step = r.u16("record step");
        rec.rgb.resize(static_cast<std::size_t>(n));
        rec.depth.resize(static_cast<std::size_t>(n));
        rec.unified.resize(static_cast<std::size_t>(n));
        for (auto& v : rec.rgb) v = r.u16("rgb indices");
        for (auto& v : rec.depth) v = r.u16("depth indices");
        for (auto& v : rec.unified) v = r.u16("unified indices");
        records.push_back(std::move(rec));
    }
    if (r.pos() != payload_end) r.fail("payload length mismatch");
    if (r.u32("CRC trailer") != expect) r.fail("CRC mismatch: payload is corrupted");
    return records;
}

}  // namespace ulact
