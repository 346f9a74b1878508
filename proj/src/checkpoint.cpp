#include "ulact/checkpoint.hpp"

#include <cstring>

#include "ulact/binio.hpp"

namespace ulact {

namespace {
constexpr char kMagic[4] = {'U', 'L', 'C', 'K'};
constexpr std::size_t kHeaderSize = 4 + 4;
}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    if (ckpt.has_optimizer &&
        (ckpt.opt_m.size() != ckpt.tensors.size() || ckpt.opt_v.size() != ckpt.tensors.size()))
        throw std::invalid_argument("checkpoint: optimizer state not aligned with tensors");
    BinWriter w;
    w.bytes(kMagic, 4);
    w.u32(kCheckpointVersion);
    w.str(ckpt.stage);
    w.str(ckpt.config_text);
    w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        w.str(t.name);
        w.u32(static_cast<std::uint32_t>(t.dims.size()));
        for (int d : t.dims) w.u32(static_cast<std::uint32_t>(d));
        w.f32_array(t.data.data(), t.data.size());
    }
    w.u8(ckpt.has_optimizer ? 1 : 0);
    if (ckpt.has_optimizer) {
        w.u64(ckpt.optimizer_step);
        for (std::size_t i = 0; i < ckpt.tensors.size(); ++i) {
            if (ckpt.opt_m[i].size() != ckpt.tensors[i].data.size())
                throw std::invalid_argument("checkpoint: optimizer moment size mismatch for " +
                                            ckpt.tensors[i].name);
            w.f32_array(ckpt.opt_m[i].data(), ckpt.opt_m[i].size());
            w.f32_array(ckpt.opt_v[i].data(), ckpt.opt_v[i].size());
        }
    }
    w.u32(static_cast<std::uint32_t>(ckpt.counters.size()));
    for (const auto& c : ckpt.counters) {
        w.str(c.name);
        w.u32(static_cast<std::uint32_t>(c.values.size()));
        for (std::int64_t v : c.values) w.u64(static_cast<std::uint64_t>(v));
    }
    w.u32(static_cast<std::uint32_t>(ckpt.rng_states.size()));
    for (const auto& r : ckpt.rng_states) {
        w.str(r.name);
        w.u64(r.state.key);
        w.u64(r.state.counter);
        w.u8(r.state.has_spare ? 1 : 0);
        w.f64(r.state.spare);
    }
    w.u32(w.crc_from(kHeaderSize));
    write_file_bytes(path, w.data());
}

Checkpoint read_checkpoint(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    BinReader r(bytes.data(), bytes.size(), "checkpoint " + path);
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) r.fail("bad magic, expected ULCK");
    for (int i = 0; i < 4; ++i) r.u8("magic");
    const auto version = r.u32("version");
    if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));

    if (bytes.size() < kHeaderSize + 4) r.fail("missing CRC trailer");
    const std::size_t payload_end = bytes.size() - 4;
    const std::uint32_t expect = r.crc_between(kHeaderSize, payload_end);

    Checkpoint ckpt;
    ckpt.stage = r.str("stage");
    ckpt.config_text = r.str("config snapshot");
    const auto tensor_count = r.u32("tensor count");
    ckpt.tensors.reserve(tensor_count);
    for (std::uint32_t i = 0; i < tensor_count; ++i) {
        NamedArray arr;
        arr.name = r.str("tensor name");
        const auto rank = r.u32("tensor rank");
        std::int64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            arr.dims.push_back(static_cast<int>(r.u32("tensor dim")));
            numel *= arr.dims.back();
        }
        arr.data.resize(static_cast<std::size_t>(numel));
        r.f32_array(arr.data.data(), arr.data.size(), ("tensor " + arr.name).c_str());
        ckpt.tensors.push_back(std::move(arr));
    }
    ckpt.has_optimizer = r.u8("optimizer flag") != 0;
    if (ckpt.has_optimizer) {
        ckpt.optimizer_step = r.u64("optimizer step");
        for (const auto& t : ckpt.tensors) {
            std::vector<float> m(t.data.size()), v(t.data.size());
            r.f32_array(m.data(), m.size(), ("optimizer m for " + t.name).c_str());
            r.f32_array(v.data(), v.size(), ("optimizer v for " + t.name).c_str());
            ckpt.opt_m.push_back(std::move(m));
            ckpt.opt_v.push_back(std::move(v));
        }
    }
    const auto counter_count = r.u32("counter array count");
    for (std::uint32_t i = 0; i < counter_count; ++i) {
        NamedCounters c;
        c.name = r.str("counter name");
        const auto len = r.u32("counter length");
        c.values.resize(len);
        for (auto& v : c.values) v = static_cast<std::int64_t>(r.u64("counter value"));
        ckpt.counters.push_back(std::move(c));
    }
    const auto rng_count = r.u32("rng count");
    for (std::uint32_t i = 0; i < rng_count; ++i) {
        NamedRngState s;
        s.name = r.str("rng name");
        s.state.key = r.u64("rng key");
        s.state.counter = r.u64("rng counter");
        s.state.has_spare = r.u8("rng spare flag") != 0;
        s.state.spare = r.f64("rng spare");
        ckpt.rng_states.push_back(std::move(s));
    }
    if (r.pos() != payload_end) r.fail("payload length mismatch");
    if (r.u32("CRC trailer") != expect) r.fail("CRC mismatch: checkpoint is corrupted");
    return ckpt;
}

}  // namespace ulact
