#include "ulact/dataset.hpp"

#include <cstring>

#include "ulact/binio.hpp"

namespace ulact::world {

namespace {

constexpr char kMagic[4] = {'U', 'L', 'D', 'S'};
constexpr std::size_t kHeaderSize = 4 + 4 + 4 + 4;

void write_state(BinWriter& w, const WorldState& s) {
    w.f32(s.ex);
    w.f32(s.ey);
    w.f32(s.ez);
    w.f32(static_cast<float>(s.grip));
    w.f32(static_cast<float>(static_cast<int>(s.task)));
    w.f32(static_cast<float>(s.target));
    w.f32(static_cast<float>(s.ref));
    w.f32(static_cast<float>(kNumObjects));
    for (const auto& o : s.objects) {
        w.f32(static_cast<float>(o.color));
        w.f32(o.x);
        w.f32(o.y);
        w.f32(o.h);
        w.f32(o.held ? 1.0f : 0.0f);
        w.f32(o.lift);
    }
}

WorldState read_state(BinReader& r) {
    WorldState s;
    s.ex = r.f32("state.ex");
    s.ey = r.f32("state.ey");
    s.ez = r.f32("state.ez");
    s.grip = static_cast<int>(r.f32("state.grip"));
    s.task = static_cast<TaskKind>(static_cast<int>(r.f32("state.task")));
    s.target = static_cast<int>(r.f32("state.target"));
    s.ref = static_cast<int>(r.f32("state.ref"));
    const int nobj = static_cast<int>(r.f32("state.nobj"));
    if (nobj != kNumObjects) r.fail("state block declares " + std::to_string(nobj) + " objects");
    for (auto& o : s.objects) {
        o.color = static_cast<int>(r.f32("object.color"));
        o.x = r.f32("object.x");
        o.y = r.f32("object.y");
        o.h = r.f32("object.h");
        o.held = r.f32("object.held") != 0.0f;
        o.lift = r.f32("object.lift");
    }
    return s;
}

}  // namespace

void write_dataset(const std::vector<Episode>& episodes, const std::string& path, int frame_size) {
    BinWriter w;
    w.bytes(kMagic, 4);
    w.u32(kDatasetVersion);
    w.u32(static_cast<std::uint32_t>(episodes.size()));
    w.u32(static_cast<std::uint32_t>(frame_size));
    for (const auto& ep : episodes) {
        w.u64(ep.seed);
        w.u32(ep.instruction);
        w.u16(static_cast<std::uint16_t>(ep.steps.size()));
        for (const auto& st : ep.steps) {
            if (st.obs.size != frame_size)
                throw std::invalid_argument("write_dataset: frame size mismatch");
            w.f32_array(st.obs.rgb.data(), st.obs.rgb.size());
            w.f32_array(st.obs.depth.data(), st.obs.depth.size());
            w.f32_array(st.action.dp.data(), 3);
            w.f32_array(st.action.dr.data(), 3);
            w.f32(static_cast<float>(st.action.grip));
            write_state(w, st.state);
        }
    }
    w.u32(w.crc_from(kHeaderSize));
    write_file_bytes(path, w.data());
}

std::vector<Episode> read_dataset(const std::string& path, int* frame_size_out) {
    const auto bytes = read_file_bytes(path);
    BinReader r(bytes.data(), bytes.size(), "dataset " + path);

    char magic[4];
    r.need(4, "magic");
    std::memcpy(magic, bytes.data(), 4);
    if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic, expected ULDS");
    for (int i = 0; i < 4; ++i) r.u8("magic");
    const auto version = r.u32("version");
    if (version != kDatasetVersion)
        r.fail("unsupported version " + std::to_string(version));
    const auto count = r.u32("episode count");
    const auto frame_size = static_cast<int>(r.u32("frame size"));
    if (frame_size_out) *frame_size_out = frame_size;

    if (bytes.size() < kHeaderSize + 4) r.fail("missing CRC trailer");
    const std::size_t payload_end = bytes.size() - 4;
    const std::uint32_t expect = r.crc_between(kHeaderSize, payload_end);

    std::vector<Episode> episodes;
    episodes.reserve(count);
    const std::size_t rgb_n = static_cast<std::size_t>(3) * frame_size * frame_size;
    const std::size_t depth_n = static_cast<std::size_t>(frame_size) * frame_size;
    for (std::uint32_t e = 0; e < count; ++e) {
        Episode ep;
        ep.seed = r.u64("episode seed");
        ep.instruction = r.u32("episode instruction");
        const auto steps = r.u16("episode step count");
        ep.steps.reserve(steps);
        for (std::uint16_t t = 0; t < steps; ++t) {
            EpisodeStep st;
            st.obs.size = frame_size;
            st.obs.rgb.resize(rgb_n);
            st.obs.depth.resize(depth_n);
            r.f32_array(st.obs.rgb.data(), rgb_n,
                        ("episode " + std::to_string(e) + " step " + std::to_string(t) + " rgb").c_str());
            r.f32_array(st.obs.depth.data(), depth_n,
                        ("episode " + std::to_string(e) + " step " + std::to_string(t) + " depth").c_str());
            r.f32_array(st.action.dp.data(), 3, "action.dp");
            r.f32_array(st.action.dr.data(), 3, "action.dr");
            st.action.grip = static_cast<int>(r.f32("action.grip"));
            st.state = read_state(r);
            ep.steps.push_back(std::move(st));
        }
        ep.valid = true;
        episodes.push_back(std::move(ep));
    }
    if (r.pos() != payload_end) r.fail("payload length mismatch");
    const auto stored = r.u32("CRC trailer");
    if (stored != expect) r.fail("CRC mismatch: payload is corrupted");
    return episodes;
}

int dataset_frame_size(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    BinReader r(bytes.data(), bytes.size(), "dataset " + path);
    char magic[4];
    r.need(4, "magic");
    std::memcpy(magic, bytes.data(), 4);
    if (std::memcmp(magic, kMagic, 4) != 0) r.fail("bad magic, expected ULDS");
    for (int i = 0; i < 4; ++i) r.u8("magic");
    r.u32("version");
    r.u32("episode count");
    return static_cast<int>(r.u32("frame size"));
}

}  // namespace ulact::world
