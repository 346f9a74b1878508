#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ulact/rng.hpp"
#include "ulact/tensor.hpp"

namespace ulact {

// Checkpoint container, magic "ULCK". Little-endian:
//   magic, u32 version, stage string, config snapshot string
//   u32 tensor count; per tensor: name, u32 rank, u32 dims[], f32 data
//   u8 optimizer flag; when set: u64 step count, then per tensor m[] and v[]
//   u32 counter-array count; per array: name, u32 length, i64 values
//   u32 rng count; per stream: name, u64 key, u64 counter, u8 spare flag, f64 spare
//   u32 CRC32 over everything after the magic+version header.
// Tensors are stored as f32 regardless of the run precision, in parameter
// registration order, which makes save -> load -> save byte-identical.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
    std::string name;
    std::vector<int> dims;
    std::vector<float> data;
};

struct NamedCounters {
    std::string name;
    std::vector<std::int64_t> values;
};

struct NamedRngState {
    std::string name;
    RngStream::State state;
};

struct Checkpoint {
    std::string stage;  // unilarn | pretrain | finetune
    std::string config_text;
    std::vector<NamedArray> tensors;
    bool has_optimizer = false;
    std::uint64_t optimizer_step = 0;
    std::vector<std::vector<float>> opt_m, opt_v;  // aligned with `tensors`
    std::vector<NamedCounters> counters;
    std::vector<NamedRngState> rng_states;

    const NamedCounters* find_counters(const std::string& name) const {
        for (const auto& c : counters)
            if (c.name == name) return &c;
        return nullptr;
    }
    const NamedRngState* find_rng(const std::string& name) const {
        for (const auto& r : rng_states)
            if (r.name == name) return &r;
        return nullptr;
    }
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// Bridges between the templated parameter store / optimizer and the f32
// container above.
// ---------------------------------------------------------------------------

template <typename T>
void pack_params(const ParamStore<T>& params, const AdamW<T>* opt, Checkpoint& ckpt) {
    ckpt.tensors.clear();
    for (const auto& [name, t] : params.entries()) {
        NamedArray arr;
        arr.name = name;
        arr.dims = t.shape();
        arr.data.assign(t.value().begin(), t.value().end());
        ckpt.tensors.push_back(std::move(arr));
    }
    ckpt.has_optimizer = opt != nullptr && !opt->m.empty();
    ckpt.opt_m.clear();
    ckpt.opt_v.clear();
    if (ckpt.has_optimizer) {
        ckpt.optimizer_step = static_cast<std::uint64_t>(opt->step_count);
        for (std::size_t i = 0; i < opt->m.size(); ++i) {
            ckpt.opt_m.emplace_back(opt->m[i].begin(), opt->m[i].end());
            ckpt.opt_v.emplace_back(opt->v[i].begin(), opt->v[i].end());
        }
    }
}

template <typename T>
void unpack_params(const Checkpoint& ckpt, ParamStore<T>& params, AdamW<T>* opt) {
    const auto& entries = params.entries();
    if (ckpt.tensors.size() != entries.size())
        throw std::runtime_error("checkpoint: tensor count " + std::to_string(ckpt.tensors.size()) +
                                 " does not match model (" + std::to_string(entries.size()) + ")");
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& arr = ckpt.tensors[i];
        Tensor<T> t = entries[i].second;
        if (arr.name != entries[i].first)
            throw std::runtime_error("checkpoint: tensor '" + arr.name + "' does not match model '" +
                                     entries[i].first + "'");
        if (arr.dims != t.shape())
            throw std::runtime_error("checkpoint: tensor '" + arr.name + "' has shape " +
                                     shape_str(arr.dims) + ", model expects " + shape_str(t.shape()));
        for (std::size_t j = 0; j < arr.data.size(); ++j)
            t.value()[j] = static_cast<T>(arr.data[j]);
    }
    if (opt) {
        opt->m.clear();
        opt->v.clear();
        opt->step_count = 0;
        if (ckpt.has_optimizer) {
            opt->step_count = static_cast<std::int64_t>(ckpt.optimizer_step);
            for (std::size_t i = 0; i < ckpt.opt_m.size(); ++i) {
                opt->m.emplace_back(ckpt.opt_m[i].begin(), ckpt.opt_m[i].end());
                opt->v.emplace_back(ckpt.opt_v[i].begin(), ckpt.opt_v[i].end());
            }
        }
    }
}

}  // namespace ulact
