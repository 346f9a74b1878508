#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ulact/nn.hpp"
#include "ulact/tensor.hpp"
#include "ulact/world.hpp"

namespace ulact {

enum class LatentKind : int { rgb = 0, depth = 1, unified = 2 };
enum class Modality : int { rgb = 0, depth = 1 };

inline const char* latent_kind_name(LatentKind k) {
    switch (k) {
        case LatentKind::rgb: return "rgb";
        case LatentKind::depth: return "depth";
        case LatentKind::unified: return "unified";
    }
    return "?";
}

template <typename T>
struct LatentAction {
    LatentKind kind = LatentKind::unified;
    std::vector<int> indices;  // one per latent token
    Tensor<T> embeddings;      // [N, D], dequantized
};

// Captured quantizer state for gradient checking. A hard quantizer has zero
// local derivative, so checking the full loss against finite differences
// requires freezing the chosen indices and the straight-through offsets at
// the evaluation point; the frozen loss equals the training loss there and
// its true derivative is exactly the straight-through gradient the training
// path computes.
template <typename T>
struct VqFreeze {
    struct Entry {
        std::vector<int> indices;
        std::vector<T> offset;  // quantized - continuous at capture
        std::vector<T> z0;      // continuous values at capture
        std::vector<T> q0;      // quantized values at capture
    };
    bool capturing = true;
    std::size_t cursor = 0;
    std::vector<Entry> entries;

    void rewind() {
        capturing = false;
        cursor = 0;
    }
};

template <typename T>
struct VqResult {
    std::vector<int> indices;
    Tensor<T> embeddings;      // straight-through quantized output
    Tensor<T> codebook_loss;   // || sg(z) - c ||^2 (mean over elements)
    Tensor<T> commitment_loss; // beta * || z - sg(c) ||^2
};

template <typename T>
struct Codebook {
    Tensor<T> table;  // [K, D]
    std::vector<std::int64_t> usage;      // cumulative hit counts
    std::vector<std::int64_t> last_used;  // training step of last hit

    static Codebook create(ParamStore<T>& ps, const std::string& name, int entries, int dim,
                           double init_std) {
        Codebook cb;
        cb.table = ps.normal(name, {entries, dim}, init_std);
        cb.usage.assign(static_cast<std::size_t>(entries), 0);
        cb.last_used.assign(static_cast<std::size_t>(entries), 0);
        return cb;
    }

    int entries() const { return table.shape()[0]; }
    int dim() const { return table.shape()[1]; }

    std::vector<T> lookup_values(int index) const {
        const int d = dim();
        const auto& v = table.value();
        return std::vector<T>(v.begin() + static_cast<std::size_t>(index) * d,
                              v.begin() + static_cast<std::size_t>(index + 1) * d);
    }

    // Nearest entry per row of z by squared L2; ties break to the lowest index.
    std::vector<int> nearest(const Tensor<T>& z) const {
        if (entries() == 0) shape_error("vq_quantize", "empty codebook");
        if (z.shape().size() != 2 || z.shape()[1] != dim())
            shape_error("vq_quantize", "latent " + shape_str(z.shape()) + " does not match codebook dim " +
                                           std::to_string(dim()));
        const int n = z.shape()[0], d = dim(), k = entries();
        std::vector<int> idx(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) {
            const T* row = z.value().data() + static_cast<std::size_t>(i) * d;
            T best = std::numeric_limits<T>::infinity();
            int best_k = 0;
            for (int c = 0; c < k; ++c) {
                const T* entry = table.value().data() + static_cast<std::size_t>(c) * d;
                T acc = T(0);
                for (int j = 0; j < d; ++j) {
                    const T diff = row[j] - entry[j];
                    acc += diff * diff;
                }
                if (acc < best) {
                    best = acc;
                    best_k = c;
                }
            }
            idx[static_cast<std::size_t>(i)] = best_k;
        }
        return idx;
    }

    VqResult<T> quantize(Tape<T>& tape, const Tensor<T>& z, T beta, VqFreeze<T>* freeze = nullptr) {
        VqResult<T> r;
        if (freeze && !freeze->capturing) {
            if (freeze->cursor >= freeze->entries.size())
                shape_error("vq_quantize", "freeze replay ran past captured entries");
            const auto& e = freeze->entries[freeze->cursor++];
            r.indices = e.indices;
            auto offset = Tensor<T>::leaf(z.shape(), e.offset, false);
            r.embeddings = add(tape, z, offset);
            auto z0 = Tensor<T>::leaf(z.shape(), e.z0, false);
            r.codebook_loss = mse_loss(tape, embedding(tape, table, e.indices), z0);
            auto q0 = Tensor<T>::leaf(z.shape(), e.q0, false);
            r.commitment_loss = scale(tape, mse_loss(tape, z, q0), beta);
            return r;
        }

        r.indices = nearest(z);
        auto q = embedding(tape, table, r.indices);
        r.embeddings = ste_passthrough(tape, q, z);
        r.codebook_loss = mse_loss(tape, q, z.detach());
        r.commitment_loss = scale(tape, mse_loss(tape, z, q.detach()), beta);

        if (freeze && freeze->capturing) {
            typename VqFreeze<T>::Entry e;
            e.indices = r.indices;
            e.z0 = z.value();
            e.q0 = q.value();
            e.offset.resize(e.z0.size());
            for (std::size_t i = 0; i < e.offset.size(); ++i) e.offset[i] = e.q0[i] - e.z0[i];
            freeze->entries.push_back(std::move(e));
        }
        return r;
    }

    void note_usage(const std::vector<int>& indices, std::int64_t step) {
        for (int i : indices) {
            usage[static_cast<std::size_t>(i)]++;
            last_used[static_cast<std::size_t>(i)] = step;
        }
    }

    // Re-seed entries unused for `stale_after` steps from the given pool of
    // encoder output rows. Returns the number of entries replaced.
    int reseed_dead(const std::vector<std::vector<T>>& pool, std::int64_t step,
                    std::int64_t stale_after, RngStream& rng) {
        if (pool.empty()) return 0;
        int replaced = 0;
        for (int k = 0; k < entries(); ++k) {
            if (step - last_used[static_cast<std::size_t>(k)] < stale_after) continue;
            const auto& src = pool[static_cast<std::size_t>(rng.next_below(pool.size()))];
            std::copy(src.begin(), src.end(),
                      table.value().begin() + static_cast<std::size_t>(k) * dim());
            last_used[static_cast<std::size_t>(k)] = step;
            ++replaced;
        }
        return replaced;
    }

    // Data-dependent initialization: overwrite every entry with a sampled
    // encoder output row plus a little jitter, so the whole table starts
    // inside the distribution the encoder actually produces.
    void bootstrap_from(const std::vector<std::vector<T>>& pool, RngStream& rng) {
        if (pool.empty()) return;
        for (int k = 0; k < entries(); ++k) {
            const auto& src = pool[static_cast<std::size_t>(rng.next_below(pool.size()))];
            T* row = table.value().data() + static_cast<std::size_t>(k) * dim();
            for (int j = 0; j < dim(); ++j)
                row[j] = src[static_cast<std::size_t>(j)] +
                         static_cast<T>(rng.next_normal() * 0.01);
        }
    }
};

// ---------------------------------------------------------------------------
// Inverse dynamics: patchify both frames, add positional and frame-slot
// embeddings, run a full-attention transformer over [queries | patches_t |
// patches_future], and read the latent from the query positions.
// ---------------------------------------------------------------------------

template <typename T>
struct InverseDynamics {
    Linear<T> patch_embed;
    Tensor<T> patch_pos;   // [P, width], shared by both frames
    Tensor<T> frame_slot;  // [2, width]
    Tensor<T> queries;     // [N, width]
    Transformer<T> encoder;
    Linear<T> out_proj;
    int patch = 4;

    static InverseDynamics create(ParamStore<T>& ps, const std::string& name, int channels,
                                  int frame_size, int patch, int num_queries, int latent_dim,
                                  int layers, int width, int heads, double init_std) {
        InverseDynamics m;
        m.patch = patch;
        const int patches = (frame_size / patch) * (frame_size / patch);
        const int patch_dim = channels * patch * patch;
        m.patch_embed = Linear<T>::create(ps, name + ".patch_embed", patch_dim, width, init_std);
        m.patch_pos = ps.normal(name + ".patch_pos", {patches, width}, init_std);
        m.frame_slot = ps.normal(name + ".frame_slot", {2, width}, init_std);
        m.queries = ps.normal(name + ".queries", {num_queries, width}, init_std);
        m.encoder = Transformer<T>::create(ps, name + ".encoder", layers, width, heads, init_std);
        m.out_proj = Linear<T>::create(ps, name + ".out_proj", width, latent_dim, init_std);
        return m;
    }

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& frame_now, const Tensor<T>& frame_future) const {
        auto embed = [&](const Tensor<T>& f, int slot) {
            auto tok = add(tape, patch_embed(tape, patchify(tape, f, patch)), patch_pos);
            return add_row(tape, tok, frame_slot, slot);
        };
        auto tokens = concat(tape, {queries, embed(frame_now, 0), embed(frame_future, 1)}, 0);
        auto hidden = encoder(tape, tokens);
        const int n = queries.shape()[0];
        return out_proj(tape, slice(tape, hidden, {0, 0}, {n, hidden.shape()[1]}));
    }
};

// ---------------------------------------------------------------------------
// Forward dynamics: reconstruct the future frame from the current frame's
// patches and the dequantized latent tokens.
// ---------------------------------------------------------------------------

template <typename T>
struct ForwardDynamics {
    Linear<T> patch_embed;
    Tensor<T> patch_pos;
    Linear<T> latent_in;
    Tensor<T> latent_pos;
    Transformer<T> decoder;
    Linear<T> out_head;
    int patch = 4;
    int channels = 1;
    int frame_size = 32;

    static ForwardDynamics create(ParamStore<T>& ps, const std::string& name, int channels,
                                  int frame_size, int patch, int num_latents, int latent_dim,
                                  int layers, int width, int heads, double init_std) {
        ForwardDynamics m;
        m.patch = patch;
        m.channels = channels;
        m.frame_size = frame_size;
        const int patches = (frame_size / patch) * (frame_size / patch);
        const int patch_dim = channels * patch * patch;
        m.patch_embed = Linear<T>::create(ps, name + ".patch_embed", patch_dim, width, init_std);
        m.patch_pos = ps.normal(name + ".patch_pos", {patches, width}, init_std);
        m.latent_in = Linear<T>::create(ps, name + ".latent_in", latent_dim, width, init_std);
        m.latent_pos = ps.normal(name + ".latent_pos", {num_latents, width}, init_std);
        m.decoder = Transformer<T>::create(ps, name + ".decoder", layers, width, heads, init_std);
        m.out_head = Linear<T>::create(ps, name + ".out_head", width, patch_dim, init_std);
        return m;
    }

    Tensor<T> operator()(Tape<T>& tape, const Tensor<T>& frame_now, const Tensor<T>& latents) const {
        auto tok = add(tape, patch_embed(tape, patchify(tape, frame_now, patch)), patch_pos);
        auto lat = add(tape, latent_in(tape, latents), latent_pos);
        auto hidden = decoder(tape, concat(tape, {tok, lat}, 0));
        const int patches = patch_pos.shape()[0];
        auto out = out_head(tape, slice(tape, hidden, {0, 0}, {patches, hidden.shape()[1]}));
        return unpatchify(tape, out, channels, frame_size, patch);
    }
};

// ---------------------------------------------------------------------------
// The full latent action learner: modality IDMs into a shared codebook, fused
// projection into a unified codebook, and modality FDMs conditioned on the
// unified latent. Single-modality variants (used by ablation baselines) skip
// the fusion stage and condition the FDM on their own quantized latent.
// ---------------------------------------------------------------------------

enum class LarnMode : int { unified = 0, rgb_only = 1, depth_only = 2 };

inline const char* larn_mode_name(LarnMode m) {
    switch (m) {
        case LarnMode::unified: return "unified";
        case LarnMode::rgb_only: return "rgb_only";
        case LarnMode::depth_only: return "depth_only";
    }
    return "?";
}

struct LarnConfig {
    int frame_size = 32;
    int patch = 4;
    int temporal_offset = 3;  // H
    int num_latents = 4;      // N
    int codebook_entries = 32;  // K
    int latent_dim = 64;        // D
    int layers = 2;
    int heads = 4;
    int width = 64;
    double beta = 0.25;
    double init_std = 0.02;
    double codebook_init_std = 0.1;
    int dead_code_steps = 100;
    LarnMode mode = LarnMode::unified;
};

template <typename T>
struct FramePair {
    Tensor<T> rgb_now, rgb_future;      // [3, S, S]
    Tensor<T> depth_now, depth_future;  // [1, S, S]
};

template <typename T>
Tensor<T> rgb_tensor(const world::Observation& o) {
    std::vector<T> data(o.rgb.begin(), o.rgb.end());
    return Tensor<T>::leaf({3, o.size, o.size}, std::move(data), false);
}

template <typename T>
Tensor<T> depth_tensor(const world::Observation& o) {
    std::vector<T> data(o.depth.begin(), o.depth.end());
    return Tensor<T>::leaf({1, o.size, o.size}, std::move(data), false);
}

template <typename T>
struct LarnLossParts {
    Tensor<T> total;
    Tensor<T> recon_rgb, recon_depth;
    Tensor<T> codebook_shared, commit_shared;
    Tensor<T> codebook_unified, commit_unified;
};

// Latent code triple for one frame pair.
struct LatentCodes {
    std::vector<int> rgb, depth, unified;
};

template <typename T>
struct LarnTrainAux {
    std::vector<std::vector<T>> shared_pool;   // encoder output rows this batch
    std::vector<std::vector<T>> unified_pool;  // fused projection rows
    std::vector<int> shared_indices;
    std::vector<int> unified_indices;
};

template <typename T>
class UniLarn {
public:
    UniLarn(LarnConfig cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
        const bool rgb = cfg.mode != LarnMode::depth_only;
        const bool depth = cfg.mode != LarnMode::rgb_only;
        if (rgb)
            idm_rgb_ = InverseDynamics<T>::create(params_, "idm_rgb", 3, cfg.frame_size, cfg.patch,
                                                  cfg.num_latents, cfg.latent_dim, cfg.layers,
                                                  cfg.width, cfg.heads, cfg.init_std);
        if (depth)
            idm_depth_ = InverseDynamics<T>::create(params_, "idm_depth", 1, cfg.frame_size, cfg.patch,
                                                    cfg.num_latents, cfg.latent_dim, cfg.layers,
                                                    cfg.width, cfg.heads, cfg.init_std);
        shared_cb_ = Codebook<T>::create(params_, "codebook_shared", cfg.codebook_entries,
                                         cfg.latent_dim, cfg.codebook_init_std);
        if (cfg.mode == LarnMode::unified) {
            fusion_ = Linear<T>::create(params_, "fusion", 2 * cfg.latent_dim, cfg.latent_dim,
                                        cfg.init_std);
            unified_cb_ = Codebook<T>::create(params_, "codebook_unified", cfg.codebook_entries,
                                              cfg.latent_dim, cfg.codebook_init_std);
        }
        if (rgb)
            fdm_rgb_ = ForwardDynamics<T>::create(params_, "fdm_rgb", 3, cfg.frame_size, cfg.patch,
                                                  cfg.num_latents, cfg.latent_dim, cfg.layers,
                                                  cfg.width, cfg.heads, cfg.init_std);
        if (depth)
            fdm_depth_ = ForwardDynamics<T>::create(params_, "fdm_depth", 1, cfg.frame_size,
                                                    cfg.patch, cfg.num_latents, cfg.latent_dim,
                                                    cfg.layers, cfg.width, cfg.heads, cfg.init_std);
    }

    const LarnConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }
    Codebook<T>& shared_codebook() { return shared_cb_; }
    Codebook<T>& unified_codebook() { return unified_cb_; }

    // Continuous latent from an observation pair of one modality.
    Tensor<T> idm_encode(Tape<T>& tape, const Tensor<T>& frame_now, const Tensor<T>& frame_future,
                         Modality m) const {
        const auto& idm = (m == Modality::rgb) ? idm_rgb_ : idm_depth_;
        if (m == Modality::rgb && cfg_.mode == LarnMode::depth_only)
            shape_error("idm_encode", "model has no rgb branch");
        if (m == Modality::depth && cfg_.mode == LarnMode::rgb_only)
            shape_error("idm_encode", "model has no depth branch");
        const int ch = (m == Modality::rgb) ? 3 : 1;
        if (frame_now.shape() != Shape{ch, cfg_.frame_size, cfg_.frame_size} ||
            frame_future.shape() != frame_now.shape())
            shape_error("idm_encode", "modality mismatch: expected " +
                                          shape_str({ch, cfg_.frame_size, cfg_.frame_size}) +
                                          ", got " + shape_str(frame_now.shape()) + " and " +
                                          shape_str(frame_future.shape()));
        return idm(tape, frame_now, frame_future);
    }

    // Fused projection of the two dequantized modality latents followed by the
    // unified quantization: h = W_f [e_r; e_d] + b_f, then VQ against C(u).
    struct FusedResult {
        Tensor<T> h;
        VqResult<T> vq;
    };
    FusedResult fuse_and_quantize(Tape<T>& tape, const Tensor<T>& e_rgb, const Tensor<T>& e_depth,
                                  VqFreeze<T>* freeze = nullptr) {
        if (cfg_.mode != LarnMode::unified)
            shape_error("fuse_and_quantize", "single-modality model has no fusion stage");
        if (e_rgb.shape() != e_depth.shape() ||
            e_rgb.shape() != Shape{cfg_.num_latents, cfg_.latent_dim})
            shape_error("fuse_and_quantize", "expected two " +
                                                 shape_str({cfg_.num_latents, cfg_.latent_dim}) +
                                                 " latents, got " + shape_str(e_rgb.shape()) +
                                                 " and " + shape_str(e_depth.shape()));
        FusedResult r;
        r.h = fusion_(tape, concat(tape, {e_rgb, e_depth}, 1));
        r.vq = unified_cb_.quantize(tape, r.h, static_cast<T>(cfg_.beta), freeze);
        return r;
    }

    // Future-frame prediction conditioned on the unified latent.
    Tensor<T> fdm_decode(Tape<T>& tape, const Tensor<T>& frame_now, const LatentAction<T>& latent,
                         Modality m) const {
        if (cfg_.mode == LarnMode::unified && latent.kind != LatentKind::unified)
            shape_error("fdm_decode", std::string("expected a unified latent, got ") +
                                          latent_kind_name(latent.kind));
        const auto& fdm = (m == Modality::rgb) ? fdm_rgb_ : fdm_depth_;
        return fdm(tape, frame_now, latent.embeddings);
    }

    // Joint objective over a batch: per-modality future reconstruction plus
    // codebook and commitment terms from both quantization stages.
    LarnLossParts<T> loss(Tape<T>& tape, const std::vector<FramePair<T>>& batch,
                          VqFreeze<T>* freeze = nullptr, LarnTrainAux<T>* aux = nullptr) {
        if (batch.empty()) shape_error("unilarn_loss", "empty batch");
        const T inv_b = T(1) / static_cast<T>(batch.size());
        const bool use_rgb = cfg_.mode != LarnMode::depth_only;
        const bool use_depth = cfg_.mode != LarnMode::rgb_only;

        std::optional<Tensor<T>> recon_r, recon_d, cb_s, com_s, cb_u, com_u;
        auto acc = [&](std::optional<Tensor<T>>& slot, const Tensor<T>& v) {
            slot = slot ? add(tape, *slot, v) : v;
        };

        for (const auto& pair : batch) {
            Tensor<T> e_r, e_d;
            if (use_rgb) {
                auto z = idm_encode(tape, pair.rgb_now, pair.rgb_future, Modality::rgb);
                auto vq = shared_cb_.quantize(tape, z, static_cast<T>(cfg_.beta), freeze);
                e_r = vq.embeddings;
                acc(cb_s, vq.codebook_loss);
                acc(com_s, vq.commitment_loss);
                if (aux) collect_aux(*aux, z, vq.indices, true);
            }
            if (use_depth) {
                auto z = idm_encode(tape, pair.depth_now, pair.depth_future, Modality::depth);
                auto vq = shared_cb_.quantize(tape, z, static_cast<T>(cfg_.beta), freeze);
                e_d = vq.embeddings;
                acc(cb_s, vq.codebook_loss);
                acc(com_s, vq.commitment_loss);
                if (aux) collect_aux(*aux, z, vq.indices, true);
            }

            Tensor<T> conditioning;
            if (cfg_.mode == LarnMode::unified) {
                auto fused = fuse_and_quantize(tape, e_r, e_d, freeze);
                conditioning = fused.vq.embeddings;
                acc(cb_u, fused.vq.codebook_loss);
                acc(com_u, fused.vq.commitment_loss);
                if (aux) collect_aux_unified(*aux, fused.h, fused.vq.indices);
            } else {
                conditioning = use_rgb ? e_r : e_d;
            }

            if (use_rgb) {
                auto pred = fdm_rgb_(tape, pair.rgb_now, conditioning);
                acc(recon_r, mse_loss(tape, pred, pair.rgb_future));
            }
            if (use_depth) {
                auto pred = fdm_depth_(tape, pair.depth_now, conditioning);
                acc(recon_d, mse_loss(tape, pred, pair.depth_future));
            }
        }

        auto finish = [&](std::optional<Tensor<T>>& slot) {
            return slot ? scale(tape, *slot, inv_b) : Tensor<T>::scalar(T(0), false);
        };
        LarnLossParts<T> parts;
        parts.recon_rgb = finish(recon_r);
        parts.recon_depth = finish(recon_d);
        parts.codebook_shared = finish(cb_s);
        parts.commit_shared = finish(com_s);
        parts.codebook_unified = finish(cb_u);
        parts.commit_unified = finish(com_u);
        auto total = add(tape, parts.recon_rgb, parts.recon_depth);
        total = add(tape, total, parts.codebook_shared);
        total = add(tape, total, parts.commit_shared);
        total = add(tape, total, parts.codebook_unified);
        parts.total = add(tape, total, parts.commit_unified);
        return parts;
    }

    // Eval-mode code extraction for one pair. Single-modality models report
    // their own codes under both their modality column and the unified column,
    // which downstream stages use as the conditioning input.
    LatentCodes encode_codes(const FramePair<T>& pair) {
        Tape<T> tape;
        tape.set_recording(false);
        LatentCodes codes;
        Tensor<T> e_r, e_d;
        if (cfg_.mode != LarnMode::depth_only) {
            auto z = idm_encode(tape, pair.rgb_now, pair.rgb_future, Modality::rgb);
            auto vq = shared_cb_.quantize(tape, z, static_cast<T>(cfg_.beta));
            codes.rgb = vq.indices;
            e_r = vq.embeddings;
        }
        if (cfg_.mode != LarnMode::rgb_only) {
            auto z = idm_encode(tape, pair.depth_now, pair.depth_future, Modality::depth);
            auto vq = shared_cb_.quantize(tape, z, static_cast<T>(cfg_.beta));
            codes.depth = vq.indices;
            e_d = vq.embeddings;
        }
        if (cfg_.mode == LarnMode::unified) {
            codes.unified = fuse_and_quantize(tape, e_r, e_d).vq.indices;
        } else {
            codes.unified = (cfg_.mode == LarnMode::rgb_only) ? codes.rgb : codes.depth;
            if (cfg_.mode == LarnMode::rgb_only)
                codes.depth.assign(static_cast<std::size_t>(cfg_.num_latents), 0);
            else
                codes.rgb.assign(static_cast<std::size_t>(cfg_.num_latents), 0);
        }
        return codes;
    }

    struct StepMetrics {
        T total = 0;
        T recon_rgb = 0, recon_depth = 0;
        T vq_shared = 0, vq_unified = 0;
        int reseeded_shared = 0, reseeded_unified = 0;
    };

    // One optimizer step on the joint loss, with usage tracking and dead-code
    // reseeding from this batch's encoder outputs.
    StepMetrics train_step(const std::vector<FramePair<T>>& batch, AdamW<T>& opt,
                           std::int64_t step, RngStream& reseed_rng) {
        if (!codebooks_bootstrapped_) {
            Tape<T> warmup;
            warmup.set_recording(false);
            LarnTrainAux<T> pools;
            loss(warmup, batch, nullptr, &pools);
            shared_cb_.bootstrap_from(pools.shared_pool, reseed_rng);
            if (cfg_.mode == LarnMode::unified)
                unified_cb_.bootstrap_from(pools.unified_pool, reseed_rng);
            codebooks_bootstrapped_ = true;
        }
        Tape<T> tape;
        LarnTrainAux<T> aux;
        auto parts = loss(tape, batch, nullptr, &aux);
        if (!std::isfinite(parts.total.item()))
            throw std::runtime_error("unilarn: non-finite loss; components: recon_rgb=" +
                                     std::to_string(parts.recon_rgb.item()) + " recon_depth=" +
                                     std::to_string(parts.recon_depth.item()));
        params_.zero_grad();
        tape.backward(parts.total);
        check_finite_grads(params_);
        auto tensors = params_.tensors();
        opt.step(tensors);

        shared_cb_.note_usage(aux.shared_indices, step);
        StepMetrics m;
        m.reseeded_shared = shared_cb_.reseed_dead(aux.shared_pool, step, cfg_.dead_code_steps,
                                                   reseed_rng);
        if (cfg_.mode == LarnMode::unified) {
            unified_cb_.note_usage(aux.unified_indices, step);
            m.reseeded_unified = unified_cb_.reseed_dead(aux.unified_pool, step,
                                                         cfg_.dead_code_steps, reseed_rng);
        }
        m.total = parts.total.item();
        m.recon_rgb = parts.recon_rgb.item();
        m.recon_depth = parts.recon_depth.item();
        m.vq_shared = parts.codebook_shared.item() + parts.commit_shared.item();
        m.vq_unified = parts.codebook_unified.item() + parts.commit_unified.item();
        return m;
    }

    static void check_finite_grads(const ParamStore<T>& ps) {
        for (const auto& [name, t] : ps.entries())
            for (T g : t.grad())
                if (!std::isfinite(g))
                    throw std::runtime_error("unilarn: non-finite gradient in parameter " + name);
    }

private:
    void collect_aux(LarnTrainAux<T>& aux, const Tensor<T>& z, const std::vector<int>& idx,
                     bool /*shared*/) {
        const int d = cfg_.latent_dim;
        for (int i = 0; i < cfg_.num_latents; ++i)
            aux.shared_pool.emplace_back(z.value().begin() + static_cast<std::size_t>(i) * d,
                                         z.value().begin() + static_cast<std::size_t>(i + 1) * d);
        aux.shared_indices.insert(aux.shared_indices.end(), idx.begin(), idx.end());
    }

    void collect_aux_unified(LarnTrainAux<T>& aux, const Tensor<T>& h, const std::vector<int>& idx) {
        const int d = cfg_.latent_dim;
        for (int i = 0; i < cfg_.num_latents; ++i)
            aux.unified_pool.emplace_back(h.value().begin() + static_cast<std::size_t>(i) * d,
                                          h.value().begin() + static_cast<std::size_t>(i + 1) * d);
        aux.unified_indices.insert(aux.unified_indices.end(), idx.begin(), idx.end());
    }

    LarnConfig cfg_;
    ParamStore<T> params_;
    InverseDynamics<T> idm_rgb_, idm_depth_;
    Codebook<T> shared_cb_, unified_cb_;
    Linear<T> fusion_;
    ForwardDynamics<T> fdm_rgb_, fdm_depth_;
    bool codebooks_bootstrapped_ = false;

public:
    bool codebooks_bootstrapped() const { return codebooks_bootstrapped_; }
    void set_codebooks_bootstrapped(bool v) { codebooks_bootstrapped_ = v; }
};

}  // namespace ulact
