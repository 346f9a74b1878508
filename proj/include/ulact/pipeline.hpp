#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ulact/checkpoint.hpp"
#include "ulact/config.hpp"
#include "ulact/dataset.hpp"
#include "ulact/evalharness.hpp"
#include "ulact/latent_cache.hpp"
#include "ulact/policy.hpp"
#include "ulact/unilact.hpp"
#include "ulact/unilarn.hpp"

namespace ulact {

// ---------------------------------------------------------------------------
// Frame-pair indexing. Every step of every episode yields one training pair;
// near the end of an episode the future frame clamps to the final frame, so
// terminal steps still produce (static) latents and stay supervised.
// ---------------------------------------------------------------------------

struct PairRef {
    int episode = 0;
    int step = 0;
    int future = 0;
};

inline std::vector<PairRef> build_pair_index(const std::vector<world::Episode>& episodes,
                                             int temporal_offset) {
    std::vector<PairRef> index;
    for (int e = 0; e < static_cast<int>(episodes.size()); ++e) {
        const int len = static_cast<int>(episodes[static_cast<std::size_t>(e)].steps.size());
        for (int t = 0; t < len; ++t)
            index.push_back({e, t, std::min(t + temporal_offset, len - 1)});
    }
    return index;
}

template <typename T>
FramePair<T> make_frame_pair(const std::vector<world::Episode>& episodes, const PairRef& ref) {
    const auto& ep = episodes[static_cast<std::size_t>(ref.episode)];
    const auto& now = ep.steps[static_cast<std::size_t>(ref.step)].obs;
    const auto& fut = ep.steps[static_cast<std::size_t>(ref.future)].obs;
    return FramePair<T>{rgb_tensor<T>(now), rgb_tensor<T>(fut), depth_tensor<T>(now),
                        depth_tensor<T>(fut)};
}

// ---------------------------------------------------------------------------
// Latent learner training driver. Holds the RNG streams so a checkpoint can
// resume bit-identically.
// ---------------------------------------------------------------------------

template <typename T>
struct LarnTraining {
    UniLarn<T> model;
    AdamW<T> opt;
    RngStream batch_rng;
    RngStream reseed_rng;
    std::int64_t step = 0;

    LarnTraining(const LarnConfig& cfg, std::uint64_t seed, T lr, T weight_decay)
        : model(cfg, seed),
          batch_rng(seed, "unilarn/batch"),
          reseed_rng(seed, "unilarn/reseed") {
        opt.hp.lr = lr;
        opt.hp.weight_decay = weight_decay;
    }
};

template <typename T>
struct LarnStepRow {
    std::int64_t step;
    double total, recon_rgb, recon_depth, vq_shared, vq_unified;
};

template <typename T>
std::vector<LarnStepRow<T>> run_larn_steps(LarnTraining<T>& tr,
                                           const std::vector<world::Episode>& episodes,
                                           const std::vector<PairRef>& pair_index, int steps,
                                           int batch_size) {
    std::vector<LarnStepRow<T>> rows;
    rows.reserve(static_cast<std::size_t>(steps));
    for (int s = 0; s < steps; ++s) {
        std::vector<FramePair<T>> batch;
        batch.reserve(static_cast<std::size_t>(batch_size));
        for (int b = 0; b < batch_size; ++b) {
            const auto& ref = pair_index[static_cast<std::size_t>(
                tr.batch_rng.next_below(pair_index.size()))];
            batch.push_back(make_frame_pair<T>(episodes, ref));
        }
        ++tr.step;
        auto m = tr.model.train_step(batch, tr.opt, tr.step, tr.reseed_rng);
        rows.push_back({tr.step, static_cast<double>(m.total), static_cast<double>(m.recon_rgb),
                        static_cast<double>(m.recon_depth), static_cast<double>(m.vq_shared),
                        static_cast<double>(m.vq_unified)});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Latent label extraction: one record per (episode, step).
// ---------------------------------------------------------------------------

template <typename T>
std::vector<LatentRecord> extract_latent_records(UniLarn<T>& model,
                                                 const std::vector<world::Episode>& episodes,
                                                 int temporal_offset) {
    std::vector<LatentRecord> records;
    auto index = build_pair_index(episodes, temporal_offset);
    records.reserve(index.size());
    for (const auto& ref : index) {
        auto codes = model.encode_codes(make_frame_pair<T>(episodes, ref));
        LatentRecord rec;
        rec.episode = static_cast<std::uint32_t>(ref.episode);
        rec.step = static_cast<std::uint16_t>(ref.step);
        rec.rgb.assign(codes.rgb.begin(), codes.rgb.end());
        rec.depth.assign(codes.depth.begin(), codes.depth.end());
        rec.unified.assign(codes.unified.begin(), codes.unified.end());
        records.push_back(std::move(rec));
    }
    return records;
}

// Merge per-modality caches from two single-modality models: rgb and depth
// columns come from their own models, the conditioning column follows rgb.
inline std::vector<LatentRecord> merge_latent_records(const std::vector<LatentRecord>& rgb,
                                                      const std::vector<LatentRecord>& depth) {
    if (rgb.size() != depth.size())
        throw std::invalid_argument("merge_latent_records: cache sizes differ");
    std::vector<LatentRecord> merged = rgb;
    for (std::size_t i = 0; i < merged.size(); ++i) {
        merged[i].depth = depth[i].depth;
        merged[i].unified = rgb[i].rgb;
    }
    return merged;
}

// Record lookup by (episode, step): records are emitted densely in order.
struct CacheIndex {
    std::vector<int> episode_offset;
    int total = 0;

    static CacheIndex build(const std::vector<world::Episode>& episodes) {
        CacheIndex idx;
        int off = 0;
        for (const auto& ep : episodes) {
            idx.episode_offset.push_back(off);
            off += static_cast<int>(ep.steps.size());
        }
        idx.total = off;
        return idx;
    }

    int record_at(int episode, int step) const {
        return episode_offset[static_cast<std::size_t>(episode)] + step;
    }
};

// ---------------------------------------------------------------------------
// Latent pretraining driver.
// ---------------------------------------------------------------------------

enum class PretrainMode : int {
    cross = 0,        // condition on unified, predict a uniformly sampled kind
    unified_only = 1, // condition on unified, predict unified
    single_rgb = 2,   // single-modality baseline cells
    single_depth = 3,
    alternate = 4,    // per-batch alternation between rgb and depth supervision
    multi = 5,        // predict all three kinds every batch
};

template <typename T>
struct LactTraining {
    UniLact<T> model;
    AdamW<T> opt;
    RngStream batch_rng;
    RngStream kind_rng;
    std::int64_t step = 0;

    LactTraining(const LactConfig& cfg, std::uint64_t seed, T lr, T weight_decay,
                 const char* stage)
        : model(cfg, seed),
          batch_rng(seed, std::string(stage) + "/batch"),
          kind_rng(seed, std::string(stage) + "/kind") {
        opt.hp.lr = lr;
        opt.hp.weight_decay = weight_decay;
    }
};

template <typename T>
LactSample<T> make_lact_sample(const std::vector<world::Episode>& episodes,
                               const std::vector<LatentRecord>& records, int record_index,
                               bool cond_from_kind, LatentKind kind) {
    const auto& rec = records[static_cast<std::size_t>(record_index)];
    const auto& ep = episodes[rec.episode];
    const auto& st = ep.steps[rec.step];
    LactSample<T> sample;
    sample.rgb = rgb_tensor<T>(st.obs);
    sample.instruction = ep.instruction;
    const auto& cond_col = cond_from_kind
                               ? (kind == LatentKind::rgb ? rec.rgb
                                  : kind == LatentKind::depth ? rec.depth
                                                              : rec.unified)
                               : rec.unified;
    sample.cond_codes.assign(cond_col.begin(), cond_col.end());
    sample.targets.rgb.assign(rec.rgb.begin(), rec.rgb.end());
    sample.targets.depth.assign(rec.depth.begin(), rec.depth.end());
    sample.targets.unified.assign(rec.unified.begin(), rec.unified.end());
    sample.dp = {static_cast<T>(st.action.dp[0]), static_cast<T>(st.action.dp[1]),
                 static_cast<T>(st.action.dp[2])};
    sample.dr = {static_cast<T>(st.action.dr[0]), static_cast<T>(st.action.dr[1]),
                 static_cast<T>(st.action.dr[2])};
    sample.grip = static_cast<T>(st.action.grip);
    return sample;
}

struct PretrainRow {
    std::int64_t step;
    double nll;
    LatentKind kind;
};

template <typename T>
std::vector<PretrainRow> run_pretrain_steps(LactTraining<T>& tr,
                                            const std::vector<world::Episode>& episodes,
                                            const std::vector<LatentRecord>& records, int steps,
                                            int batch_size, PretrainMode mode) {
    std::vector<PretrainRow> rows;
    rows.reserve(static_cast<std::size_t>(steps));
    for (int s = 0; s < steps; ++s) {
        LatentKind kind = LatentKind::unified;
        bool cond_from_kind = false;
        switch (mode) {
            case PretrainMode::cross: kind = sample_target_kind(tr.kind_rng); break;
            case PretrainMode::unified_only: kind = LatentKind::unified; break;
            case PretrainMode::single_rgb: kind = LatentKind::rgb; break;
            case PretrainMode::single_depth: kind = LatentKind::depth; break;
            case PretrainMode::alternate:
                kind = (tr.step % 2 == 0) ? LatentKind::rgb : LatentKind::depth;
                cond_from_kind = true;
                break;
            case PretrainMode::multi: kind = LatentKind::unified; break;
        }
        std::vector<LactSample<T>> batch;
        batch.reserve(static_cast<std::size_t>(batch_size));
        for (int b = 0; b < batch_size; ++b) {
            const int pick = static_cast<int>(tr.batch_rng.next_below(records.size()));
            batch.push_back(make_lact_sample<T>(episodes, records, pick, cond_from_kind, kind));
        }
        ++tr.step;
        auto m = pretrain_step(tr.model, batch, kind, mode == PretrainMode::multi, tr.opt);
        rows.push_back({tr.step, static_cast<double>(m.nll), kind});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Action fine-tuning driver.
// ---------------------------------------------------------------------------

struct FinetuneOptions {
    int steps = 400;
    int batch = 8;
    int demos = 90;  // episodes with action supervision
    LossMode loss_mode = LossMode::sum;
    double lambda = 0.5;
    LatentKind latent_kind = LatentKind::unified;
    bool include_latent = true;  // false for the no-latent baseline
};

struct FinetuneRow {
    std::int64_t step;
    double total, latent, action;
};

// Generalized fine-tune objective used by the driver: the headline
// configuration is latent_kind = unified with the plain sum.
template <typename T>
FinetuneLossParts<T> finetune_loss_ext(Tape<T>& tape, UniLact<T>& model,
                                       const std::vector<LactSample<T>>& batch,
                                       const FinetuneOptions& opts) {
    if (batch.empty()) shape_error("finetune", "empty batch");
    const int k = model.config().codebook_entries;
    Tensor<T> latent_sum, action_sum;
    for (const auto& sample : batch) {
        const auto& targets = codes_for_kind<T>(sample.targets, opts.latent_kind);
        auto seq = model.build_token_sequence(
            tape, sample.rgb, sample.instruction, sample.cond_codes,
            to_global_codes<T>(targets, opts.latent_kind, k), opts.latent_kind, Phase::finetune);
        auto fwd = model.forward(tape, seq);
        if (opts.include_latent) {
            auto nll = model.latent_nll(tape, fwd.latent_logits, targets, opts.latent_kind);
            latent_sum = latent_sum.defined() ? add(tape, latent_sum, nll) : nll;
        }
        auto decoded = model.decode_action(tape, fwd.query_hidden);
        auto act = action_loss<T>(tape, decoded, sample.dp, sample.dr, sample.grip);
        action_sum = action_sum.defined() ? add(tape, action_sum, act.total) : act.total;
    }
    const T inv_b = T(1) / static_cast<T>(batch.size());
    FinetuneLossParts<T> parts;
    parts.latent = opts.include_latent ? scale(tape, latent_sum, inv_b) : Tensor<T>::scalar(T(0));
    parts.action = scale(tape, action_sum, inv_b);
    if (!opts.include_latent) {
        parts.total = parts.action;
    } else if (opts.loss_mode == LossMode::convex) {
        parts.total = add(tape, scale(tape, parts.latent, static_cast<T>(opts.lambda)),
                          scale(tape, parts.action, T(1) - static_cast<T>(opts.lambda)));
    } else {
        parts.total = add(tape, parts.latent, parts.action);
    }
    return parts;
}

template <typename T>
std::vector<FinetuneRow> run_finetune_steps(LactTraining<T>& tr,
                                            const std::vector<world::Episode>& episodes,
                                            const std::vector<LatentRecord>& records,
                                            const FinetuneOptions& opts) {
    // records belonging to the demo subset
    std::vector<int> demo_records;
    const int demo_count = std::min<int>(opts.demos, static_cast<int>(episodes.size()));
    for (int i = 0; i < static_cast<int>(records.size()); ++i)
        if (static_cast<int>(records[static_cast<std::size_t>(i)].episode) < demo_count)
            demo_records.push_back(i);
    if (demo_records.empty()) shape_error("finetune", "no demo records");

    std::vector<FinetuneRow> rows;
    rows.reserve(static_cast<std::size_t>(opts.steps));
    for (int s = 0; s < opts.steps; ++s) {
        std::vector<LactSample<T>> batch;
        batch.reserve(static_cast<std::size_t>(opts.batch));
        for (int b = 0; b < opts.batch; ++b) {
            const int pick = demo_records[static_cast<std::size_t>(
                tr.batch_rng.next_below(demo_records.size()))];
            batch.push_back(make_lact_sample<T>(episodes, records, pick,
                                                opts.latent_kind != LatentKind::unified,
                                                opts.latent_kind));
        }
        ++tr.step;
        Tape<T> tape;
        auto parts = finetune_loss_ext(tape, tr.model, batch, opts);
        if (!std::isfinite(parts.total.item()))
            throw std::runtime_error("finetune: non-finite loss at step " + std::to_string(tr.step));
        tr.model.params().zero_grad();
        tape.backward(parts.total);
        UniLact<T>::check_finite_grads(tr.model.params());
        auto tensors = tr.model.params().tensors();
        tr.opt.step(tensors);
        rows.push_back({tr.step, static_cast<double>(parts.total.item()),
                        static_cast<double>(parts.latent.item()),
                        static_cast<double>(parts.action.item())});
    }
    return rows;
}

// ---------------------------------------------------------------------------
// Rollout evaluation.
// ---------------------------------------------------------------------------

template <typename T>
std::vector<RolloutOutcome> run_rollouts(UniLact<T>& model, const world::WorldConfig& wcfg,
                                         int per_task, std::uint64_t seed_base) {
    std::vector<RolloutOutcome> outcomes;
    outcomes.reserve(static_cast<std::size_t>(per_task) * world::kNumTaskKinds);
    for (int k = 0; k < world::kNumTaskKinds; ++k)
        for (int i = 0; i < per_task; ++i)
            outcomes.push_back(rollout_episode(
                model, seed_base + static_cast<std::uint64_t>(k) * 100000 + static_cast<std::uint64_t>(i),
                static_cast<world::TaskKind>(k), wcfg));
    return outcomes;
}

// Unweighted mean of per-task success rates.
inline double mean_task_success(const std::vector<RolloutOutcome>& outcomes) {
    double mean = 0;
    int kinds = 0;
    for (int k = 0; k < world::kNumTaskKinds; ++k) {
        int n = 0, ok = 0;
        for (const auto& o : outcomes)
            if (static_cast<int>(o.task) == k) {
                ++n;
                ok += o.success;
            }
        if (n > 0) {
            mean += static_cast<double>(ok) / n;
            ++kinds;
        }
    }
    return kinds ? mean / kinds : 0.0;
}

// ---------------------------------------------------------------------------
// Probe study: ridge regression from frozen latent embeddings to expert
// actions, split by episode.
// ---------------------------------------------------------------------------

struct ProbeStudy {
    ProbeResult unified, rgb, depth;
    double r2_dz_unified = 0, r2_dz_rgb = 0, r2_dz_depth = 0;
};

template <typename T>
ProbeStudy run_probe_study(UniLarn<T>& model, const std::vector<world::Episode>& episodes,
                           const std::vector<LatentRecord>& records, double ridge_lambda,
                           double train_fraction) {
    const int n_train_eps = std::max(1, static_cast<int>(static_cast<double>(episodes.size()) *
                                                         train_fraction));
    auto features_for = [&](const LatentRecord& rec, LatentKind kind) {
        const auto& col = (kind == LatentKind::rgb) ? rec.rgb
                          : (kind == LatentKind::depth) ? rec.depth
                                                        : rec.unified;
        auto& book = (kind == LatentKind::unified && model.config().mode == LarnMode::unified)
                         ? model.unified_codebook()
                         : model.shared_codebook();
        std::vector<double> f;
        f.reserve(col.size() * static_cast<std::size_t>(model.config().latent_dim));
        for (auto idx : col) {
            auto row = book.lookup_values(static_cast<int>(idx));
            for (auto v : row) f.push_back(static_cast<double>(v));
        }
        return f;
    };

    ProbeStudy study;
    for (LatentKind kind : {LatentKind::unified, LatentKind::rgb, LatentKind::depth}) {
        std::vector<std::vector<double>> x_train, y_train, x_test, y_test;
        for (const auto& rec : records) {
            const auto& ep = episodes[rec.episode];
            const auto& act = ep.steps[rec.step].action;
            std::vector<double> y{act.dp[0], act.dp[1], act.dp[2], act.dr[0],
                                  act.dr[1], act.dr[2], static_cast<double>(act.grip)};
            auto x = features_for(rec, kind);
            if (static_cast<int>(rec.episode) < n_train_eps) {
                x_train.push_back(std::move(x));
                y_train.push_back(std::move(y));
            } else {
                x_test.push_back(std::move(x));
                y_test.push_back(std::move(y));
            }
        }
        auto result = fit_linear_probe(x_train, y_train, x_test, y_test, ridge_lambda);
        result.latent_kind = latent_kind_name(kind);
        const double r2_dz = result.r2[2];
        switch (kind) {
            case LatentKind::unified: study.unified = result; study.r2_dz_unified = r2_dz; break;
            case LatentKind::rgb: study.rgb = result; study.r2_dz_rgb = r2_dz; break;
            case LatentKind::depth: study.depth = result; study.r2_dz_depth = r2_dz; break;
        }
    }
    return study;
}

// ---------------------------------------------------------------------------
// Stage entry points (manifests, CSVs, checkpoints). Implemented in
// pipeline.cpp; `run_subcommand` dispatches by name and returns an exit code.
// ---------------------------------------------------------------------------

void stage_gen_data(const RunConfig& cfg);
void stage_train_unilarn(const RunConfig& cfg);
void stage_extract_latents(const RunConfig& cfg);
void stage_pretrain(const RunConfig& cfg);
void stage_finetune(const RunConfig& cfg);
void stage_eval(const RunConfig& cfg);
void stage_probe(const RunConfig& cfg);
void stage_ablate(const RunConfig& cfg);

int run_subcommand(const std::string& name, const RunConfig& cfg);

// Deterministic CSV writers shared with the acceptance suite.
std::string format_decimal(double v);
void write_rollout_csv(const std::string& path, const std::vector<RolloutOutcome>& outcomes);

// Ablation grid output row.
struct AblationRow {
    std::string cell;
    std::string pretrain_regime;
    std::string finetune_regime;
    std::string latent_modality;
    int seed = 0;
    double lift = 0, place_near = 0, place_in = 0;
    double mean = 0;
    bool failed = false;
};

std::vector<AblationRow> run_ablation_grid(const RunConfig& cfg,
                                           const std::vector<world::Episode>& episodes);
void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows);

}  // namespace ulact
