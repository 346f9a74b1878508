#pragma once

#include <cstdint>
#include <string>

#include "ulact/unilact.hpp"

namespace ulact {

enum class Precision : int { f32 = 0, f64 = 1 };
enum class PretrainRegime : int { cross = 0, unified = 1 };  // U->{U,R,D} vs U->U

// Every tunable of the pipeline as flat `section.key = value` lines.
// Unknown keys and out-of-range values are rejected at load.
struct RunConfig {
    // data
    std::uint64_t seed = 1;
    int episodes = 300;
    int frame_size = 32;
    int horizon = 40;
    // world
    double max_step = 0.08;
    double lift_threshold = 0.05;
    // latent geometry
    int temporal_offset = 3;  // latent.H
    int num_latents = 4;      // latent.N
    int codebook_entries = 32;  // latent.K
    int latent_dim = 64;        // latent.D
    // unilarn
    int larn_layers = 2;
    int larn_heads = 4;
    int larn_width = 64;
    int larn_patch = 4;
    double beta = 0.25;
    double larn_lr = 1e-3;
    int larn_steps = 300;
    int larn_batch = 8;
    int dead_code_steps = 100;
    LarnMode larn_mode = LarnMode::unified;
    // unilact
    int lact_layers = 4;
    int lact_heads = 4;
    int lact_width = 128;
    int visual_patch = 8;
    int action_hidden = 128;
    double lact_lr = 1e-3;
    // pretrain
    int pretrain_steps = 400;
    int pretrain_batch = 8;
    PretrainRegime pretrain_regime = PretrainRegime::cross;
    bool multi_task = false;
    // finetune
    int finetune_steps = 400;
    int finetune_batch = 8;
    int finetune_demos = 90;
    // loss combination
    int lambda_mode = 0;  // 0 = sum (as written), 1 = convex
    double lambda = 0.5;
    // training
    Precision precision = Precision::f32;
    double weight_decay = 1e-4;
    // eval
    int eval_rollouts = 20;  // per task
    std::uint64_t eval_seed_base = 10000;
    // probe
    double ridge_lambda = 1e-3;
    double probe_train_fraction = 0.8;
    // ablation grid
    int ablate_seeds = 3;
    int ablate_larn_steps = 220;
    int ablate_pretrain_steps = 260;
    int ablate_finetune_steps = 260;
    int ablate_batch = 4;
    int ablate_rollouts = 10;  // per task per seed
    int ablate_lact_width = 96;
    int ablate_lact_layers = 3;
    int ablate_demos = 90;
    int ablate_episodes = 150;
    int ablate_threads = 2;
    // paths
    std::string out_dir = "out";
    std::string dataset_path;       // default: <out_dir>/dataset.ulds
    std::string latent_cache_path;  // default: <out_dir>/latents.ullc
    std::string unilarn_ckpt;       // default: <out_dir>/unilarn.ulck
    std::string pretrain_ckpt;      // default: <out_dir>/pretrain.ulck
    std::string policy_ckpt;        // default: <out_dir>/policy.ulck

    std::string dataset() const { return dataset_path.empty() ? out_dir + "/dataset.ulds" : dataset_path; }
    std::string latent_cache() const {
        return latent_cache_path.empty() ? out_dir + "/latents.ullc" : latent_cache_path;
    }
    std::string unilarn_checkpoint() const {
        return unilarn_ckpt.empty() ? out_dir + "/unilarn.ulck" : unilarn_ckpt;
    }
    std::string pretrain_checkpoint() const {
        return pretrain_ckpt.empty() ? out_dir + "/pretrain.ulck" : pretrain_ckpt;
    }
    std::string policy_checkpoint() const {
        return policy_ckpt.empty() ? out_dir + "/policy.ulck" : policy_ckpt;
    }

    world::WorldConfig world_config() const {
        world::WorldConfig w;
        w.frame_size = frame_size;
        w.horizon = horizon;
        w.max_step = static_cast<float>(max_step);
        w.lift_threshold = static_cast<float>(lift_threshold);
        return w;
    }

    LarnConfig larn_config() const {
        LarnConfig c;
        c.frame_size = frame_size;
        c.patch = larn_patch;
        c.temporal_offset = temporal_offset;
        c.num_latents = num_latents;
        c.codebook_entries = codebook_entries;
        c.latent_dim = latent_dim;
        c.layers = larn_layers;
        c.heads = larn_heads;
        c.width = larn_width;
        c.beta = beta;
        c.dead_code_steps = dead_code_steps;
        c.mode = larn_mode;
        return c;
    }

    LactConfig lact_config() const {
        LactConfig c;
        c.frame_size = frame_size;
        c.visual_patch = visual_patch;
        c.num_latents = num_latents;
        c.codebook_entries = codebook_entries;
        c.layers = lact_layers;
        c.heads = lact_heads;
        c.width = lact_width;
        c.action_hidden = action_hidden;
        return c;
    }
};

// Parse `section.key = value` lines ('#' starts a comment). Absent keys keep
// their defaults; ULACT_SEED in the environment overrides data.seed.
RunConfig parse_config_text(const std::string& text);
RunConfig parse_config_file(const std::string& path);

// Canonical flat rendering of every key, in fixed order.
std::string config_to_text(const RunConfig& cfg);

// Keys that determine tensor shapes and file formats; checkpoints refuse to
// load into a run whose structural signature differs.
std::string structural_signature(const RunConfig& cfg);

std::uint64_t config_hash(const RunConfig& cfg);

}  // namespace ulact
