#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <vector>

#include "ulact/unilact.hpp"
#include "ulact/world.hpp"

namespace ulact {

// ---------------------------------------------------------------------------
// Action fine-tuning: map the transformer output at the action-query position
// to a 7-DoF delta, train with L1 on the continuous part and BCE on the grip.
// ---------------------------------------------------------------------------

enum class LossMode : int { sum = 0, convex = 1 };

template <typename T>
struct ActionLossParts {
    Tensor<T> total;
    Tensor<T> l1_dp, l1_dr, bce_grip;
};

template <typename T>
ActionLossParts<T> action_loss(Tape<T>& tape, const typename UniLact<T>::DecodedAction& pred,
                               const std::array<T, 3>& dp, const std::array<T, 3>& dr, T grip) {
    auto dp_pred = slice(tape, pred.continuous, {0, 0}, {1, 3});
    auto dr_pred = slice(tape, pred.continuous, {0, 3}, {1, 3});
    auto dp_tgt = Tensor<T>::leaf({1, 3}, {dp[0], dp[1], dp[2]}, false);
    auto dr_tgt = Tensor<T>::leaf({1, 3}, {dr[0], dr[1], dr[2]}, false);
    auto g_tgt = Tensor<T>::leaf({1, 1}, {grip}, false);
    ActionLossParts<T> parts;
    parts.l1_dp = l1_loss(tape, dp_pred, dp_tgt);
    parts.l1_dr = l1_loss(tape, dr_pred, dr_tgt);
    parts.bce_grip = bce_logits(tape, pred.grip_logit, g_tgt);
    parts.total = add(tape, add(tape, parts.l1_dp, parts.l1_dr), parts.bce_grip);
    return parts;
}

template <typename T>
struct FinetuneLossParts {
    Tensor<T> total;
    Tensor<T> latent;  // L_latent over unified targets
    Tensor<T> action;  // L1(dp) + L1(dr) + BCE(g), batch mean
};

// Joint fine-tuning objective. The written form is the plain sum
// L_latent + L_action; the convex mode exposes lambda * L_latent +
// (1 - lambda) * L_action instead.
template <typename T>
FinetuneLossParts<T> finetune_loss(Tape<T>& tape, UniLact<T>& model,
                                   const std::vector<LactSample<T>>& batch, LossMode mode,
                                   T lambda) {
    if (batch.empty()) shape_error("finetune", "empty batch");
    const int k = model.config().codebook_entries;
    Tensor<T> latent_sum, action_sum;
    for (const auto& sample : batch) {
        auto seq = model.build_token_sequence(
            tape, sample.rgb, sample.instruction, sample.cond_codes,
            to_global_codes<T>(sample.targets.unified, LatentKind::unified, k),
            LatentKind::unified, Phase::finetune);
        auto fwd = model.forward(tape, seq);
        auto nll = model.latent_nll(tape, fwd.latent_logits, sample.targets.unified,
                                    LatentKind::unified);
        latent_sum = latent_sum.defined() ? add(tape, latent_sum, nll) : nll;

        auto decoded = model.decode_action(tape, fwd.query_hidden);
        auto act = action_loss<T>(tape, decoded, sample.dp, sample.dr, sample.grip);
        action_sum = action_sum.defined() ? add(tape, action_sum, act.total) : act.total;
    }
    const T inv_b = T(1) / static_cast<T>(batch.size());
    FinetuneLossParts<T> parts;
    parts.latent = scale(tape, latent_sum, inv_b);
    parts.action = scale(tape, action_sum, inv_b);
    if (mode == LossMode::convex) {
        parts.total = add(tape, scale(tape, parts.latent, lambda),
                          scale(tape, parts.action, T(1) - lambda));
    } else {
        parts.total = add(tape, parts.latent, parts.action);
    }
    return parts;
}

template <typename T>
struct FinetuneMetrics {
    T total = 0, latent = 0, action = 0;
};

template <typename T>
FinetuneMetrics<T> finetune_step(UniLact<T>& model, const std::vector<LactSample<T>>& batch,
                                 AdamW<T>& opt, LossMode mode = LossMode::sum, T lambda = T(0.5)) {
    Tape<T> tape;
    auto parts = finetune_loss(tape, model, batch, mode, lambda);
    if (!std::isfinite(parts.total.item()))
        throw std::runtime_error("unilact: non-finite fine-tune loss");
    model.params().zero_grad();
    tape.backward(parts.total);
    UniLact<T>::check_finite_grads(model.params());
    auto tensors = model.params().tensors();
    opt.step(tensors);
    return {parts.total.item(), parts.latent.item(), parts.action.item()};
}

// ---------------------------------------------------------------------------
// RGB-only inference: greedily decode the unified latent tokens, then decode
// the action at the query position. No depth array is reachable from here.
// ---------------------------------------------------------------------------

template <typename T>
struct InferenceResult {
    world::RobotAction action;
    std::vector<int> predicted_codes;  // unified, local indices
    bool finite = true;
};

template <typename T>
InferenceResult<T> infer_action(UniLact<T>& model, const Tensor<T>& rgb, std::uint32_t instruction,
                                const std::vector<int>& cond_codes, float max_step) {
    const int k = model.config().codebook_entries;
    const int n = model.config().num_latents;
    InferenceResult<T> out;

    std::vector<int> decoded_local;
    for (int i = 0; i < n; ++i) {
        Tape<T> tape;
        tape.set_recording(false);
        auto seq = model.build_token_sequence(
            tape, rgb, instruction, cond_codes,
            to_global_codes<T>(decoded_local, LatentKind::unified, k), LatentKind::unified,
            Phase::pretrain);
        auto fwd = model.forward(tape, seq);
        // greedy over the unified slice of the last prediction row
        const int row = static_cast<int>(decoded_local.size());
        const T* logits = fwd.latent_logits.value().data() +
                          static_cast<std::size_t>(row) * model.config().vocab() +
                          vocab_offset(LatentKind::unified, k);
        int best = 0;
        for (int c = 1; c < k; ++c)
            if (logits[c] > logits[best]) best = c;
        decoded_local.push_back(best);
    }
    out.predicted_codes = decoded_local;

    Tape<T> tape;
    tape.set_recording(false);
    auto seq = model.build_token_sequence(
        tape, rgb, instruction, cond_codes,
        to_global_codes<T>(decoded_local, LatentKind::unified, k), LatentKind::unified,
        Phase::finetune);
    auto fwd = model.forward(tape, seq);
    auto decoded = model.decode_action(tape, fwd.query_hidden);

    const auto& c = decoded.continuous.value();
    const T logit = decoded.grip_logit.value()[0];
    for (int i = 0; i < 3; ++i) {
        const float v = static_cast<float>(c[static_cast<std::size_t>(i)]);
        out.action.dp[static_cast<std::size_t>(i)] = std::clamp(v, -max_step, max_step);
        out.action.dr[static_cast<std::size_t>(i)] = static_cast<float>(c[static_cast<std::size_t>(i) + 3]);
        if (!std::isfinite(v)) out.finite = false;
    }
    if (!std::isfinite(static_cast<float>(logit))) out.finite = false;
    out.action.grip = (logit >= T(0)) ? 1 : 0;  // sigmoid(logit) >= 0.5
    return out;
}

// ---------------------------------------------------------------------------
// Closed-loop rollouts. The harness is policy-agnostic: it feeds world states
// to a callback and applies whatever action comes back, so the scripted
// expert and learned models run through identical accounting.
// ---------------------------------------------------------------------------

struct RolloutOutcome {
    world::TaskKind task = world::TaskKind::lift;
    std::uint64_t seed = 0;
    bool success = false;
    int steps_used = 0;
    float final_error = 0;
    std::vector<world::WorldState> trajectory;
};

inline float task_error(const world::WorldState& s, const world::WorldConfig& cfg) {
    const auto& t = s.objects[static_cast<std::size_t>(s.target)];
    const auto& r = s.objects[static_cast<std::size_t>(s.ref)];
    auto dist = [](float ax, float ay, float bx, float by) {
        return std::sqrt((ax - bx) * (ax - bx) + (ay - by) * (ay - by));
    };
    switch (s.task) {
        case world::TaskKind::lift:
            if (t.held) return std::max(0.0f, cfg.lift_threshold - t.lift);
            return cfg.lift_threshold + dist(s.ex, s.ey, t.x, t.y);
        case world::TaskKind::place_near:
            return std::max(0.0f, dist(t.x, t.y, r.x, r.y) - cfg.near_radius);
        case world::TaskKind::place_in:
            return std::max(0.0f, dist(t.x, t.y, r.x, r.y) - cfg.in_radius);
    }
    return 0;
}

template <typename PolicyFn>
RolloutOutcome rollout_core(PolicyFn&& policy, std::uint64_t seed, world::TaskKind task,
                            const world::WorldConfig& cfg) {
    RolloutOutcome out;
    out.task = task;
    out.seed = seed;
    world::WorldState s = world::init_state(seed, task, cfg);
    out.trajectory.push_back(s);
    for (int step = 0; step < cfg.horizon; ++step) {
        if (world::task_done(s, cfg)) {
            out.success = true;
            break;
        }
        bool finite = true;
        world::RobotAction a = policy(s, finite);
        if (!finite) {
            out.success = false;
            break;
        }
        s = world::step_world(s, a, cfg);
        out.trajectory.push_back(s);
        out.steps_used = step + 1;
    }
    if (!out.success) out.success = world::task_done(s, cfg);
    out.final_error = task_error(s, cfg);
    return out;
}

template <typename T>
RolloutOutcome rollout_episode(UniLact<T>& model, std::uint64_t seed, world::TaskKind task,
                               const world::WorldConfig& cfg) {
    std::vector<int> codes = null_latent_codes(model.config().num_latents,
                                               model.config().codebook_entries);
    auto policy = [&](const world::WorldState& s, bool& finite) {
        auto obs = world::render_observation(s, cfg);
        auto result = infer_action<T>(model, rgb_tensor<T>(obs), world::instruction_code(s), codes,
                                      cfg.max_step);
        finite = result.finite;
        codes = result.predicted_codes;  // next step conditions on this prediction
        return result.action;
    };
    return rollout_core(policy, seed, task, cfg);
}

inline RolloutOutcome rollout_expert(std::uint64_t seed, world::TaskKind task,
                                     const world::WorldConfig& cfg) {
    auto policy = [&](const world::WorldState& s, bool& finite) {
        finite = true;
        return world::scripted_expert_action(s, cfg);
    };
    return rollout_core(policy, seed, task, cfg);
}

}  // namespace ulact
