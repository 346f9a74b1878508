#pragma once

#include <array>
#include <string>
#include <vector>

#include "ulact/nn.hpp"
#include "ulact/tensor.hpp"
#include "ulact/unilarn.hpp"
#include "ulact/world.hpp"

namespace ulact {

enum class Phase : int { pretrain = 0, finetune = 1 };

struct LactConfig {
    int frame_size = 32;
    int visual_patch = 8;       // coarser than the latent learner's patches
    int num_latents = 4;        // N
    int codebook_entries = 32;  // K, per-kind vocab slice
    int layers = 4;
    int heads = 4;
    int width = 128;
    int action_hidden = 128;
    double init_std = 0.02;

    int visual_tokens() const {
        return (frame_size / visual_patch) * (frame_size / visual_patch);
    }
    int vocab() const { return 3 * codebook_entries; }
};

// Head vocabulary is one range per latent kind: [unified | rgb | depth].
inline int vocab_offset(LatentKind kind, int entries) {
    switch (kind) {
        case LatentKind::unified: return 0;
        case LatentKind::rgb: return entries;
        case LatentKind::depth: return 2 * entries;
    }
    return 0;
}

struct TokenLayout {
    int instr_len = 1;
    int visual_len = 0;
    int latent_len = 0;
    int bos_pos = 0;      // first generated position
    int target_count = 0; // teacher-forced target tokens present
    int query_pos = -1;   // action query position, -1 when absent
    int total = 0;
    int cond_len = 0;     // instruction + visual + input latent
    LatentKind target_kind = LatentKind::unified;
    Phase phase = Phase::pretrain;
};

template <typename T>
struct TokenSequence {
    Tensor<T> tokens;  // [total, width]
    TokenLayout layout;
};

// Start-of-episode conditioning: before any latent has been predicted the
// input slots hold a dedicated null code (index K in the input table).
inline std::vector<int> null_latent_codes(int num_latents, int entries) {
    return std::vector<int>(static_cast<std::size_t>(num_latents), entries);
}

template <typename T>
class UniLact {
public:
    UniLact(LactConfig cfg, std::uint64_t seed) : cfg_(cfg), params_(seed) {
        const int w = cfg.width;
        const int patch_dim = 3 * cfg.visual_patch * cfg.visual_patch;
        instr_kind_ = params_.normal("instr_kind", {world::kNumTaskKinds, w}, cfg.init_std);
        instr_target_ = params_.normal("instr_target", {world::kNumObjects, w}, cfg.init_std);
        instr_ref_ = params_.normal("instr_ref", {world::kNumObjects, w}, cfg.init_std);
        visual_embed_ = Linear<T>::create(params_, "visual_embed", patch_dim, w, cfg.init_std);
        visual_pos_ = params_.normal("visual_pos", {cfg.visual_tokens(), w}, cfg.init_std);
        latent_in_ = params_.normal("latent_in", {cfg.codebook_entries + 1, w}, cfg.init_std);
        latent_in_pos_ = params_.normal("latent_in_pos", {cfg.num_latents, w}, cfg.init_std);
        target_embed_ = params_.normal("target_embed", {cfg.vocab(), w}, cfg.init_std);
        bos_ = params_.normal("bos", {1, w}, cfg.init_std);
        action_query_ = params_.normal("action_query", {1, w}, cfg.init_std);
        gen_pos_ = params_.normal("gen_pos", {cfg.num_latents + 2, w}, cfg.init_std);
        trunk_ = Transformer<T>::create(params_, "trunk", cfg.layers, w, cfg.heads, cfg.init_std);
        latent_head_ = Linear<T>::create(params_, "latent_head", w, cfg.vocab(), cfg.init_std);
        act_fc1_ = Linear<T>::create(params_, "action.fc1", w, cfg.action_hidden, cfg.init_std);
        act_fc2_ = Linear<T>::create(params_, "action.fc2", cfg.action_hidden, cfg.action_hidden,
                                     cfg.init_std);
        act_cont_ = Linear<T>::create(params_, "action.cont", cfg.action_hidden, 6, cfg.init_std);
        act_grip_ = Linear<T>::create(params_, "action.grip", cfg.action_hidden, 1, cfg.init_std);
    }

    const LactConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return params_; }
    const ParamStore<T>& params() const { return params_; }

    // Assemble the multimodal context. Depth never appears here: the visual
    // segment embeds RGB patches only, and geometry enters solely through the
    // conditioning codes (and, in training, the prediction targets).
    TokenSequence<T> build_token_sequence(Tape<T>& tape, const Tensor<T>& rgb,
                                          std::uint32_t instruction,
                                          const std::vector<int>& cond_codes,
                                          const std::vector<int>& target_codes_global,
                                          LatentKind target_kind, Phase phase) const {
        if (rgb.shape() != Shape{3, cfg_.frame_size, cfg_.frame_size})
            shape_error("build_token_sequence",
                        "rgb observation must be " + shape_str({3, cfg_.frame_size, cfg_.frame_size}) +
                            ", got " + shape_str(rgb.shape()));
        if (static_cast<int>(cond_codes.size()) != cfg_.num_latents)
            shape_error("build_token_sequence", "missing conditioning latent: expected " +
                                                    std::to_string(cfg_.num_latents) + " codes, got " +
                                                    std::to_string(cond_codes.size()));
        if (static_cast<int>(target_codes_global.size()) > cfg_.num_latents)
            shape_error("build_token_sequence", "too many target tokens");

        const int kind = static_cast<int>(world::instruction_task(instruction));
        const int tgt = world::instruction_target(instruction);
        const int ref = world::instruction_ref(instruction);
        auto instr = add(tape, embedding(tape, instr_kind_, {kind}),
                         add(tape, embedding(tape, instr_target_, {tgt}),
                             embedding(tape, instr_ref_, {ref})));

        auto visual = add(tape, visual_embed_(tape, patchify(tape, rgb, cfg_.visual_patch)),
                          visual_pos_);
        auto latent_in = add(tape, embedding(tape, latent_in_, cond_codes), latent_in_pos_);

        std::vector<Tensor<T>> parts{instr, visual, latent_in};
        parts.push_back(add_row(tape, bos_, gen_pos_, 0));
        for (std::size_t i = 0; i < target_codes_global.size(); ++i)
            parts.push_back(add_row(tape,
                                    embedding(tape, target_embed_, {target_codes_global[i]}),
                                    gen_pos_, static_cast<int>(i) + 1));
        TokenLayout layout;
        layout.visual_len = cfg_.visual_tokens();
        layout.latent_len = cfg_.num_latents;
        layout.cond_len = layout.instr_len + layout.visual_len + layout.latent_len;
        layout.bos_pos = layout.cond_len;
        layout.target_count = static_cast<int>(target_codes_global.size());
        layout.target_kind = target_kind;
        layout.phase = phase;
        if (phase == Phase::finetune) {
            parts.push_back(add_row(tape, action_query_, gen_pos_, cfg_.num_latents + 1));
            layout.query_pos = layout.bos_pos + 1 + layout.target_count;
        }

        TokenSequence<T> seq;
        seq.tokens = concat(tape, parts, 0);
        seq.layout = layout;
        seq.layout.total = seq.tokens.shape()[0];
        return seq;
    }

    struct Forward {
        Tensor<T> latent_logits;  // [positions, vocab]; row i predicts target i
        Tensor<T> query_hidden;   // [1, width] when an action query is present
    };

    // Conditioning tokens see each other bidirectionally; generated positions
    // (BOS, targets, action query) are causal.
    Forward forward(Tape<T>& tape, const TokenSequence<T>& seq) const {
        const auto& lay = seq.layout;
        auto bias = prefix_causal_bias<T>(lay.total, lay.cond_len);
        auto hidden = trunk_(tape, seq.tokens, &bias);
        Forward out;
        const int predict_rows = lay.target_count < cfg_.num_latents ? lay.target_count + 1
                                                                     : cfg_.num_latents;
        auto pred_hidden = slice(tape, hidden, {lay.bos_pos, 0}, {predict_rows, cfg_.width});
        out.latent_logits = latent_head_(tape, pred_hidden);
        if (lay.query_pos >= 0)
            out.query_hidden = slice(tape, hidden, {lay.query_pos, 0}, {1, cfg_.width});
        return out;
    }

    // Autoregressive NLL over one sequence, restricted to the vocabulary
    // range of the target kind: -sum_i log p(z_i | z_<i, obs, instruction).
    Tensor<T> latent_nll(Tape<T>& tape, const Tensor<T>& logits, const std::vector<int>& local_targets,
                         LatentKind kind) const {
        const int k = cfg_.codebook_entries;
        for (int idx : local_targets)
            if (idx < 0 || idx >= k)
                shape_error("latent_nll", "target index " + std::to_string(idx) + " out of vocab " +
                                              std::to_string(k));
        if (logits.shape()[0] < static_cast<int>(local_targets.size()))
            shape_error("latent_nll", "fewer logit rows than targets");
        auto rows = slice(tape, logits, {0, vocab_offset(kind, k)},
                          {static_cast<int>(local_targets.size()), k});
        return cross_entropy_logits(tape, rows, local_targets);
    }

    // 2-layer MLP with separate continuous and gripper heads.
    struct DecodedAction {
        Tensor<T> continuous;  // [1, 6]: dp then dr
        Tensor<T> grip_logit;  // [1, 1]
    };

    DecodedAction decode_action(Tape<T>& tape, const Tensor<T>& query_hidden) const {
        if (!query_hidden.defined())
            shape_error("decode_action", "no action-query position in this sequence");
        auto h = gelu(tape, act_fc1_(tape, query_hidden));
        h = gelu(tape, act_fc2_(tape, h));
        DecodedAction out;
        out.continuous = act_cont_(tape, h);
        out.grip_logit = act_grip_(tape, h);
        return out;
    }

    static void check_finite_grads(const ParamStore<T>& ps) {
        for (const auto& [name, t] : ps.entries())
            for (T g : t.grad())
                if (!std::isfinite(g))
                    throw std::runtime_error("unilact: non-finite gradient in parameter " + name);
    }

private:
    LactConfig cfg_;
    ParamStore<T> params_;
    Tensor<T> instr_kind_, instr_target_, instr_ref_;
    Linear<T> visual_embed_;
    Tensor<T> visual_pos_;
    Tensor<T> latent_in_, latent_in_pos_;
    Tensor<T> target_embed_, bos_, action_query_, gen_pos_;
    Transformer<T> trunk_;
    Linear<T> latent_head_;
    Linear<T> act_fc1_, act_fc2_, act_cont_, act_grip_;
};

// Uniform choice over the three latent kinds, one kind per batch.
inline LatentKind sample_target_kind(RngStream& rng) {
    return static_cast<LatentKind>(rng.next_below(3));
}

// ---------------------------------------------------------------------------
// Training samples and steps.
// ---------------------------------------------------------------------------

template <typename T>
struct LactSample {
    Tensor<T> rgb;  // [3, S, S]
    std::uint32_t instruction = 0;
    std::vector<int> cond_codes;  // unified conditioning, may include the null code
    LatentCodes targets;          // per-kind local target codes
    // action supervision (finetune)
    std::array<T, 3> dp{};
    std::array<T, 3> dr{};
    T grip = T(0);
};

template <typename T>
std::vector<int> to_global_codes(const std::vector<int>& local, LatentKind kind, int entries) {
    std::vector<int> g(local.size());
    for (std::size_t i = 0; i < local.size(); ++i) g[i] = local[i] + vocab_offset(kind, entries);
    return g;
}

template <typename T>
const std::vector<int>& codes_for_kind(const LatentCodes& codes, LatentKind kind) {
    switch (kind) {
        case LatentKind::rgb: return codes.rgb;
        case LatentKind::depth: return codes.depth;
        case LatentKind::unified: return codes.unified;
    }
    return codes.unified;
}

// Mean over the batch of per-sequence NLL for one target kind.
template <typename T>
Tensor<T> pretrain_batch_nll(Tape<T>& tape, UniLact<T>& model,
                             const std::vector<LactSample<T>>& batch, LatentKind kind) {
    if (batch.empty()) shape_error("pretrain", "empty batch");
    Tensor<T> total;
    for (const auto& sample : batch) {
        const auto& local = codes_for_kind<T>(sample.targets, kind);
        auto seq = model.build_token_sequence(
            tape, sample.rgb, sample.instruction, sample.cond_codes,
            to_global_codes<T>(local, kind, model.config().codebook_entries), kind,
            Phase::pretrain);
        auto fwd = model.forward(tape, seq);
        auto nll = model.latent_nll(tape, fwd.latent_logits, local, kind);
        total = total.defined() ? add(tape, total, nll) : nll;
    }
    return scale(tape, total, T(1) / static_cast<T>(batch.size()));
}

template <typename T>
struct PretrainMetrics {
    T nll = 0;
    LatentKind kind = LatentKind::unified;
};

// One optimizer step of latent pretraining. `multi_task` sums the NLL of all
// three kinds for every batch; otherwise the caller provides this batch's kind.
template <typename T>
PretrainMetrics<T> pretrain_step(UniLact<T>& model, const std::vector<LactSample<T>>& batch,
                                 LatentKind kind, bool multi_task, AdamW<T>& opt) {
    Tape<T> tape;
    Tensor<T> loss;
    if (multi_task) {
        for (LatentKind k : {LatentKind::unified, LatentKind::rgb, LatentKind::depth}) {
            auto nll = pretrain_batch_nll(tape, model, batch, k);
            loss = loss.defined() ? add(tape, loss, nll) : nll;
        }
    } else {
        loss = pretrain_batch_nll(tape, model, batch, kind);
    }
    if (!std::isfinite(loss.item()))
        throw std::runtime_error("unilact: non-finite pretraining loss");
    model.params().zero_grad();
    tape.backward(loss);
    UniLact<T>::check_finite_grads(model.params());
    auto tensors = model.params().tensors();
    opt.step(tensors);
    return {loss.item(), kind};
}

}  // namespace ulact
