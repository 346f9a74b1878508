// End-to-end acceptance suite. Each criterion prints one PASS/FAIL line; the
// process exits nonzero when any criterion fails. Runs the real pipeline at
// reduced-but-honest budgets and asserts the directional claims on means.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

#include "ulact/binio.hpp"
#include "ulact/config.hpp"
#include "ulact/evalharness.hpp"
#include "ulact/pipeline.hpp"
#include "ulact/policy.hpp"

using namespace ulact;
using Clock = std::chrono::steady_clock;

namespace {

int g_failures = 0;

void report(int criterion, const std::string& name, bool pass, const std::string& detail,
            double seconds) {
    std::printf("%s criterion %d (%s): %s [%.1f s]\n", pass ? "PASS" : "FAIL", criterion,
                name.c_str(), detail.c_str(), seconds);
    std::fflush(stdout);
    if (!pass) ++g_failures;
}

struct Timer {
    Clock::time_point start = Clock::now();
    double seconds() const { return std::chrono::duration<double>(Clock::now() - start).count(); }
};

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.4g", v);
    return buf;
}

const std::string kOutDir = "acceptance_out";

LarnConfig small_larn() {
    // full architecture, reduced geometry, used by the analytic criteria
    LarnConfig cfg;
    cfg.frame_size = 16;
    cfg.patch = 4;
    cfg.num_latents = 2;
    cfg.codebook_entries = 8;
    cfg.latent_dim = 16;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.width = 32;
    return cfg;
}

LactConfig small_lact() {
    LactConfig cfg;
    cfg.frame_size = 16;
    cfg.visual_patch = 8;
    cfg.num_latents = 4;
    cfg.codebook_entries = 8;
    cfg.layers = 2;
    cfg.heads = 2;
    cfg.width = 32;
    cfg.action_hidden = 32;
    return cfg;
}

template <typename T>
FramePair<T> random_pair(RngStream& rng, int s) {
    auto frame = [&](int ch) {
        std::vector<T> data(static_cast<std::size_t>(ch) * s * s);
        for (auto& v : data) v = static_cast<T>(rng.next_unit());
        return Tensor<T>::leaf({ch, s, s}, std::move(data), false);
    };
    return FramePair<T>{frame(3), frame(3), frame(1), frame(1)};
}

// ---------------------------------------------------------------------------
// 1. gradient correctness of both full losses
// ---------------------------------------------------------------------------

void criterion_1() {
    Timer timer;
    bool pass = true;
    std::string detail;

    {  // full latent-learner loss under the frozen-quantizer check
        UniLarn<double> model(small_larn(), 11);
        RngStream rng(12, "acc/grad_larn");
        std::vector<FramePair<double>> batch{random_pair<double>(rng, 16),
                                             random_pair<double>(rng, 16)};
        VqFreeze<double> freeze;
        Tape<double> capture;
        auto live = model.loss(capture, batch, &freeze);
        freeze.rewind();
        Tape<double> replay;
        replay.set_recording(false);
        auto frozen = model.loss(replay, batch, &freeze);
        const double tie = std::abs(frozen.total.item() - live.total.item());
        RngStream coords(13, "acc/grad_larn_coords");
        auto rep = finite_diff_check<double>(
            [&](Tape<double>& t) {
                freeze.rewind();
                return model.loss(t, batch, &freeze).total;
            },
            model.params().entries(), 64, 1e-5, coords);
        pass = pass && rep.all_finite && rep.max_rel_err < 1e-4 && tie < 1e-10;
        detail += "unilarn max_rel_err " + fmt(rep.max_rel_err) + " (frozen/live tie " + fmt(tie) + ")";
    }

    {  // full fine-tune loss: latent NLL + action terms, smooth end to end
        UniLact<double> model(small_lact(), 14);
        RngStream rng(15, "acc/grad_lact");
        std::vector<LactSample<double>> batch;
        for (int i = 0; i < 2; ++i) {
            LactSample<double> s;
            std::vector<double> img(3 * 16 * 16);
            for (auto& v : img) v = rng.next_unit();
            s.rgb = Tensor<double>::leaf({3, 16, 16}, img, false);
            s.instruction = 1 * 256 + 2 * 16 + 0;
            for (int j = 0; j < 4; ++j) {
                s.cond_codes.push_back(static_cast<int>(rng.next_below(8)));
                s.targets.unified.push_back(static_cast<int>(rng.next_below(8)));
            }
            s.dp = {0.05, -0.02, 0.0};
            s.dr = {0.0, 0.0, 0.0};
            s.grip = static_cast<double>(i);
            batch.push_back(std::move(s));
        }
        FinetuneOptions opts;
        RngStream coords(16, "acc/grad_lact_coords");
        auto rep = finite_diff_check<double>(
            [&](Tape<double>& t) { return finetune_loss_ext(t, model, batch, opts).total; },
            model.params().entries(), 64, 1e-5, coords);
        pass = pass && rep.all_finite && rep.max_rel_err < 1e-4;
        detail += "; unilact max_rel_err " + fmt(rep.max_rel_err);
    }

    report(1, "gradient correctness", pass, detail, timer.seconds());
}

// ---------------------------------------------------------------------------
// 2. vq oracle and straight-through identity
// ---------------------------------------------------------------------------

void criterion_2() {
    Timer timer;
    UniLarn<double> model(small_larn(), 21);
    RngStream rng(22, "acc/vq");
    bool oracle_ok = true;

    auto check_book = [&](Codebook<double>& book) {
        Tape<double> tape;
        tape.set_recording(false);
        const int d = book.dim(), k = book.entries();
        for (int trial = 0; trial < 1000; ++trial) {
            std::vector<double> row(static_cast<std::size_t>(d));
            for (auto& v : row) v = rng.next_normal() * 0.5;
            auto z = Tensor<double>::leaf({1, d}, row, false);
            const int got = book.quantize(tape, z, 0.25).indices[0];
            int best = 0;
            double best_dist = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                double acc = 0;
                for (int j = 0; j < d; ++j) {
                    const double diff = row[static_cast<std::size_t>(j)] -
                                        book.table.value()[static_cast<std::size_t>(c) * d + j];
                    acc += diff * diff;
                }
                if (acc < best_dist) {
                    best_dist = acc;
                    best = c;
                }
            }
            oracle_ok = oracle_ok && (got == best);
        }
    };
    check_book(model.shared_codebook());
    check_book(model.unified_codebook());

    // straight-through identity on a reconstruction term
    bool ste_ok = true;
    {
        auto& book = model.shared_codebook();
        std::vector<double> zdata(static_cast<std::size_t>(2) * book.dim());
        for (auto& v : zdata) v = rng.next_normal();
        auto probe = Tensor<double>::leaf({book.dim(), 3},
                                          std::vector<double>(static_cast<std::size_t>(book.dim()) * 3, 0.1),
                                          false);
        for (std::size_t i = 0; i < probe.value().size(); ++i)
            probe.value()[i] = rng.next_normal();

        Tape<double> t1;
        auto z = Tensor<double>::leaf({2, book.dim()}, zdata, true);
        auto vq = book.quantize(t1, z, 0.25);
        auto recon1 = mse_loss(t1, matmul(t1, vq.embeddings, probe), Tensor<double>::zeros({2, 3}));
        t1.backward(recon1);

        Tape<double> t2;
        auto q_leaf = Tensor<double>::leaf({2, book.dim()}, vq.embeddings.value(), true);
        auto recon2 = mse_loss(t2, matmul(t2, q_leaf, probe), Tensor<double>::zeros({2, 3}));
        t2.backward(recon2);
        ste_ok = z.grad() == q_leaf.grad();
    }

    report(2, "vq oracle and ste identity", oracle_ok && ste_ok,
           std::string("2000 quantizations exact: ") + (oracle_ok ? "yes" : "no") +
               "; ste gradient identity exact: " + (ste_ok ? "yes" : "no"),
           timer.seconds());
}

// ---------------------------------------------------------------------------
// 3. autoregressive factorization identity and causality
// ---------------------------------------------------------------------------

void criterion_3() {
    Timer timer;
    UniLact<double> model(small_lact(), 31);
    RngStream rng(32, "acc/ar");
    std::vector<double> img(3 * 16 * 16);
    for (auto& v : img) v = rng.next_unit();
    auto rgb = Tensor<double>::leaf({3, 16, 16}, img, false);
    const std::uint32_t instr = 2 * 256 + 0 * 16 + 3;
    std::vector<int> cond{1, 4, 2, 7};
    const std::vector<int> targets{5, 0, 7, 3};
    const int k = model.config().codebook_entries;

    Tape<double> tape;
    tape.set_recording(false);
    auto seq = model.build_token_sequence(tape, rgb, instr, cond,
                                          to_global_codes<double>(targets, LatentKind::unified, k),
                                          LatentKind::unified, Phase::pretrain);
    auto fwd = model.forward(tape, seq);
    const double teacher = model.latent_nll(tape, fwd.latent_logits, targets,
                                            LatentKind::unified).item();

    double sequential = 0;
    std::vector<int> prefix;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        auto s = model.build_token_sequence(tape, rgb, instr, cond,
                                            to_global_codes<double>(prefix, LatentKind::unified, k),
                                            LatentKind::unified, Phase::pretrain);
        auto f = model.forward(tape, s);
        auto row = slice(tape, f.latent_logits, {static_cast<int>(i), 0}, {1, model.config().vocab()});
        sequential += model.latent_nll(tape, row, {targets[i]}, LatentKind::unified).item();
        prefix.push_back(targets[i]);
    }
    const double gap = std::abs(teacher - sequential);

    bool causal_ok = true;
    auto logits_for = [&](const std::vector<int>& t) {
        auto s = model.build_token_sequence(tape, rgb, instr, cond,
                                            to_global_codes<double>(t, LatentKind::unified, k),
                                            LatentKind::unified, Phase::pretrain);
        return model.forward(tape, s).latent_logits.value();
    };
    auto base = logits_for(targets);
    const int vocab = model.config().vocab();
    for (std::size_t j = 0; j < targets.size(); ++j) {
        auto mutated = targets;
        mutated[j] = (targets[j] + 3) % k;
        auto got = logits_for(mutated);
        for (std::size_t i = 0; i <= j; ++i)
            for (int v = 0; v < vocab; ++v)
                causal_ok = causal_ok && got[i * static_cast<std::size_t>(vocab) + v] ==
                                             base[i * static_cast<std::size_t>(vocab) + v];
    }

    report(3, "ar factorization and causality", gap < 1e-6 && causal_ok,
           "teacher-forced vs sequential gap " + fmt(gap) + "; causality mutations clean: " +
               (causal_ok ? "yes" : "no"),
           timer.seconds());
}

// ---------------------------------------------------------------------------
// 4. loss definitions
// ---------------------------------------------------------------------------

void criterion_4() {
    Timer timer;
    UniLact<double> model(small_lact(), 41);
    RngStream rng(42, "acc/loss");
    std::vector<LactSample<double>> batch;
    LactSample<double> s;
    std::vector<double> img(3 * 16 * 16);
    for (auto& v : img) v = rng.next_unit();
    s.rgb = Tensor<double>::leaf({3, 16, 16}, img, false);
    s.instruction = 0 * 256 + 1 * 16 + 2;
    for (int j = 0; j < 4; ++j) {
        s.cond_codes.push_back(static_cast<int>(rng.next_below(8)));
        s.targets.unified.push_back(static_cast<int>(rng.next_below(8)));
    }
    s.dp = {0.01, 0.0, -0.03};
    s.grip = 1.0;
    batch.push_back(s);

    Tape<double> tape;
    auto parts = finetune_loss(tape, model, batch, LossMode::sum, 0.5);
    const double decomposition_gap =
        std::abs(parts.total.item() - (parts.latent.item() + parts.action.item()));

    auto decoded_with = [&](std::vector<double> cont, double logit) {
        typename UniLact<double>::DecodedAction d;
        d.continuous = Tensor<double>::leaf({1, 6}, std::move(cont), false);
        d.grip_logit = Tensor<double>::leaf({1, 1}, {logit}, false);
        return d;
    };
    auto ln2 = action_loss<double>(tape, decoded_with({0, 0, 0, 0, 0, 0}, 0.0), {0, 0, 0},
                                   {0, 0, 0}, 1.0);
    const double ln2_gap = std::abs(ln2.bce_grip.item() - std::log(2.0));
    auto l1 = action_loss<double>(tape, decoded_with({0.1, 0, 0, 0, 0, 0}, 30.0), {0, 0, 0},
                                  {0, 0, 0}, 1.0);
    const double l1_gap = std::abs(l1.total.item() - 0.1);

    const bool pass = decomposition_gap < 1e-12 && ln2_gap < 1e-9 && l1_gap < 1e-9;
    report(4, "loss definitions", pass,
           "L_ft decomposition gap " + fmt(decomposition_gap) + "; BCE ln2 gap " + fmt(ln2_gap) +
               "; L1 spot gap " + fmt(l1_gap),
           timer.seconds());
}

// ---------------------------------------------------------------------------
// 5. training viability on the default synthetic dataset
// ---------------------------------------------------------------------------

RunConfig acceptance_config() {
    RunConfig cfg = parse_config_text("");
    cfg.out_dir = kOutDir;
    cfg.episodes = 300;
    cfg.larn_steps = 250;
    cfg.pretrain_steps = 500;
    cfg.finetune_steps = 400;
    cfg.eval_rollouts = 10;
    return cfg;
}

void criterion_5() {
    Timer timer;
    RunConfig cfg = acceptance_config();
    std::filesystem::create_directories(kOutDir);

    stage_gen_data(cfg);
    stage_train_unilarn(cfg);
    stage_extract_latents(cfg);
    stage_pretrain(cfg);

    // reconstruction drop from the early-steps average
    double early = 0, late = 0;
    {
        std::ifstream csv(kOutDir + "/unilarn_train.csv");
        std::string line;
        std::getline(csv, line);  // header
        std::vector<double> recon;
        while (std::getline(csv, line)) {
            double step, total, rr, rd, vs, vu;
            if (std::sscanf(line.c_str(), "%lf,%lf,%lf,%lf,%lf,%lf", &step, &total, &rr, &rd, &vs,
                            &vu) == 6)
                recon.push_back(rr + rd);
        }
        for (int i = 0; i < 10; ++i) early += recon[static_cast<std::size_t>(i)];
        early /= 10;
        const int upto = std::min<int>(200, static_cast<int>(recon.size()));
        for (int i = upto - 20; i < upto; ++i) late += recon[static_cast<std::size_t>(i)];
        late /= 20;
    }
    const bool recon_ok = late <= 0.5 * early;

    // unified codebook perplexity from the extracted labels
    auto records = read_latent_cache(cfg.latent_cache());
    const double perplexity =
        cache_usage_stats(records, LatentKind::unified, cfg.codebook_entries).perplexity;
    const bool perplexity_ok = perplexity >= 8.0;

    // pretraining beats the uniform baseline by at least 2x
    double nll_late = 0;
    {
        std::ifstream csv(kOutDir + "/pretrain_train.csv");
        std::string line;
        std::getline(csv, line);
        std::vector<double> nll;
        while (std::getline(csv, line)) {
            double step, v;
            if (std::sscanf(line.c_str(), "%lf,%lf", &step, &v) == 2) nll.push_back(v);
        }
        for (std::size_t i = nll.size() - 20; i < nll.size(); ++i) nll_late += nll[i];
        nll_late /= 20;
    }
    const double uniform = cfg.num_latents * std::log(static_cast<double>(cfg.codebook_entries));
    const bool nll_ok = nll_late <= 0.5 * uniform;

    report(5, "training viability", recon_ok && perplexity_ok && nll_ok,
           "recon " + fmt(early) + " -> " + fmt(late) + " (need <= 50%); unified perplexity " +
               fmt(perplexity) + " (need >= 8); pretrain nll " + fmt(nll_late) + " vs uniform " +
               fmt(uniform) + " (need <= 50%)",
           timer.seconds());
}

// ---------------------------------------------------------------------------
// 6. depth-information probe across three seeds
// ---------------------------------------------------------------------------

void criterion_6() {
    Timer timer;
    RunConfig cfg = acceptance_config();
    auto episodes = world::read_dataset(cfg.dataset());

    struct SeedResult {
        double unified = 0, rgb = 0;
    };
    std::vector<SeedResult> results(3);
    auto run_seed = [&](int i) {
        RunConfig c = cfg;
        c.seed = cfg.seed + 100 + static_cast<std::uint64_t>(i);
        LarnTraining<float> tr(c.larn_config(), c.seed, static_cast<float>(c.larn_lr),
                               static_cast<float>(c.weight_decay));
        auto pairs = build_pair_index(episodes, c.temporal_offset);
        run_larn_steps(tr, episodes, pairs, c.larn_steps, c.larn_batch);
        auto records = extract_latent_records(tr.model, episodes, c.temporal_offset);
        auto study = run_probe_study(tr.model, episodes, records, c.ridge_lambda,
                                     c.probe_train_fraction);
        results[static_cast<std::size_t>(i)] = {study.r2_dz_unified, study.r2_dz_rgb};
    };
    {
        std::thread t0(run_seed, 0), t1(run_seed, 1);
        t0.join();
        t1.join();
        run_seed(2);
    }

    bool pass = true;
    std::string detail;
    for (int i = 0; i < 3; ++i) {
        const bool ok = results[static_cast<std::size_t>(i)].unified >=
                        results[static_cast<std::size_t>(i)].rgb + 0.1;
        pass = pass && ok;
        detail += (i ? "; " : "") + std::string("seed ") + std::to_string(i) + ": R2(dz) unified " +
                  fmt(results[static_cast<std::size_t>(i)].unified) + " vs rgb " +
                  fmt(results[static_cast<std::size_t>(i)].rgb);
    }
    report(6, "depth-information probe", pass, detail, timer.seconds());
}

// ---------------------------------------------------------------------------
// 7. ablation orderings
// ---------------------------------------------------------------------------

void criterion_7() {
    Timer timer;
    RunConfig cfg = acceptance_config();
    auto episodes = world::read_dataset(cfg.dataset());
    if (static_cast<int>(episodes.size()) > cfg.ablate_episodes)
        episodes.resize(static_cast<std::size_t>(cfg.ablate_episodes));

    auto rows = run_ablation_grid(cfg, episodes);
    write_ablation_csv(kOutDir + "/ablation.csv", rows);

    auto cell_mean = [&](const std::string& id) {
        double mean = 0;
        int n = 0;
        for (const auto& r : rows)
            if (r.cell == id && !r.failed) {
                mean += r.mean;
                ++n;
            }
        return n ? mean / n : -1.0;
    };
    const double unified = cell_mean("unified");
    const double no_latent = cell_mean("no-latent");
    const double naive = cell_mean("naive-alternating");
    const double uu = cell_mean("uu");
    const double multi = cell_mean("multi-task");

    const bool o1 = unified > no_latent;
    const bool o2 = unified >= naive;
    const bool o3 = unified >= uu;
    const bool o4 = unified >= multi;
    report(7, "ablation orderings", o1 && o2 && o3 && o4,
           "unified " + fmt(unified) + " > no-latent " + fmt(no_latent) + ": " + (o1 ? "yes" : "no") +
               "; >= naive " + fmt(naive) + ": " + (o2 ? "yes" : "no") + "; cross>=uu " + fmt(uu) +
               ": " + (o3 ? "yes" : "no") + "; single>=multi " + fmt(multi) + ": " +
               (o4 ? "yes" : "no"),
           timer.seconds());
}

// ---------------------------------------------------------------------------
// 8. inference depth-independence and structural parity
// ---------------------------------------------------------------------------

void criterion_8() {
    Timer timer;
    RunConfig cfg = acceptance_config();

    stage_finetune(cfg);
    stage_eval(cfg);
    auto baseline = read_file_bytes(kOutDir + "/rollouts.csv");

    // delete every depth array from the dataset, then evaluate again
    {
        auto episodes = world::read_dataset(cfg.dataset());
        for (auto& ep : episodes)
            for (auto& st : ep.steps) std::fill(st.obs.depth.begin(), st.obs.depth.end(), 0.0f);
        world::write_dataset(episodes, cfg.dataset(), cfg.frame_size);
    }
    stage_eval(cfg);
    const bool identical = read_file_bytes(kOutDir + "/rollouts.csv") == baseline;

    // parameter-count and latency parity between a depth-trained policy and an
    // rgb-only-trained policy of the same configuration
    auto episodes = world::read_dataset(cfg.dataset());
    episodes.resize(60);
    auto pairs = build_pair_index(episodes, cfg.temporal_offset);

    LarnConfig rgb_cfg = cfg.larn_config();
    rgb_cfg.mode = LarnMode::rgb_only;
    LarnTraining<float> rgb_larn(rgb_cfg, 808, static_cast<float>(cfg.larn_lr),
                                 static_cast<float>(cfg.weight_decay));
    run_larn_steps(rgb_larn, episodes, pairs, 40, 4);
    auto rgb_records = extract_latent_records(rgb_larn.model, episodes, cfg.temporal_offset);

    LactTraining<float> rgb_policy(cfg.lact_config(), 809, static_cast<float>(cfg.lact_lr),
                                   static_cast<float>(cfg.weight_decay), "finetune");
    FinetuneOptions ft;
    ft.steps = 40;
    ft.batch = 4;
    ft.demos = 60;
    ft.latent_kind = LatentKind::rgb;
    run_finetune_steps(rgb_policy, episodes, rgb_records, ft);

    LactTraining<float> depth_policy(cfg.lact_config(), 810, static_cast<float>(cfg.lact_lr),
                                     static_cast<float>(cfg.weight_decay), "eval");
    auto ck = read_checkpoint(cfg.policy_checkpoint());
    unpack_params(ck, depth_policy.model.params(), static_cast<AdamW<float>*>(nullptr));

    const auto params_depth = depth_policy.model.params().total_size();
    const auto params_rgb = rgb_policy.model.params().total_size();

    auto time_inference = [&](UniLact<float>& model) {
        world::WorldConfig wcfg = cfg.world_config();
        auto obs = world::render_observation(world::init_state(77, world::TaskKind::lift, wcfg), wcfg);
        auto rgb = rgb_tensor<float>(obs);
        auto codes = null_latent_codes(cfg.num_latents, cfg.codebook_entries);
        // warm up, then time 100 calls
        for (int i = 0; i < 5; ++i) infer_action<float>(model, rgb, 0x012u, codes, 0.08f);
        Timer t;
        for (int i = 0; i < 100; ++i) infer_action<float>(model, rgb, 0x012u, codes, 0.08f);
        return t.seconds();
    };
    const double t_depth = time_inference(depth_policy.model);
    const double t_rgb = time_inference(rgb_policy.model);
    const double ratio = t_depth > t_rgb ? t_depth / t_rgb : t_rgb / t_depth;

    const bool pass = identical && params_depth == params_rgb && ratio <= 1.05;
    report(8, "inference depth-independence and parity", pass,
           std::string("rollouts byte-identical after depth deletion: ") +
               (identical ? "yes" : "no") + "; params " + std::to_string(params_depth) + " vs " +
               std::to_string(params_rgb) + "; latency ratio " + fmt(ratio) + " (need <= 1.05)",
           timer.seconds());
}

// ---------------------------------------------------------------------------
// 9. determinism of the full pipeline
// ---------------------------------------------------------------------------

void criterion_9() {
    Timer timer;
    auto run_once = [&](const std::string& dir) {
        RunConfig cfg = parse_config_text(
            "paths.out_dir = " + dir + "\n" +
            "data.episodes = 24\n"
            "data.seed = 99\n"
            "unilarn.steps = 12\n"
            "unilarn.batch = 4\n"
            "pretrain.steps = 12\n"
            "pretrain.batch = 4\n"
            "finetune.steps = 12\n"
            "finetune.batch = 4\n"
            "finetune.demos = 24\n"
            "eval.rollouts = 3\n");
        std::filesystem::remove_all(dir);
        stage_gen_data(cfg);
        stage_train_unilarn(cfg);
        stage_extract_latents(cfg);
        stage_pretrain(cfg);
        stage_finetune(cfg);
        stage_eval(cfg);
        return cfg;
    };
    auto a = run_once(kOutDir + "/det_a");
    auto b = run_once(kOutDir + "/det_b");

    bool pass = true;
    std::string detail;
    for (const char* f : {"/dataset.ulds", "/latents.ullc", "/unilarn.ulck", "/pretrain.ulck",
                          "/policy.ulck", "/rollouts.csv", "/unilarn_train.csv",
                          "/pretrain_train.csv", "/finetune_train.csv"}) {
        const bool same = read_file_bytes(a.out_dir + f) == read_file_bytes(b.out_dir + f);
        pass = pass && same;
        if (!same) detail += std::string(f) + " differs; ";
    }
    if (pass) detail = "checkpoints, caches, and CSVs byte-identical across two runs";
    report(9, "determinism", pass, detail, timer.seconds());
}

}  // namespace

int main(int argc, char** argv) {
    // optional filter: run only the listed criteria, e.g. "acceptance 1 2 3"
    std::vector<int> only;
    for (int i = 1; i < argc; ++i) only.push_back(std::atoi(argv[i]));
    auto want = [&](int c) {
        return only.empty() || std::find(only.begin(), only.end(), c) != only.end();
    };

    if (want(1)) criterion_1();
    if (want(2)) criterion_2();
    if (want(3)) criterion_3();
    if (want(4)) criterion_4();
    if (want(5)) criterion_5();
    if (want(6)) criterion_6();
    if (want(7)) criterion_7();
    if (want(8)) criterion_8();
    if (want(9)) criterion_9();

    if (g_failures) {
        std::printf("%d criterion(s) FAILED\n", g_failures);
        return 1;
    }
    std::printf("all criteria passed\n");
    return 0;
}
