#include "ulact/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <thread>

#include "json.hpp"
#include "ulact/binio.hpp"

namespace ulact {

namespace {

using Clock = std::chrono::steady_clock;

std::string hex64(std::uint64_t v) {
    char buf[19];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

void require_file(const std::string& stage, const std::string& path, const std::string& producer) {
    if (!file_exists(path))
        throw std::runtime_error(stage + ": missing " + path + "; run " + producer + " first");
}

void write_text_file(const std::string& path, const std::string& text) {
    const auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path);
    out << text;
}

struct MetricsCsv {
    std::string header;
    std::vector<std::string> rows;

    void save(const std::string& path) const {
        std::string text = header + "\n";
        for (const auto& r : rows) text += r + "\n";
        write_text_file(path, text);
    }
};

// ---------------------------------------------------------------------------
// Checkpoint bridging for the two model families.
// ---------------------------------------------------------------------------

template <typename T>
Checkpoint checkpoint_of_larn(const RunConfig& cfg, LarnTraining<T>& tr, const char* stage) {
    Checkpoint ck;
    ck.stage = stage;
    ck.config_text = config_to_text(cfg);
    pack_params(tr.model.params(), &tr.opt, ck);
    auto& shared = tr.model.shared_codebook();
    ck.counters.push_back({"codebook_shared.usage", shared.usage});
    ck.counters.push_back({"codebook_shared.last_used", shared.last_used});
    if (cfg.larn_mode == LarnMode::unified) {
        auto& uni = tr.model.unified_codebook();
        ck.counters.push_back({"codebook_unified.usage", uni.usage});
        ck.counters.push_back({"codebook_unified.last_used", uni.last_used});
    }
    ck.counters.push_back({"train.step", {tr.step}});
    ck.counters.push_back({"codebooks_bootstrapped", {tr.model.codebooks_bootstrapped() ? 1 : 0}});
    ck.rng_states.push_back({"batch", tr.batch_rng.state()});
    ck.rng_states.push_back({"reseed", tr.reseed_rng.state()});
    return ck;
}

template <typename T>
void restore_larn(const Checkpoint& ck, const RunConfig& cfg, LarnTraining<T>& tr) {
    unpack_params(ck, tr.model.params(), &tr.opt);
    auto copy_counters = [&](const char* name, std::vector<std::int64_t>& dst) {
        if (const auto* c = ck.find_counters(name)) dst = c->values;
    };
    copy_counters("codebook_shared.usage", tr.model.shared_codebook().usage);
    copy_counters("codebook_shared.last_used", tr.model.shared_codebook().last_used);
    if (cfg.larn_mode == LarnMode::unified) {
        copy_counters("codebook_unified.usage", tr.model.unified_codebook().usage);
        copy_counters("codebook_unified.last_used", tr.model.unified_codebook().last_used);
    }
    if (const auto* c = ck.find_counters("train.step")) tr.step = c->values.at(0);
    if (const auto* c = ck.find_counters("codebooks_bootstrapped"))
        tr.model.set_codebooks_bootstrapped(c->values.at(0) != 0);
    if (const auto* r = ck.find_rng("batch")) tr.batch_rng.restore(r->state);
    if (const auto* r = ck.find_rng("reseed")) tr.reseed_rng.restore(r->state);
}

template <typename T>
Checkpoint checkpoint_of_lact(const RunConfig& cfg, LactTraining<T>& tr, const char* stage) {
    Checkpoint ck;
    ck.stage = stage;
    ck.config_text = config_to_text(cfg);
    pack_params(tr.model.params(), &tr.opt, ck);
    ck.counters.push_back({"train.step", {tr.step}});
    ck.rng_states.push_back({"batch", tr.batch_rng.state()});
    ck.rng_states.push_back({"kind", tr.kind_rng.state()});
    return ck;
}

template <typename T>
void restore_lact(const Checkpoint& ck, LactTraining<T>& tr, bool with_optimizer) {
    unpack_params(ck, tr.model.params(), with_optimizer ? &tr.opt : nullptr);
    if (with_optimizer) {
        if (const auto* c = ck.find_counters("train.step")) tr.step = c->values.at(0);
        if (const auto* r = ck.find_rng("batch")) tr.batch_rng.restore(r->state);
        if (const auto* r = ck.find_rng("kind")) tr.kind_rng.restore(r->state);
    }
}

void check_structural_match(const std::string& stage, const Checkpoint& ck, const RunConfig& cfg) {
    const RunConfig snap = parse_config_text(ck.config_text);
    if (structural_signature(snap) != structural_signature(cfg))
        throw std::runtime_error(stage +
                                 ": checkpoint structural config disagrees with the runtime "
                                 "config; refusing to load");
}

// ---------------------------------------------------------------------------
// Manifest.
// ---------------------------------------------------------------------------

void write_manifest(const RunConfig& cfg, const std::string& stage,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs, double wall_seconds) {
    nlohmann::json j;
    j["stage"] = stage;
    j["config_hash"] = hex64(config_hash(cfg));
    nlohmann::json in = nlohmann::json::object();
    for (const auto& path : inputs)
        if (file_exists(path)) in[path] = hex64(hash_file(path));
    j["inputs"] = in;
    j["outputs"] = outputs;
    j["wall_seconds"] = wall_seconds;
    write_text_file(cfg.out_dir + "/manifest-" + stage + ".json", j.dump(2) + "\n");
}

std::vector<world::Episode> load_episodes(const std::string& stage, const RunConfig& cfg) {
    require_file(stage, cfg.dataset(), "gen-data");
    int frame_size = 0;
    auto episodes = world::read_dataset(cfg.dataset(), &frame_size);
    if (frame_size != cfg.frame_size)
        throw std::runtime_error(stage + ": dataset frame size " + std::to_string(frame_size) +
                                 " differs from data.frame_size " + std::to_string(cfg.frame_size));
    return episodes;
}

}  // namespace

std::string format_decimal(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

void write_rollout_csv(const std::string& path, const std::vector<RolloutOutcome>& outcomes) {
    std::string text = "task,seed,success,steps,final_error\n";
    for (const auto& o : outcomes) {
        text += std::string(world::task_name(o.task)) + "," + std::to_string(o.seed) + "," +
                (o.success ? "1" : "0") + "," + std::to_string(o.steps_used) + "," +
                format_decimal(o.final_error) + "\n";
    }
    write_text_file(path, text);
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

void stage_gen_data(const RunConfig& cfg) {
    const auto wcfg = cfg.world_config();
    RngStream seeds(cfg.seed, "dataset/episodes");
    std::vector<world::Episode> episodes;
    episodes.reserve(static_cast<std::size_t>(cfg.episodes));
    for (int i = 0; i < cfg.episodes; ++i) {
        const auto kind = static_cast<world::TaskKind>(i % world::kNumTaskKinds);
        auto ep = world::generate_episode(seeds.next_u64(), kind, wcfg);
        if (!ep.valid)
            throw std::runtime_error("gen-data: scripted expert failed on episode " +
                                     std::to_string(i));
        episodes.push_back(std::move(ep));
    }
    world::write_dataset(episodes, cfg.dataset(), cfg.frame_size);
    std::cout << "gen-data: wrote " << episodes.size() << " episodes to " << cfg.dataset() << "\n";
}

// ---------------------------------------------------------------------------
// train-unilarn
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void train_unilarn_impl(const RunConfig& cfg) {
    auto episodes = load_episodes("train-unilarn", cfg);
    auto pairs = build_pair_index(episodes, cfg.temporal_offset);
    LarnTraining<T> tr(cfg.larn_config(), cfg.seed, static_cast<T>(cfg.larn_lr),
                       static_cast<T>(cfg.weight_decay));
    std::cout << "train-unilarn: " << tr.model.params().total_size() << " parameters, "
              << pairs.size() << " pairs, " << cfg.larn_steps << " steps\n";

    MetricsCsv csv;
    csv.header = "step,total,recon_rgb,recon_depth,vq_shared,vq_unified";
    const int chunk = 25;
    for (int done = 0; done < cfg.larn_steps; done += chunk) {
        const int n = std::min(chunk, cfg.larn_steps - done);
        auto rows = run_larn_steps(tr, episodes, pairs, n, cfg.larn_batch);
        for (const auto& r : rows)
            csv.rows.push_back(std::to_string(r.step) + "," + format_decimal(r.total) + "," +
                               format_decimal(r.recon_rgb) + "," + format_decimal(r.recon_depth) +
                               "," + format_decimal(r.vq_shared) + "," +
                               format_decimal(r.vq_unified));
        std::cout << "  step " << tr.step << " loss " << format_decimal(rows.back().total) << "\n";
    }
    csv.save(cfg.out_dir + "/unilarn_train.csv");
    write_checkpoint(checkpoint_of_larn(cfg, tr, "unilarn"), cfg.unilarn_checkpoint());
    std::cout << "train-unilarn: checkpoint " << cfg.unilarn_checkpoint() << "\n";
}

}  // namespace

void stage_train_unilarn(const RunConfig& cfg) {
    if (cfg.precision == Precision::f64)
        train_unilarn_impl<double>(cfg);
    else
        train_unilarn_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// extract-latents
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void extract_latents_impl(const RunConfig& cfg) {
    auto episodes = load_episodes("extract-latents", cfg);
    require_file("extract-latents", cfg.unilarn_checkpoint(), "train-unilarn");
    auto ck = read_checkpoint(cfg.unilarn_checkpoint());
    check_structural_match("extract-latents", ck, cfg);
    LarnTraining<T> tr(cfg.larn_config(), cfg.seed, static_cast<T>(cfg.larn_lr),
                       static_cast<T>(cfg.weight_decay));
    restore_larn(ck, cfg, tr);
    auto records = extract_latent_records(tr.model, episodes, cfg.temporal_offset);
    write_latent_cache(records, cfg.num_latents, cfg.latent_cache());
    std::cout << "extract-latents: " << records.size() << " records to " << cfg.latent_cache()
              << "\n";
}

}  // namespace

void stage_extract_latents(const RunConfig& cfg) {
    if (cfg.precision == Precision::f64)
        extract_latents_impl<double>(cfg);
    else
        extract_latents_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void pretrain_impl(const RunConfig& cfg) {
    auto episodes = load_episodes("pretrain", cfg);
    require_file("pretrain", cfg.latent_cache(), "extract-latents");
    int cache_n = 0;
    auto records = read_latent_cache(cfg.latent_cache(), &cache_n);
    if (cache_n != cfg.num_latents)
        throw std::runtime_error("pretrain: latent cache has " + std::to_string(cache_n) +
                                 " tokens per step, config expects " +
                                 std::to_string(cfg.num_latents));

    LactTraining<T> tr(cfg.lact_config(), cfg.seed, static_cast<T>(cfg.lact_lr),
                       static_cast<T>(cfg.weight_decay), "pretrain");
    std::cout << "pretrain: " << tr.model.params().total_size() << " parameters, "
              << records.size() << " records, " << cfg.pretrain_steps << " steps\n";

    const PretrainMode mode = cfg.multi_task ? PretrainMode::multi
                              : cfg.pretrain_regime == PretrainRegime::cross
                                  ? PretrainMode::cross
                                  : PretrainMode::unified_only;
    MetricsCsv csv;
    csv.header = "step,nll,kind";
    const int chunk = 25;
    for (int done = 0; done < cfg.pretrain_steps; done += chunk) {
        const int n = std::min(chunk, cfg.pretrain_steps - done);
        auto rows = run_pretrain_steps(tr, episodes, records, n, cfg.pretrain_batch, mode);
        for (const auto& r : rows)
            csv.rows.push_back(std::to_string(r.step) + "," + format_decimal(r.nll) + "," +
                               latent_kind_name(r.kind));
        std::cout << "  step " << tr.step << " nll " << format_decimal(rows.back().nll) << "\n";
    }
    csv.save(cfg.out_dir + "/pretrain_train.csv");
    write_checkpoint(checkpoint_of_lact(cfg, tr, "pretrain"), cfg.pretrain_checkpoint());
    std::cout << "pretrain: checkpoint " << cfg.pretrain_checkpoint() << "\n";
}

}  // namespace

void stage_pretrain(const RunConfig& cfg) {
    if (cfg.precision == Precision::f64)
        pretrain_impl<double>(cfg);
    else
        pretrain_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void finetune_impl(const RunConfig& cfg) {
    auto episodes = load_episodes("finetune", cfg);
    require_file("finetune", cfg.latent_cache(), "extract-latents");
    require_file("finetune", cfg.pretrain_checkpoint(), "pretrain");
    auto records = read_latent_cache(cfg.latent_cache());

    auto ck = read_checkpoint(cfg.pretrain_checkpoint());
    check_structural_match("finetune", ck, cfg);
    LactTraining<T> tr(cfg.lact_config(), cfg.seed, static_cast<T>(cfg.lact_lr),
                       static_cast<T>(cfg.weight_decay), "finetune");
    restore_lact(ck, tr, false);  // fresh optimizer for the fine-tuning phase

    FinetuneOptions opts;
    opts.steps = cfg.finetune_steps;
    opts.batch = cfg.finetune_batch;
    opts.demos = cfg.finetune_demos;
    opts.loss_mode = cfg.lambda_mode == 1 ? LossMode::convex : LossMode::sum;
    opts.lambda = cfg.lambda;

    MetricsCsv csv;
    csv.header = "step,total,latent,action";
    const int chunk = 25;
    for (int done = 0; done < opts.steps; done += chunk) {
        FinetuneOptions part = opts;
        part.steps = std::min(chunk, opts.steps - done);
        auto rows = run_finetune_steps(tr, episodes, records, part);
        for (const auto& r : rows)
            csv.rows.push_back(std::to_string(r.step) + "," + format_decimal(r.total) + "," +
                               format_decimal(r.latent) + "," + format_decimal(r.action));
        std::cout << "  step " << tr.step << " loss " << format_decimal(rows.back().total) << "\n";
    }
    csv.save(cfg.out_dir + "/finetune_train.csv");
    write_checkpoint(checkpoint_of_lact(cfg, tr, "finetune"), cfg.policy_checkpoint());
    std::cout << "finetune: checkpoint " << cfg.policy_checkpoint() << "\n";
}

}  // namespace

void stage_finetune(const RunConfig& cfg) {
    if (cfg.precision == Precision::f64)
        finetune_impl<double>(cfg);
    else
        finetune_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void eval_impl(const RunConfig& cfg) {
    require_file("eval", cfg.policy_checkpoint(), "finetune");
    auto ck = read_checkpoint(cfg.policy_checkpoint());
    check_structural_match("eval", ck, cfg);
    LactTraining<T> tr(cfg.lact_config(), cfg.seed, static_cast<T>(cfg.lact_lr),
                       static_cast<T>(cfg.weight_decay), "eval");
    restore_lact(ck, tr, false);

    const auto wcfg = cfg.world_config();
    auto outcomes = run_rollouts(tr.model, wcfg, cfg.eval_rollouts, cfg.eval_seed_base);
    write_rollout_csv(cfg.out_dir + "/rollouts.csv", outcomes);

    for (int k = 0; k < world::kNumTaskKinds; ++k) {
        int ok = 0, n = 0;
        for (const auto& o : outcomes)
            if (static_cast<int>(o.task) == k) {
                ++n;
                ok += o.success;
            }
        auto ci = wilson_interval(ok, n);
        std::cout << "eval: " << world::task_name(static_cast<world::TaskKind>(k)) << " " << ok
                  << "/" << n << " success " << format_decimal(ci.rate) << " [" <<
            format_decimal(ci.lo) << ", " << format_decimal(ci.hi) << "]\n";
    }
    std::cout << "eval: mean success " << format_decimal(mean_task_success(outcomes)) << "\n";
}

}  // namespace

void stage_eval(const RunConfig& cfg) {
    if (cfg.precision == Precision::f64)
        eval_impl<double>(cfg);
    else
        eval_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void probe_impl(const RunConfig& cfg) {
    auto episodes = load_episodes("probe", cfg);
    require_file("probe", cfg.unilarn_checkpoint(), "train-unilarn");
    auto ck = read_checkpoint(cfg.unilarn_checkpoint());
    check_structural_match("probe", ck, cfg);
    LarnTraining<T> tr(cfg.larn_config(), cfg.seed, static_cast<T>(cfg.larn_lr),
                       static_cast<T>(cfg.weight_decay));
    restore_larn(ck, cfg, tr);

    auto records = extract_latent_records(tr.model, episodes, cfg.temporal_offset);
    auto study = run_probe_study(tr.model, episodes, records, cfg.ridge_lambda,
                                 cfg.probe_train_fraction);

    std::string text = "kind,dim,r2\n";
    const char* dims[] = {"dx", "dy", "dz", "rx", "ry", "rz", "grip"};
    for (const auto* result : {&study.unified, &study.rgb, &study.depth})
        for (std::size_t d = 0; d < result->r2.size(); ++d)
            text += result->latent_kind + "," + dims[d] + "," + format_decimal(result->r2[d]) + "\n";
    write_text_file(cfg.out_dir + "/probe.csv", text);
    std::cout << "probe: held-out R2(dz) unified " << format_decimal(study.r2_dz_unified)
              << " rgb " << format_decimal(study.r2_dz_rgb) << " depth "
              << format_decimal(study.r2_dz_depth) << "\n";
}

}  // namespace

void stage_probe(const RunConfig& cfg) {
    if (cfg.precision == Precision::f64)
        probe_impl<double>(cfg);
    else
        probe_impl<float>(cfg);
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

namespace {

struct CellSpec {
    std::string id;
    std::string latent_modality;
    PretrainMode pretrain_mode = PretrainMode::cross;
    bool multi_task = false;
    bool no_latent = false;
    LarnMode larn_mode = LarnMode::unified;
    bool naive_pair = false;  // two independent single-modality learners
    LatentKind finetune_kind = LatentKind::unified;
    std::string pretrain_label;
    std::string finetune_label;
};

std::vector<CellSpec> grid_cells() {
    std::vector<CellSpec> cells;
    cells.push_back({"no-latent", "none", PretrainMode::cross, false, true, LarnMode::unified,
                     false, LatentKind::unified, "none", "action-only"});
    cells.push_back({"rgb-only", "rgb", PretrainMode::single_rgb, false, false,
                     LarnMode::rgb_only, false, LatentKind::rgb, "R->R", "R->R"});
    cells.push_back({"depth-only", "depth", PretrainMode::single_depth, false, false,
                     LarnMode::depth_only, false, LatentKind::depth, "D->D", "D->D"});
    cells.push_back({"naive-alternating", "rgb+depth", PretrainMode::alternate, false, false,
                     LarnMode::rgb_only, true, LatentKind::rgb, "alt(R,D)", "R->R"});
    cells.push_back({"unified", "unified", PretrainMode::cross, false, false, LarnMode::unified,
                     false, LatentKind::unified, "U->{U,R,D}", "U->U"});
    cells.push_back({"uu", "unified", PretrainMode::unified_only, false, false, LarnMode::unified,
                     false, LatentKind::unified, "U->U", "U->U"});
    cells.push_back({"multi-task", "unified", PretrainMode::multi, true, false, LarnMode::unified,
                     false, LatentKind::unified, "U->{U+R+D}", "U->U"});
    return cells;
}

AblationRow run_cell(const RunConfig& cfg, const std::vector<world::Episode>& episodes,
                     const CellSpec& cell, int seed_idx) {
    AblationRow row;
    row.cell = cell.id;
    row.pretrain_regime = cell.pretrain_label;
    row.finetune_regime = cell.finetune_label;
    row.latent_modality = cell.latent_modality;
    row.seed = seed_idx;

    RngStream seeder(cfg.seed, "ablate/" + cell.id + "/" + std::to_string(seed_idx));
    const std::uint64_t larn_seed = seeder.next_u64();
    const std::uint64_t larn_seed2 = seeder.next_u64();
    const std::uint64_t lact_seed = seeder.next_u64();

    // Equal budgets for every cell.
    LactConfig lact_cfg = cfg.lact_config();
    lact_cfg.width = cfg.ablate_lact_width;
    lact_cfg.layers = cfg.ablate_lact_layers;

    std::vector<LatentRecord> records;
    if (cell.no_latent) {
        // No learned latents: null conditioning, zero targets, latent loss off.
        for (int e = 0; e < static_cast<int>(episodes.size()); ++e)
            for (int t = 0; t < static_cast<int>(episodes[static_cast<std::size_t>(e)].steps.size()); ++t) {
                LatentRecord rec;
                rec.episode = static_cast<std::uint32_t>(e);
                rec.step = static_cast<std::uint16_t>(t);
                rec.rgb.assign(static_cast<std::size_t>(cfg.num_latents), 0);
                rec.depth.assign(static_cast<std::size_t>(cfg.num_latents), 0);
                rec.unified.assign(static_cast<std::size_t>(cfg.num_latents), 0);
                records.push_back(std::move(rec));
            }
    } else if (cell.naive_pair) {
        LarnConfig rc = cfg.larn_config();
        rc.mode = LarnMode::rgb_only;
        LarnConfig dc = cfg.larn_config();
        dc.mode = LarnMode::depth_only;
        auto pairs = build_pair_index(episodes, cfg.temporal_offset);
        LarnTraining<float> rgb_tr(rc, larn_seed, static_cast<float>(cfg.larn_lr),
                                   static_cast<float>(cfg.weight_decay));
        run_larn_steps(rgb_tr, episodes, pairs, cfg.ablate_larn_steps, cfg.ablate_batch);
        LarnTraining<float> depth_tr(dc, larn_seed2, static_cast<float>(cfg.larn_lr),
                                     static_cast<float>(cfg.weight_decay));
        run_larn_steps(depth_tr, episodes, pairs, cfg.ablate_larn_steps, cfg.ablate_batch);
        records = merge_latent_records(
            extract_latent_records(rgb_tr.model, episodes, cfg.temporal_offset),
            extract_latent_records(depth_tr.model, episodes, cfg.temporal_offset));
    } else {
        LarnConfig lc = cfg.larn_config();
        lc.mode = cell.larn_mode;
        auto pairs = build_pair_index(episodes, cfg.temporal_offset);
        LarnTraining<float> larn_tr(lc, larn_seed, static_cast<float>(cfg.larn_lr),
                                    static_cast<float>(cfg.weight_decay));
        run_larn_steps(larn_tr, episodes, pairs, cfg.ablate_larn_steps, cfg.ablate_batch);
        records = extract_latent_records(larn_tr.model, episodes, cfg.temporal_offset);
    }

    LactTraining<float> lact_tr(lact_cfg, lact_seed, static_cast<float>(cfg.lact_lr),
                                static_cast<float>(cfg.weight_decay), "pretrain");
    if (!cell.no_latent)
        run_pretrain_steps(lact_tr, episodes, records, cfg.ablate_pretrain_steps, cfg.ablate_batch,
                           cell.pretrain_mode);

    FinetuneOptions ft;
    ft.steps = cfg.ablate_finetune_steps;
    ft.batch = cfg.ablate_batch;
    ft.demos = cfg.ablate_demos;
    ft.latent_kind = cell.finetune_kind;
    ft.include_latent = !cell.no_latent;
    // same weights carry over; the fine-tuning phase starts a fresh optimizer
    lact_tr.opt = AdamW<float>();
    lact_tr.opt.hp.lr = static_cast<float>(cfg.lact_lr);
    lact_tr.opt.hp.weight_decay = static_cast<float>(cfg.weight_decay);
    run_finetune_steps(lact_tr, episodes, records, ft);

    const auto wcfg = cfg.world_config();
    auto outcomes = run_rollouts(lact_tr.model, wcfg, cfg.ablate_rollouts, cfg.eval_seed_base);
    auto rate_for = [&](world::TaskKind k) {
        int ok = 0, n = 0;
        for (const auto& o : outcomes)
            if (o.task == k) {
                ++n;
                ok += o.success;
            }
        return n ? static_cast<double>(ok) / n : 0.0;
    };
    row.lift = rate_for(world::TaskKind::lift);
    row.place_near = rate_for(world::TaskKind::place_near);
    row.place_in = rate_for(world::TaskKind::place_in);
    row.mean = mean_task_success(outcomes);
    return row;
}

}  // namespace

std::vector<AblationRow> run_ablation_grid(const RunConfig& cfg,
                                           const std::vector<world::Episode>& episodes) {
    const auto cells = grid_cells();
    struct Job {
        const CellSpec* cell;
        int seed;
    };
    std::vector<Job> jobs;
    for (const auto& cell : cells)
        for (int s = 0; s < cfg.ablate_seeds; ++s) jobs.push_back({&cell, s});

    std::vector<AblationRow> rows(jobs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= jobs.size()) return;
            try {
                rows[i] = run_cell(cfg, episodes, *jobs[i].cell, jobs[i].seed);
            } catch (const std::exception& e) {
                rows[i].cell = jobs[i].cell->id;
                rows[i].seed = jobs[i].seed;
                rows[i].failed = true;
                std::cerr << "ablate: cell " << jobs[i].cell->id << " seed " << jobs[i].seed
                          << " failed: " << e.what() << "\n";
            }
        }
    };
    std::vector<std::thread> pool;
    const int threads = std::max(1, cfg.ablate_threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
    return rows;
}

void write_ablation_csv(const std::string& path, const std::vector<AblationRow>& rows) {
    std::string text =
        "cell,pretrain_regime,finetune_regime,latent_modality,seed,lift,place_near,place_in,mean,"
        "failed\n";
    for (const auto& r : rows)
        text += r.cell + "," + r.pretrain_regime + "," + r.finetune_regime + "," +
                r.latent_modality + "," + std::to_string(r.seed) + "," + format_decimal(r.lift) +
                "," + format_decimal(r.place_near) + "," + format_decimal(r.place_in) + "," +
                format_decimal(r.mean) + "," + (r.failed ? "1" : "0") + "\n";
    write_text_file(path, text);
}

void stage_ablate(const RunConfig& cfg) {
    auto episodes = load_episodes("ablate", cfg);
    if (static_cast<int>(episodes.size()) > cfg.ablate_episodes)
        episodes.resize(static_cast<std::size_t>(cfg.ablate_episodes));
    auto rows = run_ablation_grid(cfg, episodes);
    write_ablation_csv(cfg.out_dir + "/ablation.csv", rows);
    for (const auto& cell : {"no-latent", "rgb-only", "depth-only", "naive-alternating", "unified",
                             "uu", "multi-task"}) {
        double mean = 0;
        int n = 0;
        for (const auto& r : rows)
            if (r.cell == cell && !r.failed) {
                mean += r.mean;
                ++n;
            }
        if (n) std::cout << "ablate: " << cell << " mean success " << format_decimal(mean / n) << "\n";
    }
}

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

int run_subcommand(const std::string& name, const RunConfig& cfg) {
    const auto start = Clock::now();
    std::cout << "== " << name << " ==\n" << config_to_text(cfg);
    std::vector<std::string> inputs, outputs;
    try {
        if (name == "gen-data") {
            stage_gen_data(cfg);
            outputs = {cfg.dataset()};
        } else if (name == "train-unilarn") {
            inputs = {cfg.dataset()};
            stage_train_unilarn(cfg);
            outputs = {cfg.unilarn_checkpoint(), cfg.out_dir + "/unilarn_train.csv"};
        } else if (name == "extract-latents") {
            inputs = {cfg.dataset(), cfg.unilarn_checkpoint()};
            stage_extract_latents(cfg);
            outputs = {cfg.latent_cache()};
        } else if (name == "pretrain") {
            inputs = {cfg.dataset(), cfg.latent_cache()};
            stage_pretrain(cfg);
            outputs = {cfg.pretrain_checkpoint(), cfg.out_dir + "/pretrain_train.csv"};
        } else if (name == "finetune") {
            inputs = {cfg.dataset(), cfg.latent_cache(), cfg.pretrain_checkpoint()};
            stage_finetune(cfg);
            outputs = {cfg.policy_checkpoint(), cfg.out_dir + "/finetune_train.csv"};
        } else if (name == "eval") {
            inputs = {cfg.policy_checkpoint()};
            stage_eval(cfg);
            outputs = {cfg.out_dir + "/rollouts.csv"};
        } else if (name == "probe") {
            inputs = {cfg.dataset(), cfg.unilarn_checkpoint()};
            stage_probe(cfg);
            outputs = {cfg.out_dir + "/probe.csv"};
        } else if (name == "ablate") {
            inputs = {cfg.dataset()};
            stage_ablate(cfg);
            outputs = {cfg.out_dir + "/ablation.csv"};
        } else {
            std::cerr << "unknown subcommand '" << name << "'\n";
            return 2;
        }
    } catch (const std::exception& e) {
        std::cerr << name << " failed: " << e.what() << "\n";
        return 1;
    }
    const double wall = std::chrono::duration<double>(Clock::now() - start).count();
    write_manifest(cfg, name, inputs, outputs, wall);
    std::cout << name << " done in " << format_decimal(wall) << " s\n";
    return 0;
}

}  // namespace ulact
