#include <cmath>
#include <vector>

#include "doctest.h"
#include "ulact/policy.hpp"
#include "ulact/unilact.hpp"

using namespace ulact;

namespace {

LactConfig tiny_lact() {
    LactConfig c;
    c.frame_size = 16;
    c.visual_patch = 8;  // 4 visual tokens
    c.num_latents = 2;
    c.codebook_entries = 4;
    c.layers = 1;
    c.heads = 2;
    c.width = 16;
    c.action_hidden = 8;
    return c;
}

template <typename T>
Tensor<T> random_rgb(RngStream& rng, int s) {
    std::vector<T> data(static_cast<std::size_t>(3) * s * s);
    for (auto& v : data) v = static_cast<T>(rng.next_unit());
    return Tensor<T>::leaf({3, s, s}, std::move(data), false);
}

constexpr std::uint32_t kInstr = 0 * 256 + 1 * 16 + 2;

template <typename T>
LactSample<T> random_sample(const LactConfig& cfg, RngStream& rng) {
    LactSample<T> s;
    s.rgb = random_rgb<T>(rng, cfg.frame_size);
    s.instruction = kInstr;
    for (int i = 0; i < cfg.num_latents; ++i) {
        s.cond_codes.push_back(static_cast<int>(rng.next_below(cfg.codebook_entries)));
        s.targets.rgb.push_back(static_cast<int>(rng.next_below(cfg.codebook_entries)));
        s.targets.depth.push_back(static_cast<int>(rng.next_below(cfg.codebook_entries)));
        s.targets.unified.push_back(static_cast<int>(rng.next_below(cfg.codebook_entries)));
    }
    s.dp = {static_cast<T>(0.02), static_cast<T>(-0.05), static_cast<T>(0.01)};
    s.dr = {T(0), T(0), T(0)};
    s.grip = T(1);
    return s;
}

}  // namespace

TEST_CASE("token sequence layout is deterministic and depth-free by construction") {
    auto cfg = tiny_lact();
    UniLact<double> model(cfg, 50);
    RngStream rng(51, "test/seq");
    auto rgb = random_rgb<double>(rng, cfg.frame_size);
    std::vector<int> cond{0, 1};
    std::vector<int> targets{2, 3};  // global ids in the unified range

    Tape<double> tape;
    auto a = model.build_token_sequence(tape, rgb, kInstr, cond, targets, LatentKind::unified,
                                        Phase::pretrain);
    auto b = model.build_token_sequence(tape, rgb, kInstr, cond, targets, LatentKind::unified,
                                        Phase::pretrain);
    CHECK(a.tokens.value() == b.tokens.value());

    // [instr | visual | latent | BOS | targets]; the only pixel segment is rgb
    CHECK(a.layout.cond_len == 1 + 4 + 2);
    CHECK(a.layout.total == a.layout.cond_len + 1 + 2);
    CHECK(a.layout.query_pos == -1);

    auto ft = model.build_token_sequence(tape, rgb, kInstr, cond, targets, LatentKind::unified,
                                         Phase::finetune);
    CHECK(ft.layout.total == a.layout.total + 1);  // exactly one action query appended
    CHECK(ft.layout.query_pos == ft.layout.total - 1);

    CHECK_THROWS_WITH_AS(model.build_token_sequence(tape, rgb, kInstr, {0}, targets,
                                                    LatentKind::unified, Phase::pretrain),
                         doctest::Contains("missing conditioning latent"), std::invalid_argument);
}

TEST_CASE("causality: mutating target j leaves logits at positions <= j bit-identical") {
    auto cfg = tiny_lact();
    UniLact<double> model(cfg, 52);
    RngStream rng(53, "test/causal");
    auto rgb = random_rgb<double>(rng, cfg.frame_size);
    std::vector<int> cond{1, 3};

    auto logits_for = [&](const std::vector<int>& targets) {
        Tape<double> tape;
        tape.set_recording(false);
        auto seq = model.build_token_sequence(tape, rgb, kInstr, cond, targets,
                                              LatentKind::unified, Phase::pretrain);
        return model.forward(tape, seq).latent_logits.value();
    };

    const std::vector<int> base{2, 1};
    auto base_logits = logits_for(base);
    const int vocab = cfg.vocab();

    for (int j = 0; j < cfg.num_latents; ++j) {
        auto mutated = base;
        mutated[static_cast<std::size_t>(j)] =
            (base[static_cast<std::size_t>(j)] + 1) % cfg.codebook_entries;
        auto got = logits_for(mutated);
        for (int i = 0; i <= j; ++i)
            for (int v = 0; v < vocab; ++v)
                CHECK(got[static_cast<std::size_t>(i) * vocab + v] ==
                      base_logits[static_cast<std::size_t>(i) * vocab + v]);
        // strictly later rows must feel the change under generic weights
        if (j + 1 < cfg.num_latents) {
            bool later_changed = false;
            for (int i = j + 1; i < cfg.num_latents; ++i)
                for (int v = 0; v < vocab; ++v)
                    later_changed |= got[static_cast<std::size_t>(i) * vocab + v] !=
                                     base_logits[static_cast<std::size_t>(i) * vocab + v];
            CHECK(later_changed);
        }
    }
}

TEST_CASE("visual tokens condition every generated position") {
    auto cfg = tiny_lact();
    UniLact<double> model(cfg, 54);
    RngStream rng(55, "test/visual");
    auto rgb = random_rgb<double>(rng, cfg.frame_size);
    std::vector<int> cond{0, 0};
    std::vector<int> targets{1, 2};

    auto run = [&](const Tensor<double>& img) {
        Tape<double> tape;
        tape.set_recording(false);
        auto seq = model.build_token_sequence(tape, img, kInstr, cond, targets,
                                              LatentKind::unified, Phase::pretrain);
        return model.forward(tape, seq).latent_logits.value();
    };

    auto a = run(rgb);
    auto rgb2 = rgb.detach();
    rgb2.value()[10] += 0.25;
    auto b = run(rgb2);

    const int vocab = cfg.vocab();
    for (int i = 0; i < cfg.num_latents; ++i) {
        bool row_changed = false;
        for (int v = 0; v < vocab; ++v)
            row_changed |= a[static_cast<std::size_t>(i) * vocab + v] !=
                           b[static_cast<std::size_t>(i) * vocab + v];
        CAPTURE(i);
        CHECK(row_changed);
    }
}

TEST_CASE("teacher-forced NLL equals the sum of sequential single-token NLLs") {
    auto cfg = tiny_lact();
    UniLact<double> model(cfg, 56);
    RngStream rng(57, "test/eq7");
    auto rgb = random_rgb<double>(rng, cfg.frame_size);
    std::vector<int> cond{2, 0};
    const std::vector<int> targets_local{3, 1};

    Tape<double> tape;
    tape.set_recording(false);
    auto full_seq = model.build_token_sequence(
        tape, rgb, kInstr, cond, to_global_codes<double>(targets_local, LatentKind::unified, 4),
        LatentKind::unified, Phase::pretrain);
    auto full = model.forward(tape, full_seq);
    const double teacher_forced =
        model.latent_nll(tape, full.latent_logits, targets_local, LatentKind::unified).item();

    double sequential = 0;
    std::vector<int> prefix;
    for (int i = 0; i < cfg.num_latents; ++i) {
        auto seq = model.build_token_sequence(
            tape, rgb, kInstr, cond, to_global_codes<double>(prefix, LatentKind::unified, 4),
            LatentKind::unified, Phase::pretrain);
        auto fwd = model.forward(tape, seq);
        // conditional NLL of the next token from the last prediction row
        auto row = slice(tape, fwd.latent_logits, {i, vocab_offset(LatentKind::unified, 4)},
                         {1, cfg.codebook_entries});
        sequential +=
            cross_entropy_logits(tape, row, {targets_local[static_cast<std::size_t>(i)]}).item();
        prefix.push_back(targets_local[static_cast<std::size_t>(i)]);
    }
    CHECK(teacher_forced == doctest::Approx(sequential).epsilon(1e-6));

    // greedy loop-wise decoding sees the same logits as the teacher-forced pass
    auto fwd_prefix = model.forward(
        tape, model.build_token_sequence(
                  tape, rgb, kInstr, cond,
                  to_global_codes<double>({targets_local[0]}, LatentKind::unified, 4),
                  LatentKind::unified, Phase::pretrain));
    const int vocab = cfg.vocab();
    for (int v = 0; v < vocab; ++v)
        CHECK(fwd_prefix.latent_logits.value()[static_cast<std::size_t>(vocab) + v] ==
              doctest::Approx(full.latent_logits.value()[static_cast<std::size_t>(vocab) + v])
                  .epsilon(1e-9));
}

TEST_CASE("latent nll spot values") {
    auto cfg = tiny_lact();
    cfg.num_latents = 4;
    cfg.codebook_entries = 32;
    UniLact<double> model(cfg, 58);
    Tape<double> tape;

    SUBCASE("uniform logits give N * ln K") {
        auto logits = Tensor<double>::zeros({4, cfg.vocab()});
        auto nll = model.latent_nll(tape, logits, {0, 7, 31, 15}, LatentKind::unified);
        CHECK(nll.item() == doctest::Approx(4.0 * std::log(32.0)).epsilon(1e-12));
    }

    SUBCASE("near-one-hot correct logits give near-zero loss") {
        std::vector<double> data(static_cast<std::size_t>(4) * cfg.vocab(), 0.0);
        const std::vector<int> targets{3, 9, 20, 31};
        for (int i = 0; i < 4; ++i)
            data[static_cast<std::size_t>(i) * cfg.vocab() +
                 vocab_offset(LatentKind::unified, 32) + targets[static_cast<std::size_t>(i)]] = 30.0;
        auto logits = Tensor<double>::leaf({4, cfg.vocab()}, data, false);
        CHECK(model.latent_nll(tape, logits, targets, LatentKind::unified).item() < 1e-9);
    }

    SUBCASE("two-token case matches hand-computed cross entropy") {
        LactConfig small = tiny_lact();  // K = 4
        UniLact<double> m2(small, 59);
        std::vector<double> data(static_cast<std::size_t>(2) * small.vocab(), 0.0);
        // unified slice occupies columns [0, 4)
        const std::vector<double> row0{0.5, -1.0, 2.0, 0.0};
        const std::vector<double> row1{1.0, 1.0, -0.5, 3.0};
        for (int j = 0; j < 4; ++j) {
            data[static_cast<std::size_t>(j)] = row0[static_cast<std::size_t>(j)];
            data[static_cast<std::size_t>(small.vocab() + j)] = row1[static_cast<std::size_t>(j)];
        }
        auto logits = Tensor<double>::leaf({2, small.vocab()}, data, false);
        auto nll = m2.latent_nll(tape, logits, {2, 0}, LatentKind::unified);

        auto ce = [](const std::vector<double>& row, int t) {
            double mx = row[0];
            for (double v : row) mx = std::max(mx, v);
            double sum = 0;
            for (double v : row) sum += std::exp(v - mx);
            return -(row[static_cast<std::size_t>(t)] - mx - std::log(sum));
        };
        CHECK(nll.item() == doctest::Approx(ce(row0, 2) + ce(row1, 0)).epsilon(1e-12));
    }

    SUBCASE("out-of-vocab target rejected") {
        auto logits = Tensor<double>::zeros({4, cfg.vocab()});
        CHECK_THROWS_AS(model.latent_nll(tape, logits, {0, 1, 2, 32}, LatentKind::unified),
                        std::invalid_argument);
    }
}

TEST_CASE("per-kind masking: loss reads only the kind's vocabulary slice") {
    auto cfg = tiny_lact();
    UniLact<double> model(cfg, 60);
    Tape<double> tape;
    RngStream rng(61, "test/mask");
    std::vector<double> data(static_cast<std::size_t>(2) * cfg.vocab());
    for (auto& v : data) v = rng.next_normal();
    auto logits = Tensor<double>::leaf({2, cfg.vocab()}, data, false);
    const std::vector<int> targets{1, 2};
    const double base = model.latent_nll(tape, logits, targets, LatentKind::unified).item();

    // scrambling the rgb and depth slices must not move the unified loss
    auto scrambled = data;
    for (int i = 0; i < 2; ++i)
        for (int j = cfg.codebook_entries; j < cfg.vocab(); ++j)
            scrambled[static_cast<std::size_t>(i) * cfg.vocab() + j] += 10.0 * rng.next_normal();
    auto logits2 = Tensor<double>::leaf({2, cfg.vocab()}, scrambled, false);
    CHECK(model.latent_nll(tape, logits2, targets, LatentKind::unified).item() == base);
}

TEST_CASE("sample_target_kind is uniform and reproducible") {
    RngStream rng(62, "target_kind");
    int counts[3] = {0, 0, 0};
    const int n = 30000;
    for (int i = 0; i < n; ++i) counts[static_cast<int>(sample_target_kind(rng))]++;
    // 3 sigma of Binomial(n, 1/3)
    const double sigma = std::sqrt(n * (1.0 / 3) * (2.0 / 3));
    for (int k = 0; k < 3; ++k)
        CHECK(std::abs(counts[k] - n / 3.0) < 3 * sigma);

    RngStream a(63, "target_kind"), b(63, "target_kind");
    for (int i = 0; i < 50; ++i) CHECK(sample_target_kind(a) == sample_target_kind(b));
}

TEST_CASE("pretrain step: lr=0 leaves parameters unchanged; steps are deterministic") {
    auto cfg = tiny_lact();
    UniLact<float> model(cfg, 64);
    RngStream rng(65, "test/pretrain");
    std::vector<LactSample<float>> batch{random_sample<float>(cfg, rng),
                                         random_sample<float>(cfg, rng)};

    auto before = model.params().get("trunk.blk0.wq.w").value();
    AdamW<float> opt0;
    opt0.hp.lr = 0.0f;
    pretrain_step(model, batch, LatentKind::unified, false, opt0);
    CHECK(model.params().get("trunk.blk0.wq.w").value() == before);

    UniLact<float> m1(cfg, 66), m2(cfg, 66);
    AdamW<float> o1, o2;
    pretrain_step(m1, batch, LatentKind::rgb, false, o1);
    pretrain_step(m2, batch, LatentKind::rgb, false, o2);
    for (std::size_t i = 0; i < m1.params().entries().size(); ++i)
        CHECK(m1.params().entries()[i].second.value() == m2.params().entries()[i].second.value());
}

TEST_CASE("multi-task loss is the sum of the three per-kind losses") {
    auto cfg = tiny_lact();
    UniLact<double> model(cfg, 67);
    RngStream rng(68, "test/multi");
    std::vector<LactSample<double>> batch{random_sample<double>(cfg, rng)};

    Tape<double> tape;
    double expected = 0;
    for (LatentKind k : {LatentKind::unified, LatentKind::rgb, LatentKind::depth})
        expected += pretrain_batch_nll(tape, model, batch, k).item();

    Tape<double> t2;
    Tensor<double> loss;
    for (LatentKind k : {LatentKind::unified, LatentKind::rgb, LatentKind::depth}) {
        auto nll = pretrain_batch_nll(t2, model, batch, k);
        loss = loss.defined() ? add(t2, loss, nll) : nll;
    }
    CHECK(loss.item() == doctest::Approx(expected).epsilon(1e-12));
}
