#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ulact/latent_cache.hpp"
#include "ulact/unilarn.hpp"

namespace ulact {

// ---------------------------------------------------------------------------
// Linear probing: closed-form ridge regression from frozen latents to expert
// actions, scored as held-out R-squared per action dimension.
// ---------------------------------------------------------------------------

struct ProbeResult {
    std::vector<double> r2;       // per target dimension, on held-out rows
    std::vector<double> weights;  // (features + 1) x targets, bias row last
    std::string latent_kind;
};

ProbeResult fit_linear_probe(const std::vector<std::vector<double>>& x_train,
                             const std::vector<std::vector<double>>& y_train,
                             const std::vector<std::vector<double>>& x_test,
                             const std::vector<std::vector<double>>& y_test, double ridge_lambda);

// Dense symmetric solve used by the probe; exposed for the oracle tests.
std::vector<double> solve_linear_system(std::vector<double> a, std::vector<double> b, int n,
                                        int nrhs);

// ---------------------------------------------------------------------------
// Codebook usage diagnostics.
// ---------------------------------------------------------------------------

struct UsageStats {
    std::vector<std::int64_t> histogram;
    double perplexity = 0;  // exp(entropy) of the empirical code distribution
};

UsageStats usage_stats(const std::vector<std::vector<int>>& code_rows, int entries);
UsageStats cache_usage_stats(const std::vector<LatentRecord>& records, LatentKind kind, int entries);

// ---------------------------------------------------------------------------
// Success rates with Wilson 95% intervals.
// ---------------------------------------------------------------------------

struct RateCI {
    int successes = 0;
    int n = 0;
    double rate = 0;
    double lo = 0;
    double hi = 0;
};

RateCI wilson_interval(int successes, int n, double z = 1.96);

// ---------------------------------------------------------------------------
// Reconstruction quality of a frozen latent learner on held-out pairs,
// reported against the copy-the-current-frame baseline.
// ---------------------------------------------------------------------------

struct ReconReport {
    double mse_rgb = 0, mse_depth = 0;
    double psnr_rgb = 0, psnr_depth = 0;
    double baseline_mse_rgb = 0, baseline_mse_depth = 0;  // predict o_t for o_{t+H}
};

inline double psnr_from_mse(double mse) {
    return 10.0 * std::log10(1.0 / std::max(mse, 1e-12));
}

template <typename T>
ReconReport reconstruction_error(UniLarn<T>& model, const std::vector<FramePair<T>>& pairs) {
    if (pairs.empty()) shape_error("reconstruction_error", "no pairs");
    ReconReport rep;
    auto mse_values = [](const std::vector<T>& a, const std::vector<T>& b) {
        double acc = 0;
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
            acc += d * d;
        }
        return acc / static_cast<double>(a.size());
    };
    for (const auto& pair : pairs) {
        Tape<T> tape;
        tape.set_recording(false);
        auto parts = model.loss(tape, {pair});
        rep.mse_rgb += parts.recon_rgb.item();
        rep.mse_depth += parts.recon_depth.item();
        rep.baseline_mse_rgb += mse_values(pair.rgb_now.value(), pair.rgb_future.value());
        rep.baseline_mse_depth += mse_values(pair.depth_now.value(), pair.depth_future.value());
    }
    const double inv = 1.0 / static_cast<double>(pairs.size());
    rep.mse_rgb *= inv;
    rep.mse_depth *= inv;
    rep.baseline_mse_rgb *= inv;
    rep.baseline_mse_depth *= inv;
    rep.psnr_rgb = psnr_from_mse(rep.mse_rgb);
    rep.psnr_depth = psnr_from_mse(rep.mse_depth);
    return rep;
}

}  // namespace ulact
