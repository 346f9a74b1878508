#include <cmath>
#include <vector>

#include "doctest.h"
#include "ulact/evalharness.hpp"
#include "ulact/tensor.hpp"

using namespace ulact;

namespace {

struct ProbeData {
    std::vector<std::vector<double>> x_train, y_train, x_test, y_test;
};

ProbeData make_linear_data(RngStream& rng, int n_train, int n_test, int d, int m,
                           bool targets_equal_latents) {
    ProbeData data;
    // ground-truth linear map for the generic case
    std::vector<double> w(static_cast<std::size_t>(d) * m);
    for (auto& v : w) v = rng.next_normal();
    auto emit = [&](int n, std::vector<std::vector<double>>& xs, std::vector<std::vector<double>>& ys) {
        for (int i = 0; i < n; ++i) {
            std::vector<double> x(static_cast<std::size_t>(d));
            for (auto& v : x) v = rng.next_normal();
            std::vector<double> y(static_cast<std::size_t>(m), 0.0);
            if (targets_equal_latents) {
                for (int c = 0; c < m; ++c) y[static_cast<std::size_t>(c)] = x[static_cast<std::size_t>(c)];
            } else {
                for (int c = 0; c < m; ++c)
                    for (int j = 0; j < d; ++j)
                        y[static_cast<std::size_t>(c)] +=
                            x[static_cast<std::size_t>(j)] * w[static_cast<std::size_t>(j) * m + c];
            }
            xs.push_back(std::move(x));
            ys.push_back(std::move(y));
        }
    };
    emit(n_train, data.x_train, data.y_train);
    emit(n_test, data.x_test, data.y_test);
    return data;
}

}  // namespace

TEST_CASE("probe: latents identical to targets give R^2 within 1e-3 of 1") {
    RngStream rng(90, "test/probe_identity");
    auto data = make_linear_data(rng, 400, 100, 4, 4, true);
    auto result = fit_linear_probe(data.x_train, data.y_train, data.x_test, data.y_test, 1e-3);
    for (double r2 : result.r2) {
        CHECK(r2 <= 1.0);
        CHECK(r2 > 1.0 - 1e-3);
    }
}

TEST_CASE("probe: shuffled targets give held-out R^2 near zero") {
    RngStream rng(91, "test/probe_shuffle");
    auto data = make_linear_data(rng, 400, 200, 6, 1, false);
    // destroy the relationship by shuffling training targets
    for (std::size_t i = data.y_train.size(); i > 1; --i)
        std::swap(data.y_train[i - 1], data.y_train[rng.next_below(i)]);
    for (std::size_t i = data.y_test.size(); i > 1; --i)
        std::swap(data.y_test[i - 1], data.y_test[rng.next_below(i)]);
    auto result = fit_linear_probe(data.x_train, data.y_train, data.x_test, data.y_test, 1e-3);
    CHECK(result.r2[0] <= 0.05);
}

TEST_CASE("probe: closed form matches a gradient-descent oracle") {
    RngStream rng(92, "test/probe_gd");
    auto data = make_linear_data(rng, 60, 20, 4, 2, false);
    const double lambda = 0.05;
    auto closed = fit_linear_probe(data.x_train, data.y_train, data.x_test, data.y_test, lambda);

    // gradient descent on the same objective: sum_i ||x_i W + b - y_i||^2 +
    // lambda ||W||^2, run through the autodiff engine until converged
    const int n = static_cast<int>(data.x_train.size()), d = 4, m = 2;
    std::vector<double> xflat, yflat;
    for (const auto& r : data.x_train) xflat.insert(xflat.end(), r.begin(), r.end());
    for (const auto& r : data.y_train) yflat.insert(yflat.end(), r.begin(), r.end());
    auto x = Tensor<double>::leaf({n, d}, xflat, false);
    auto y = Tensor<double>::leaf({n, m}, yflat, false);
    auto w = Tensor<double>::zeros({d, m}, true);
    auto b = Tensor<double>::zeros({m}, true);
    std::vector<Tensor<double>> params{w, b};
    AdamW<double> opt;
    opt.hp.lr = 0.02;
    for (int step = 0; step < 6000; ++step) {
        Tape<double> tape;
        auto pred = add_bias(tape, matmul(tape, x, w), b);
        auto sq = mse_loss(tape, pred, y);  // mean; rescale to a sum below
        auto obj = add(tape, scale(tape, sq, static_cast<double>(n * m)),
                       scale(tape, mse_loss(tape, w, Tensor<double>::zeros({d, m})),
                             lambda * d * m));
        opt.zero_grad(params);
        tape.backward(obj);
        opt.step(params);
    }
    for (int j = 0; j < d; ++j)
        for (int c = 0; c < m; ++c)
            CHECK(w.value()[static_cast<std::size_t>(j) * m + c] ==
                  doctest::Approx(closed.weights[static_cast<std::size_t>(j) * m + c]).epsilon(1e-4));
    for (int c = 0; c < m; ++c)
        CHECK(b.value()[static_cast<std::size_t>(c)] ==
              doctest::Approx(closed.weights[static_cast<std::size_t>(d) * m + c]).epsilon(1e-4));
}

TEST_CASE("probe rejects non-positive ridge penalty") {
    RngStream rng(93, "test/probe_reject");
    auto data = make_linear_data(rng, 10, 5, 2, 1, false);
    CHECK_THROWS_WITH_AS(fit_linear_probe(data.x_train, data.y_train, data.x_test, data.y_test, 0.0),
                         doctest::Contains("ridge_lambda"), std::invalid_argument);
}

TEST_CASE("usage stats: uniform usage gives perplexity K, single code gives 1") {
    std::vector<std::vector<int>> uniform;
    for (int c = 0; c < 32; ++c) uniform.push_back({c});
    CHECK(usage_stats(uniform, 32).perplexity == doctest::Approx(32.0).epsilon(1e-12));

    std::vector<std::vector<int>> single(100, std::vector<int>{7});
    CHECK(usage_stats(single, 32).perplexity == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("usage stats: random codes land near the multinomial expectation") {
    RngStream rng(94, "test/usage");
    const int k = 16, draws = 20000;
    std::vector<std::vector<int>> rows;
    for (int i = 0; i < draws; ++i) rows.push_back({static_cast<int>(rng.next_below(k))});
    auto stats = usage_stats(rows, k);
    // each bucket within 3 sigma of draws / k
    const double expect = static_cast<double>(draws) / k;
    const double sigma = std::sqrt(draws * (1.0 / k) * (1.0 - 1.0 / k));
    for (auto h : stats.histogram) CHECK(std::abs(static_cast<double>(h) - expect) < 3 * sigma);
    CHECK(stats.perplexity > 0.95 * k);
}

TEST_CASE("cache usage stats reject an empty cache") {
    CHECK_THROWS_AS(cache_usage_stats({}, LatentKind::unified, 32), std::invalid_argument);
}

TEST_CASE("wilson interval spot values") {
    auto full = wilson_interval(10, 10);
    CHECK(full.rate == 1.0);
    CHECK(full.lo == doctest::Approx(0.7225).epsilon(5e-4));
    CHECK(full.hi == 1.0);

    auto none = wilson_interval(0, 10);
    CHECK(none.rate == 0.0);
    CHECK(none.hi == doctest::Approx(0.2775).epsilon(5e-4));
    CHECK(none.lo == 0.0);

    CHECK_THROWS_AS(wilson_interval(0, 0), std::invalid_argument);
}

TEST_CASE("psnr is consistent with mse") {
    CHECK(psnr_from_mse(0.01) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(psnr_from_mse(1.0) == doctest::Approx(0.0).epsilon(1e-12));
}
