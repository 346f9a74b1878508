#include "ulact/evalharness.hpp"

#include <cmath>
#include <stdexcept>

namespace ulact {

std::vector<double> solve_linear_system(std::vector<double> a, std::vector<double> b, int n,
                                        int nrhs) {
    // Gaussian elimination with partial pivoting; a is n x n, b is n x nrhs.
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        double best = std::abs(a[static_cast<std::size_t>(col) * n + col]);
        for (int r = col + 1; r < n; ++r) {
            const double v = std::abs(a[static_cast<std::size_t>(r) * n + col]);
            if (v > best) {
                best = v;
                pivot = r;
            }
        }
        if (best == 0.0) throw std::invalid_argument("probe: singular system; use ridge_lambda > 0");
        if (pivot != col) {
            for (int c = 0; c < n; ++c)
                std::swap(a[static_cast<std::size_t>(col) * n + c],
                          a[static_cast<std::size_t>(pivot) * n + c]);
            for (int c = 0; c < nrhs; ++c)
                std::swap(b[static_cast<std::size_t>(col) * nrhs + c],
                          b[static_cast<std::size_t>(pivot) * nrhs + c]);
        }
        const double diag = a[static_cast<std::size_t>(col) * n + col];
        for (int r = col + 1; r < n; ++r) {
            const double f = a[static_cast<std::size_t>(r) * n + col] / diag;
            if (f == 0.0) continue;
            for (int c = col; c < n; ++c)
                a[static_cast<std::size_t>(r) * n + c] -= f * a[static_cast<std::size_t>(col) * n + c];
            for (int c = 0; c < nrhs; ++c)
                b[static_cast<std::size_t>(r) * nrhs + c] -= f * b[static_cast<std::size_t>(col) * nrhs + c];
        }
    }
    std::vector<double> x(static_cast<std::size_t>(n) * nrhs, 0.0);
    for (int r = n - 1; r >= 0; --r) {
        for (int c = 0; c < nrhs; ++c) {
            double acc = b[static_cast<std::size_t>(r) * nrhs + c];
            for (int k = r + 1; k < n; ++k)
                acc -= a[static_cast<std::size_t>(r) * n + k] * x[static_cast<std::size_t>(k) * nrhs + c];
            x[static_cast<std::size_t>(r) * nrhs + c] = acc / a[static_cast<std::size_t>(r) * n + r];
        }
    }
    return x;
}

ProbeResult fit_linear_probe(const std::vector<std::vector<double>>& x_train,
                             const std::vector<std::vector<double>>& y_train,
                             const std::vector<std::vector<double>>& x_test,
                             const std::vector<std::vector<double>>& y_test, double ridge_lambda) {
    if (!(ridge_lambda > 0.0))
        throw std::invalid_argument("probe: ridge_lambda must be > 0, got " +
                                    std::to_string(ridge_lambda));
    if (x_train.empty() || x_train.size() != y_train.size() || x_test.size() != y_test.size() ||
        x_test.empty())
        throw std::invalid_argument("probe: empty or mismatched train/test splits");

    const int d = static_cast<int>(x_train[0].size());
    const int m = static_cast<int>(y_train[0].size());
    const int f = d + 1;  // bias feature

    // Normal equations: (X^T X + lambda I) W = X^T Y, bias unpenalized.
    std::vector<double> xtx(static_cast<std::size_t>(f) * f, 0.0);
    std::vector<double> xty(static_cast<std::size_t>(f) * m, 0.0);
    std::vector<double> row(static_cast<std::size_t>(f));
    for (std::size_t i = 0; i < x_train.size(); ++i) {
        for (int j = 0; j < d; ++j) row[static_cast<std::size_t>(j)] = x_train[i][static_cast<std::size_t>(j)];
        row[static_cast<std::size_t>(d)] = 1.0;
        for (int a = 0; a < f; ++a) {
            for (int b2 = 0; b2 < f; ++b2)
                xtx[static_cast<std::size_t>(a) * f + b2] +=
                    row[static_cast<std::size_t>(a)] * row[static_cast<std::size_t>(b2)];
            for (int c = 0; c < m; ++c)
                xty[static_cast<std::size_t>(a) * m + c] +=
                    row[static_cast<std::size_t>(a)] * y_train[i][static_cast<std::size_t>(c)];
        }
    }
    for (int j = 0; j < d; ++j) xtx[static_cast<std::size_t>(j) * f + j] += ridge_lambda;

    ProbeResult result;
    result.weights = solve_linear_system(std::move(xtx), std::move(xty), f, m);

    // Held-out R^2 per target dimension.
    std::vector<double> mean(static_cast<std::size_t>(m), 0.0);
    for (const auto& y : y_test)
        for (int c = 0; c < m; ++c) mean[static_cast<std::size_t>(c)] += y[static_cast<std::size_t>(c)];
    for (auto& v : mean) v /= static_cast<double>(y_test.size());

    std::vector<double> sse(static_cast<std::size_t>(m), 0.0), sst(static_cast<std::size_t>(m), 0.0);
    for (std::size_t i = 0; i < x_test.size(); ++i) {
        for (int c = 0; c < m; ++c) {
            double pred = result.weights[static_cast<std::size_t>(d) * m + c];  // bias
            for (int j = 0; j < d; ++j)
                pred += x_test[i][static_cast<std::size_t>(j)] *
                        result.weights[static_cast<std::size_t>(j) * m + c];
            const double err = y_test[i][static_cast<std::size_t>(c)] - pred;
            sse[static_cast<std::size_t>(c)] += err * err;
            const double dev = y_test[i][static_cast<std::size_t>(c)] - mean[static_cast<std::size_t>(c)];
            sst[static_cast<std::size_t>(c)] += dev * dev;
        }
    }
    result.r2.resize(static_cast<std::size_t>(m));
    for (int c = 0; c < m; ++c) {
        const double denom = std::max(sst[static_cast<std::size_t>(c)], 1e-12);
        result.r2[static_cast<std::size_t>(c)] = 1.0 - sse[static_cast<std::size_t>(c)] / denom;
    }
    return result;
}

UsageStats usage_stats(const std::vector<std::vector<int>>& code_rows, int entries) {
    UsageStats stats;
    stats.histogram.assign(static_cast<std::size_t>(entries), 0);
    std::int64_t total = 0;
    for (const auto& row : code_rows)
        for (int c : row) {
            stats.histogram[static_cast<std::size_t>(c)]++;
            ++total;
        }
    if (total == 0) {
        stats.perplexity = 0;
        return stats;
    }
    double entropy = 0;
    for (auto h : stats.histogram) {
        if (h == 0) continue;
        const double p = static_cast<double>(h) / static_cast<double>(total);
        entropy -= p * std::log(p);
    }
    stats.perplexity = std::exp(entropy);
    return stats;
}

UsageStats cache_usage_stats(const std::vector<LatentRecord>& records, LatentKind kind,
                             int entries) {
    if (records.empty()) throw std::invalid_argument("usage stats: empty latent cache");
    std::vector<std::vector<int>> rows;
    rows.reserve(records.size());
    for (const auto& r : records) {
        const auto& col = (kind == LatentKind::rgb) ? r.rgb
                          : (kind == LatentKind::depth) ? r.depth
                                                        : r.unified;
        rows.emplace_back(col.begin(), col.end());
    }
    return usage_stats(rows, entries);
}

RateCI wilson_interval(int successes, int n, double z) {
    if (n <= 0) throw std::invalid_argument("wilson_interval: empty report");
    RateCI ci;
    ci.successes = successes;
    ci.n = n;
    ci.rate = static_cast<double>(successes) / n;
    const double z2 = z * z;
    const double denom = 1.0 + z2 / n;
    const double center = (ci.rate + z2 / (2.0 * n)) / denom;
    const double half = z * std::sqrt(ci.rate * (1.0 - ci.rate) / n + z2 / (4.0 * n * n)) / denom;
    ci.lo = std::max(0.0, center - half);
    ci.hi = std::min(1.0, center + half);
    return ci;
}

}  // namespace ulact
