#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>

namespace ulact {

// Counter-based splittable generator. A stream is addressed by (seed, name);
// draws are a pure function of (key, counter), so streams can be created in
// any order and split freely without affecting each other.
class RngStream {
public:
    RngStream() : RngStream(0, "default") {}

    RngStream(std::uint64_t seed, std::string_view name)
        : key_(mix64(seed ^ fnv1a(name))), counter_(0) {}

    // Derive an independent child stream, e.g. per episode or per grid cell.
    RngStream split(std::string_view name) const {
        RngStream child;
        child.key_ = mix64(key_ ^ fnv1a(name));
        child.counter_ = 0;
        child.has_spare_ = false;
        child.spare_ = 0.0;
        return child;
    }

    RngStream split(std::uint64_t index) const {
        RngStream child;
        child.key_ = mix64(key_ ^ (0x9E3779B97F4A7C15ull * (index + 1)));
        child.counter_ = 0;
        child.has_spare_ = false;
        child.spare_ = 0.0;
        return child;
    }

    std::uint64_t next_u64() {
        return mix64(key_ + 0x9E3779B97F4A7C15ull * ++counter_);
    }

    // Uniform in [0, 1), 53-bit resolution.
    double next_unit() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double next_uniform(double lo, double hi) {
        return lo + (hi - lo) * next_unit();
    }

    // Box-Muller with cached spare.
    double next_normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        const double u = 1.0 - next_unit();  // (0, 1]
        const double v = next_unit();
        const double r = std::sqrt(-2.0 * std::log(u));
        const double a = 6.283185307179586476925286766559 * v;
        spare_ = r * std::sin(a);
        has_spare_ = true;
        return r * std::cos(a);
    }

    // Unbiased integer in [0, n) via rejection.
    std::uint64_t next_below(std::uint64_t n) {
        if (n <= 1) return 0;
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    struct State {
        std::uint64_t key = 0;
        std::uint64_t counter = 0;
        bool has_spare = false;
        double spare = 0.0;
    };

    State state() const { return {key_, counter_, has_spare_, spare_}; }

    void restore(const State& st) {
        key_ = st.key;
        counter_ = st.counter;
        has_spare_ = st.has_spare;
        spare_ = st.spare;
    }

    static std::uint64_t fnv1a(std::string_view s) {
        std::uint64_t h = 1469598103934665603ull;
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
        return h;
    }

private:
    // splitmix64 finalizer
    static std::uint64_t mix64(std::uint64_t x) {
        x += 0x9E3779B97F4A7C15ull;
        x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
        x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
        return x ^ (x >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace ulact
