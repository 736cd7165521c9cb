#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace moelab {

// Deterministic random source. mt19937_64 output is fully specified by the
// standard; the distribution helpers below are hand-rolled because
// std::*_distribution is implementation-defined and would break
// byte-reproducibility across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    std::uint64_t next_u64() { return gen_(); }

    // Uniform in [0, 1), 53-bit resolution.
    double next_double() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t next_below(std::uint64_t n) {
        if (n == 0) throw std::invalid_argument("next_below: n must be positive");
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    int next_int(int lo, int hi_exclusive) {
        return lo + static_cast<int>(next_below(
                        static_cast<std::uint64_t>(hi_exclusive - lo)));
    }

    // Standard normal via Box-Muller; one value per call, no caching, so a
    // draw sequence depends only on call count.
    double next_normal() {
        double u1 = next_double();
        while (u1 <= 0.0) u1 = next_double();
        const double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) *
               std::cos(6.283185307179586476925286766559 * u2);
    }

    double next_normal(double mean, double stddev) {
        return mean + stddev * next_normal();
    }

    // Index into cumulative weights (weights need not be normalized).
    int next_categorical(const std::vector<double>& weights) {
        double total = 0.0;
        for (double w : weights) total += w;
        double r = next_double() * total;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            r -= weights[i];
            if (r < 0.0) return static_cast<int>(i);
        }
        return static_cast<int>(weights.size()) - 1;
    }

    // Derive an independent stream for a named sub-component.
    Rng fork(std::uint64_t salt) {
        return Rng(gen_() ^ (salt * 0x9e3779b97f4a7c15ull));
    }

private:
    std::mt19937_64 gen_;
};

}  // namespace moelab
