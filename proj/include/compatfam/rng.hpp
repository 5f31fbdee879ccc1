#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace compatfam {

/// Seeded PRNG with hand-rolled distributions. std::mt19937_64 output is
/// pinned by the standard; the distribution layers in <random> are not, so
/// everything derived here is written out explicitly to keep byte-identical
/// outputs across compilers.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    /// Uniform in [0,1), 53-bit resolution.
    double uniform() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Unbiased integer in [0,n) via rejection.
    std::uint64_t below(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t r;
        do {
            r = eng_();
        } while (r >= limit);
        return r % n;
    }

    bool coin() { return uniform() < 0.5; }

    /// Standard normal via Box-Muller (no cached spare: one draw, two uniforms).
    double normal() {
        double u1 = 1.0 - uniform();  // (0,1]
        double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

    /// Independent child stream. splitmix64 over (state snapshot, id).
    Rng fork(std::uint64_t stream_id) {
        std::uint64_t x = eng_() ^ (0x9E3779B97F4A7C15ULL * (stream_id + 1));
        x ^= x >> 30;
        x *= 0xBF58476D1CE4E5B9ULL;
        x ^= x >> 27;
        x *= 0x94D049BB133111EBULL;
        x ^= x >> 31;
        return Rng(x);
    }

private:
    std::mt19937_64 eng_;
};

}  // namespace compatfam
