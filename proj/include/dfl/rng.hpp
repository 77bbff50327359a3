#pragma once

#include <cmath>
#include <cstdint>
#include <string>

namespace dfl {

// ---------------------------------------------------------------------------
// Deterministic random numbers. xoshiro256** with a splitmix64 seeder; the
// distributions below are implemented here rather than taken from
// <random> so that streams are reproducible bit-for-bit regardless of the
// standard library in use.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(uint64_t seed = 0) {
        uint64_t sm = seed;
        for (auto& si : s_) si = splitmix64(sm);
    }

    /// Child stream: deterministic function of (parent seed, tag). Used to
    /// hand independent streams to scenes/workers without sharing state.
    Rng fork(uint64_t tag) const {
        uint64_t sm = s_[0] ^ (0x9e6c63d0876a9a35ull * (tag + 1));
        Rng r(0);
        for (auto& si : r.s_) si = splitmix64(sm);
        return r;
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    /// Uniform in [0, 1).
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [0, n).
    uint64_t below(uint64_t n) { return n ? next_u64() % n : 0; }

    /// Standard normal via Box-Muller (no cached spare; keeps the stream a
    /// pure function of the draw count).
    double normal() {
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    uint64_t s_[4];
};

/// FNV-1a, used for seed-stable id hashing (dataset splits, caches).
inline uint64_t hash64(const std::string& s, uint64_t seed = 0) {
    uint64_t h = 1469598103934665603ull ^ (seed * 0x9e3779b97f4a7c15ull);
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    return h;
}

}  // namespace dfl
