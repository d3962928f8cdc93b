#pragma once

#include <array>
#include <cmath>
#include <cstdint>

namespace ctseg {

// Deterministic xoshiro256++ generator. We avoid <random> distributions on
// purpose: their output is implementation-defined, and reproducibility of
// training runs and synthetic datasets must not depend on the standard
// library build.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) { reseed(seed); }

    void reseed(uint64_t seed) {
        uint64_t x = seed;
        for (auto& s : state_) s = splitmix64(x);
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0,1) with 53 random bits.
    double uniform01() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n), n >= 1. Multiply-shift map; the bias for
    // n << 2^64 is far below anything observable here.
    uint64_t uniform_index(uint64_t n) {
        return uint64_t((__uint128_t(next_u64()) * n) >> 64);
    }

    int uniform_int(int lo, int hi) {  // inclusive range [lo, hi]
        return lo + int(uniform_index(uint64_t(hi - lo + 1)));
    }

    bool bernoulli(double p) { return uniform01() < p; }

    // Box-Muller; consumes two uniforms per call so the draw count per
    // sample is fixed and replayable.
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        double u2 = uniform01();
        // push u1 away from 0 so log() stays finite
        u1 = u1 + 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(6.283185307179586476925287 * u2);
    }

    // Derive an independent child stream; used to decouple e.g. weight
    // init from patch sampling so adding draws to one cannot shift the other.
    Rng fork(uint64_t stream_tag) const {
        uint64_t x = state_[0] ^ rotl(state_[2], 13) ^ (stream_tag * 0x9e3779b97f4a7c15ULL);
        Rng child(0);
        for (auto& s : child.state_) s = splitmix64(x);
        return child;
    }

    std::array<uint64_t, 4> serialize() const { return state_; }
    void restore(const std::array<uint64_t, 4>& s) { state_ = s; }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    static uint64_t splitmix64(uint64_t& x) {
        uint64_t z = (x += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::array<uint64_t, 4> state_{};
};

}  // namespace ctseg
