#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>

namespace mcra {

// Reproducible random pipeline used everywhere in the project. The exact
// draw recipe is part of the dataset file contract, so it is spelled out
// here and must not change:
//
//   1. splitmix64 expands a 64-bit seed into generator state.
//   2. xoshiro256++ produces the raw 64-bit stream.
//   3. uniform doubles are (x >> 11) * 2^-53, i.e. in [0, 1).
//   4. normal pairs come from Box-Muller:
//        r = sqrt(-2 ln(1 - u1)), theta = 2 pi u2,
//        first output r cos(theta), second r sin(theta).
//
// Independent streams are derived by seeding a fresh generator: sample k of
// a dataset draws its topology and then its fading from one stream seeded
// with seed ^ (k + 1), which makes samples shardable across workers.

struct SplitMix64 {
    std::uint64_t state;

    explicit SplitMix64(std::uint64_t seed) : state(seed) {}

    std::uint64_t next() {
        std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }
};

class Rng {
  public:
    explicit Rng(std::uint64_t seed) {
        SplitMix64 sm(seed);
        for (auto& word : state_) {
            word = sm.next();
        }
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    /// Uniform double in [0, 1), 53 random bits.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform double in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    /// One Box-Muller pair of independent standard normals.
    void normal_pair(double& z0, double& z1) {
        const double u1 = uniform01();
        const double u2 = uniform01();
        const double r = std::sqrt(-2.0 * std::log(1.0 - u1));
        const double theta = 2.0 * std::numbers::pi * u2;
        z0 = r * std::cos(theta);
        z1 = r * std::sin(theta);
    }

  private:
    static std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::uint64_t state_[4];
};

}  // namespace mcra
