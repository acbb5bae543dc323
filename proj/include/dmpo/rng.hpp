#pragma once

#include <cstdint>
#include <random>

#include "dmpo/math_util.hpp"

namespace dmpo {

// Seeded random stream. Every stochastic component owns one of these;
// nothing in the library touches a global generator. Normal draws go
// through the inverse CDF so one draw consumes exactly one uniform.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : gen_(seed), seed_mix_(seed) {}

    // uniform in [0, 1)
    double uniform() {
        return std::generate_canonical<double, 53>(gen_);
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    double normal() {
        // Nudge away from 0 so the inverse CDF stays finite.
        double u = uniform();
        if (u <= 0.0) u = 5e-324;
        return norm_inv_cdf(u);
    }

    double normal(double mean, double stddev) {
        return mean + stddev * normal();
    }

    uint64_t next_u64() { return gen_(); }

    // Independent child stream. splitmix64 scrambles (seed, id) so
    // adjacent ids do not produce correlated streams.
    Rng fork(uint64_t id) const {
        uint64_t z = seed_mix_ + 0x9e3779b97f4a7c15ULL * (id + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        z = z ^ (z >> 31);
        return Rng(z);
    }

    void reseed(uint64_t seed) {
        gen_.seed(seed);
        seed_mix_ = seed;
    }

private:
    std::mt19937_64 gen_;
    uint64_t seed_mix_ = 0;
};

}  // namespace dmpo
