// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>

namespace restune {

/// Seeded random source. Every stochastic routine in the library takes one of
/// these explicitly so that a (seed, config) pair pins the whole run.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    double gaussian(double mean = 0.0, double stddev = 1.0) {
        std::normal_distribution<double> d(mean, stddev);
        return d(eng_);
    }

    double uniform(double lo, double hi) {
        std::uniform_real_distribution<double> d(lo, hi);
        return d(eng_);
    }

    /// Uniform integer in [0, n).
    std::uint64_t index(std::uint64_t n) {
        std::uniform_int_distribution<std::uint64_t> d(0, n - 1);
        return d(eng_);
    }

    /// Derive an independent stream; used to keep train/test draws disjoint.
    Rng fork(std::uint64_t stream) {
        return Rng(eng_() ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
    }

private:
    std::mt19937_64 eng_;
};

} // namespace restune
