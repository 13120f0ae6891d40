#pragma once

#include <cmath>
#include <cstdint>
#include <random>

// Seeded randomness used by trace synthesis and bootstrap resampling.
// The generator (mt19937_64) and the normal transform (Box-Muller on the
// 53-bit uniform) are both fully specified, so fixtures generated from a
// given seed are reproducible across implementations. Emitted fixture files
// record this choice in their header.

namespace sawkit {

/// SplitMix64 step; used to derive independent per-task seeds from a run seed.
inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for task `index` of a run seeded with `run_seed`.
inline std::uint64_t task_seed(std::uint64_t run_seed, std::uint64_t index) {
    return splitmix64(run_seed ^ splitmix64(index + 1));
}

/// Standard-normal sampler: mt19937_64 + Box-Muller.
class GaussianSampler {
public:
    explicit GaussianSampler(std::uint64_t seed) : engine_(seed) {}

    double operator()() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // u1 in (0,1], u2 in [0,1); both built from 53-bit draws.
        double u1 = (static_cast<double>(engine_() >> 11) + 1.0) * 0x1.0p-53;
        double u2 = static_cast<double>(engine_() >> 11) * 0x1.0p-53;
        double radius = std::sqrt(-2.0 * std::log(u1));
        double angle = 2.0 * M_PI * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

}  // namespace sawkit
