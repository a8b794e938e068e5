#pragma once

// Deterministic seeded random streams.
//
// Every stochastic choice in the pipeline (mask sampling, goal sampling,
// parameter init, data shuffling) draws from its own named stream derived
// from the master seed, so changing one stream's consumption never shifts
// the draws of another. Hand-rolled generators keep the byte-exact
// reproducibility promise independent of the standard library build.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "clsim/common.hpp"

namespace clsim {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace detail

class SeedStream {
public:
    SeedStream(std::uint64_t master_seed, const std::string& name) {
        std::uint64_t h = fnv1a64(name);
        h = fnv1a64(&master_seed, sizeof(master_seed), h);
        state_ = h;
        // burn-in decorrelates nearby seeds
        detail::splitmix64(state_);
        detail::splitmix64(state_);
    }

    // Child stream, e.g. per-sample or per-epoch.
    SeedStream fork(const std::string& name, std::uint64_t index = 0) const {
        std::uint64_t h = fnv1a64(name);
        h = fnv1a64(&state_, sizeof(state_), h);
        h = fnv1a64(&index, sizeof(index), h);
        return SeedStream(h);
    }

    std::uint64_t next_u64() { return detail::splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    std::uint64_t uniform_int(std::uint64_t n) {
        // multiply-shift; bias is negligible for the small n used here
        return static_cast<std::uint64_t>(uniform() * static_cast<double>(n));
    }

    bool bernoulli(double p) { return uniform() < p; }

    // standard normal, Box-Muller (one value per call, no cache)
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        if (u1 < 1e-300) u1 = 1e-300;
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    explicit SeedStream(std::uint64_t raw_state) : state_(raw_state) {
        detail::splitmix64(state_);
    }

    std::uint64_t state_;
};

}  // namespace clsim
