#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>

#include "phr/common.hpp"

namespace phr {

/// Deterministic random stream. Wraps mt19937_64 (whose output sequence is
/// pinned by the standard) and implements its own gaussian / uniform draws so
/// results do not depend on libstdc++ distribution internals.
class Rng {
public:
    explicit Rng(u64 seed) : seed_(seed), engine_(seed) {}

    u64 seed() const { return seed_; }
    u64 next_u64() { return engine_(); }

    /// Uniform double in [0, 1).
    double uniform() {
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    /// Uniform integer in [lo, hi] inclusive.
    i64 uniform_int(i64 lo, i64 hi) {
        require(lo <= hi, "uniform_int: lo > hi");
        u64 span = static_cast<u64>(hi - lo) + 1;
        return lo + static_cast<i64>(engine_() % span);
    }

    /// Standard normal via Box-Muller. Caches the second value of each pair.
    double gaussian() {
        if (has_cache_) {
            has_cache_ = false;
            return cache_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 2.0 * 3.14159265358979323846 * u2;
        cache_ = r * std::sin(a);
        has_cache_ = true;
        return r * std::cos(a);
    }

    /// Derive an independent substream keyed by a label. Used to keep
    /// per-purpose streams (noise, shuffling, prompts) decoupled.
    Rng derive(const std::string& tag) const {
        u64 h = 1469598103934665603ull;
        auto mix = [&h](u64 v) {
            for (int i = 0; i < 8; ++i) {
                h ^= (v >> (8 * i)) & 0xff;
                h *= 1099511628211ull;
            }
        };
        mix(seed_);
        for (char c : tag) {
            h ^= static_cast<u64>(static_cast<unsigned char>(c));
            h *= 1099511628211ull;
        }
        return Rng(h);
    }

private:
    u64 seed_;
    std::mt19937_64 engine_;
    bool has_cache_ = false;
    double cache_ = 0.0;
};

}  // namespace phr
