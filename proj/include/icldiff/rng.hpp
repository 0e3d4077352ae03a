#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

namespace icl {

/// 64-bit finalizer from SplitMix64.
inline uint64_t mix64(uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

/// Child seed derived from a parent seed and a label (FNV-1a over the label, then mixed).
inline uint64_t derive_seed(uint64_t seed, std::string_view label) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : label) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return mix64(seed ^ mix64(h));
}

inline uint64_t derive_seed(uint64_t seed, std::string_view label, uint64_t index) {
    return mix64(derive_seed(seed, label) + mix64(index));
}

/// Seeded random source. The engine is mt19937_64 (fully specified by the standard);
/// the conversions to uniform/normal variates are written out here so draws match across
/// standard library implementations.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : engine_(seed) {}

    uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    /// Uniform integer in [lo, hi], unbiased by rejection.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        const uint64_t range = static_cast<uint64_t>(hi - lo) + 1;
        if (range == 0) {
            return static_cast<int64_t>(engine_());
        }
        const uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return lo + static_cast<int64_t>(r % range);
    }

    /// Standard normal via Box-Muller; the second variate is cached.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = 0;
        while (u1 <= 0) {
            u1 = uniform();
        }
        const double u2 = uniform();
        const double r  = std::sqrt(-2.0 * std::log(u1));
        const double th = 6.283185307179586476925 * u2;
        spare_          = r * std::sin(th);
        has_spare_      = true;
        return r * std::cos(th);
    }

    bool bernoulli(double p) { return uniform() < p; }

    /// Serialized engine state plus the cached normal; restores with set_state.
    std::string state() const {
        std::ostringstream os;
        os << engine_ << " " << (has_spare_ ? 1 : 0) << " ";
        os.precision(17);
        os << spare_;
        return os.str();
    }

    void set_state(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        is >> engine_ >> flag >> spare_;
        has_spare_ = flag != 0;
    }

private:
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_   = 0;
};

}  // namespace icl
