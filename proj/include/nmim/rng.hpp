#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

#include "nmim/common.hpp"

namespace nmim {

namespace detail {

inline uint64_t splitmix64(uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

inline uint64_t fnv1a(std::string_view s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

} // namespace detail

// Counter-free xoshiro256++ generator. The draw sequence depends only on the
// seed, never on platform or standard-library internals, so streams are
// reproducible across machines. Sub-streams are derived by hashing a label
// into the seed; nested derivation is supported.
class Rng {
public:
    explicit Rng(uint64_t seed) : key_(seed) {
        uint64_t sm = seed;
        for (auto& w : s_) {
            w = detail::splitmix64(sm);
        }
    }

    uint64_t next_u64() {
        const uint64_t result = rotl_(s_[0] + s_[3], 23) + s_[0];
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl_(s_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) {
        return lo + (hi - lo) * uniform();
    }

    // Uniform integer in [lo, hi] inclusive.
    int64_t uniform_int(int64_t lo, int64_t hi) {
        require(lo <= hi, "uniform_int: empty range [", lo, ",", hi, "]");
        const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
        // Rejection sampling removes modulo bias.
        const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t x = next_u64();
        while (x >= limit) {
            x = next_u64();
        }
        return lo + static_cast<int64_t>(x % span);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u = 1.0 - uniform();
        double v = uniform();
        double r = std::sqrt(-2.0 * std::log(u));
        double theta = 2.0 * 3.14159265358979323846 * v;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    // Truncated normal: resample until |z| <= 2, then scale.
    double trunc_normal(double stddev) {
        double z = normal();
        while (std::abs(z) > 2.0) {
            z = normal();
        }
        return z * stddev;
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(v[i - 1], v[j]);
        }
    }

    // Independent stream labelled by a string; derivation is stable and nestable.
    Rng substream(std::string_view label) const {
        uint64_t mix = key_;
        uint64_t h = detail::fnv1a(label);
        mix ^= h + 0x9e3779b97f4a7c15ULL + (mix << 6) + (mix >> 2);
        return Rng(mix);
    }

    Rng substream(uint64_t index) const {
        uint64_t mix = key_;
        uint64_t st = index;
        uint64_t h = detail::splitmix64(st);
        mix ^= h + 0x9e3779b97f4a7c15ULL + (mix << 6) + (mix >> 2);
        return Rng(mix);
    }

    uint64_t key() const { return key_; }

private:
    static uint64_t rotl_(uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    uint64_t key_;
    uint64_t s_[4];
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline Rng seeded_rng(uint64_t seed) {
    return Rng(seed);
}

} // namespace nmim
