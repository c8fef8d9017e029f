#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace robumtl {

// PCG32 (Melissa O'Neill's pcg32_random_r). Self-contained so that streams
// are bit-reproducible across compilers and platforms, unlike <random>
// distributions.
class Pcg32 {
public:
    explicit Pcg32(uint64_t seed, uint64_t stream = 0x14057b7ef767814full) {
        state_ = 0u;
        inc_ = (stream << 1u) | 1u;
        next_u32();
        state_ += seed;
        next_u32();
    }

    uint32_t next_u32() {
        uint64_t old = state_;
        state_ = old * 6364136223846793005ull + inc_;
        uint32_t xorshifted = static_cast<uint32_t>(((old >> 18u) ^ old) >> 27u);
        uint32_t rot = static_cast<uint32_t>(old >> 59u);
        return (xorshifted >> rot) | (xorshifted << ((-rot) & 31u));
    }

    uint64_t next_u64() {
        uint64_t hi = next_u32();
        return (hi << 32) | next_u32();
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u32()) * (1.0 / 4294967296.0); }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Unbiased integer in [0, n).
    uint32_t next_below(uint32_t n) {
        if (n == 0) return 0;
        uint32_t threshold = (-n) % n;
        for (;;) {
            uint32_t r = next_u32();
            if (r >= threshold) return r % n;
        }
    }

    // Box-Muller, one value per call (the pair's second half is cached).
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 1e-12);
        double u2 = next_double();
        double mag = std::sqrt(-2.0 * std::log(u1));
        double two_pi_u2 = 6.283185307179586476925286766559 * u2;
        spare_ = mag * std::sin(two_pi_u2);
        have_spare_ = true;
        return mag * std::cos(two_pi_u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename It>
    void shuffle(It first, It last) {
        auto n = static_cast<uint32_t>(last - first);
        for (uint32_t i = n; i > 1; --i) {
            uint32_t j = next_below(i);
            std::swap(first[i - 1], first[j]);
        }
    }

private:
    uint64_t state_ = 0;
    uint64_t inc_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

inline uint64_t fnv1a64(std::string_view s) {
    uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t fnv1a64_bytes(const void* data, size_t n, uint64_t h = 1469598103934665603ull) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

// All randomness in the pipeline flows from one root seed through named
// sub-streams: derive_seed(root, "corpus"), derive_seed(root, "dmls.init"), ...
inline uint64_t derive_seed(uint64_t root, std::string_view name) {
    return splitmix64(root ^ fnv1a64(name));
}

inline uint64_t derive_seed(uint64_t root, std::string_view name, uint64_t index) {
    return splitmix64(derive_seed(root, name) + 0x632be59bd9b4e019ull * (index + 1));
}

}  // namespace robumtl
