#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <string_view>

#include "dbrn/core/errors.hpp"

namespace dbrn {

inline uint64_t splitmix64(uint64_t& s) {
    s += 0x9E3779B97F4A7C15ULL;
    uint64_t z = s;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// xoshiro256** with explicit distributions. std::mt19937 plus the standard
// distributions are implementation-defined, which would break cross-compiler
// reproducibility of seeds recorded in manifests and checkpoints.
class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t s = seed;
        for (auto& w : state_) w = splitmix64(s);
    }

    // Independent stream derived from (seed, name). Streams for different
    // names never share state even for equal seeds.
    static Rng stream(uint64_t seed, std::string_view name) {
        uint64_t h = 0xCBF29CE484222325ULL; // FNV-1a
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001B3ULL;
        }
        uint64_t s = seed ^ (h + 0x9E3779B97F4A7C15ULL);
        return Rng(splitmix64(s));
    }

    uint64_t next_u64() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    int64_t uniform_int(int64_t n) {
        if (n <= 0) throw parameter_error("Rng::uniform_int: n must be positive");
        return static_cast<int64_t>(uniform() * static_cast<double>(n));
    }

    // Standard normal via Box-Muller with cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        while (u1 <= 0.0) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    bool bernoulli(double p) { return uniform() < p; }

    // state (de)serialization for checkpoints
    std::array<uint64_t, 6> save() const {
        std::array<uint64_t, 6> w{};
        for (int i = 0; i < 4; ++i) w[i] = state_[i];
        w[4] = has_spare_ ? 1 : 0;
        uint64_t bits;
        static_assert(sizeof(bits) == sizeof(spare_));
        std::memcpy(&bits, &spare_, sizeof(bits));
        w[5] = bits;
        return w;
    }

    void restore(const std::array<uint64_t, 6>& w) {
        for (int i = 0; i < 4; ++i) state_[i] = w[i];
        has_spare_ = w[4] != 0;
        std::memcpy(&spare_, &w[5], sizeof(spare_));
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    std::array<uint64_t, 4> state_{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace dbrn
