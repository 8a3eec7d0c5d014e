#pragma once

#include <cstdint>
#include <random>

namespace martpost {

// splitmix64 (Steele, Lea, Vigna). Used only for seed derivation so that
// per-stream seeds are a pure function of (master_seed, stream_index).
inline std::uint64_t splitmix64(std::uint64_t& state) {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

// Derives the seed for a numbered substream. Streams for distinct indices are
// decorrelated regardless of how work is scheduled across threads.
inline std::uint64_t derive_stream_seed(std::uint64_t master, std::uint64_t index) {
    std::uint64_t s = master ^ 0xA3EC647659359ACDULL;
    splitmix64(s);
    s ^= index * 0xD6E8FEB86659FD93ULL + 0x2545F4914F6CDD1DULL;
    return splitmix64(s);
}

// Deterministic RNG stream. mt19937_64 is fully specified by the standard, and
// uniform doubles are produced directly from the top 53 bits, so sequences are
// bit-identical across platforms and thread counts.
class RngStream {
public:
    explicit RngStream(std::uint64_t seed) : gen_(seed) {}

    RngStream(std::uint64_t master, std::uint64_t stream_index)
        : gen_(derive_stream_seed(master, stream_index)) {}

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    // Uniform on the open interval (0, 1); never returns an exact endpoint.
    double uniform_open01() {
        double u = uniform01();
        return u > 0.0 ? u : 0x1.0p-53;
    }

    // Uniform integer in [0, n).
    std::uint64_t uniform_index(std::uint64_t n) {
        // Rejection sampling to avoid modulo bias.
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    double exponential() { return -std::log1p(-uniform01()); }

    std::uint64_t raw() { return gen_(); }

private:
    std::mt19937_64 gen_;
};

} // namespace martpost
