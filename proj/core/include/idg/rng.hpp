#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "idg/tensor.hpp"

namespace idg {

/// FNV-1a 64-bit hash; used for rng substream derivation and content digests.
inline std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t seed = 0xcbf29ce484222325ull) {
    const auto* p = static_cast<const unsigned char*>(bytes);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t seed = 0xcbf29ce484222325ull) {
    return fnv1a64(s.data(), s.size(), seed);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

/// Deterministic random stream. Gaussian draws use Box-Muller on top of the
/// mt19937-64 engine so sequences do not depend on the standard library's
/// distribution implementations.
///
/// Named substreams derive their seed as splitmix64(seed ^ fnv1a64(name)),
/// so any pipeline stage can be re-run in isolation from the global seed.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), engine_(seed) {}

    std::uint64_t seed() const { return seed_; }

    Rng substream(std::string_view name) const { return Rng(splitmix64(seed_ ^ fnv1a64(name))); }

    Rng substream(std::string_view name, std::uint64_t index) const {
        std::uint64_t h = fnv1a64(name);
        h = fnv1a64(&index, sizeof(index), h);
        return Rng(splitmix64(seed_ ^ h));
    }

    std::uint64_t next_u64() { return engine_(); }

    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    /// Uniform integer in [0, n); rejection sampling, no modulo bias.
    std::int64_t uniform_int(std::int64_t n) {
        if (n <= 0) throw std::invalid_argument("uniform_int: n must be positive");
        const std::uint64_t un = static_cast<std::uint64_t>(n);
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % un;
        std::uint64_t x;
        do {
            x = next_u64();
        } while (x >= limit);
        return static_cast<std::int64_t>(x % un);
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        // u1 in (0,1] keeps log finite.
        double u1 = 1.0 - uniform();
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        have_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void fill_normal(Tensor<T>& t, double mean = 0.0, double stddev = 1.0) {
        for (auto& v : t.values()) v = static_cast<T>(normal(mean, stddev));
    }

    template <typename T>
    void fill_uniform(Tensor<T>& t, double lo = 0.0, double hi = 1.0) {
        for (auto& v : t.values()) v = static_cast<T>(lo + (hi - lo) * uniform());
    }

    /// Fisher-Yates; deterministic given the stream state.
    template <typename Seq>
    void shuffle(Seq& seq) {
        for (std::size_t i = seq.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(static_cast<std::int64_t>(i)));
            std::swap(seq[i - 1], seq[j]);
        }
    }

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace idg
