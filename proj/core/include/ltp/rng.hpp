#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <utility>

namespace ltp {

// Deterministic generator. std::mt19937_64 is fully specified by the standard; the
// distribution helpers below are written out so results do not depend on the
// standard library implementation.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, n). Rejection sampling keeps it unbiased.
    std::uint64_t below(std::uint64_t n);

    double normal(double mean = 0.0, double stddev = 1.0);

    // Normal resampled until it lies within two standard deviations.
    double truncated_normal(double stddev);

    template <class T>
    void shuffle(std::span<T> items) {
        for (std::size_t i = items.size(); i > 1; --i) {
            const auto j = static_cast<std::size_t>(below(i));
            std::swap(items[i - 1], items[j]);
        }
    }

    // Derives an independent stream seed; used to split one top-level seed into many.
    static std::uint64_t mix(std::uint64_t seed, std::uint64_t salt);

private:
    std::mt19937_64 engine_;
};

}  // namespace ltp
