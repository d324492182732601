#pragma once

#include <cstdint>
#include <limits>
#include <string_view>

namespace cortisphere {

// Counter-based, splittable generator. A stream is a 64-bit key; the n-th
// output of a stream is a pure function of (key, n), so any stochastic step
// can be replayed from its key alone. split() derives an independent child
// stream without advancing the parent.
//
// Satisfies UniformRandomBitGenerator, so it can drive <random> distributions.
class Rng {
public:
    using result_type = std::uint64_t;

    explicit Rng(std::uint64_t seed = 0) : key_(mix(seed ^ 0x6a09e667f3bcc908ULL)) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() { return mix(key_ ^ mix(counter_++ + 0x9e3779b97f4a7c15ULL)); }

    Rng split(std::uint64_t stream) const { return Rng(key_, mix(stream + 0xbb67ae8584caa73bULL)); }
    Rng split(std::string_view name) const;

    std::uint64_t key() const noexcept { return key_; }
    std::uint64_t counter() const noexcept { return counter_; }

    // Uniform on [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    // Uniform integer on [0, n). n must be positive.
    std::uint64_t below(std::uint64_t n);
    // Unit-rate exponential by inversion.
    double exponential();
    double normal();
    // Beta(a, b) from two gamma draws.
    double beta(double a, double b);

private:
    Rng(std::uint64_t parent_key, std::uint64_t salt) : key_(mix(parent_key ^ salt)) {}

    static constexpr std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t key_;
    std::uint64_t counter_ = 0;
};

} // namespace cortisphere
