#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace moadepth {

// Deterministic random source. mt19937_64 output is pinned by the standard and
// the uniform/normal mappings below are written out explicitly, so streams are
// bit-identical across compilers and standard libraries (std::normal_distribution
// would not be).
class Rng {
public:
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // [0, 1) with 53 random mantissa bits.
    double unit() { return static_cast<double>(eng_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * unit(); }

    // Box-Muller; consumes two uniforms per pair, caches the second draw.
    double normal(double mu, double sigma);

private:
    std::mt19937_64 eng_;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

// FNV-1a 64-bit string hash; seeds the pseudo text encoder and per-object
// texture streams.
std::uint64_t fnv1a64(std::string_view s);

// splitmix64 finalizer, used to decorrelate composed seeds.
std::uint64_t mix64(std::uint64_t x);

}  // namespace moadepth
