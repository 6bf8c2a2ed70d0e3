#pragma once

#include <cstdint>
#include <span>
#include <string_view>

namespace karma::rng {

// SplitMix64 finalizer. Used in counter mode: the n-th output of a stream
// with key k is mix64(k + (n+1) * golden gamma), which is exactly the
// SplitMix64 sequence seeded with k. Portable across platforms; consumers
// must only depend on statistical properties, never on the exact stream.
constexpr std::uint64_t kGolden = 0x9E3779B97F4A7C15ull;

constexpr std::uint64_t mix64(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

// Stable key derivation for (seed, purpose[, index]) tuples so that every
// consumer (tile generation, masking, init, ...) gets an independent stream.
std::uint64_t derive_key(std::uint64_t base, std::string_view purpose);
std::uint64_t derive_key(std::uint64_t base, std::string_view purpose, std::uint64_t index);

class Stream {
  public:
    explicit Stream(std::uint64_t key) : key_(key) {}

    std::uint64_t next_u64() { return mix64(key_ + (++counter_) * kGolden); }

    // Uniform in [0, 1), 53-bit resolution.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

    // Unbiased-enough bounded draw (128-bit multiply-shift).
    std::uint64_t bounded(std::uint64_t n);

    // Box-Muller; caches the second variate.
    double normal();

    // Marsaglia-Tsang; alpha > 0.
    double gamma(double alpha);

    // Symmetric Dirichlet with the given concentration into out.
    void dirichlet(double concentration, std::span<double> out);

    // In-place Fisher-Yates.
    template <class T>
    void shuffle(std::span<T> v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(bounded(i));
            T tmp = v[i - 1];
            v[i - 1] = v[j];
            v[j] = tmp;
        }
    }

  private:
    std::uint64_t key_ = 0;
    std::uint64_t counter_ = 0;
    bool has_cached_ = false;
    double cached_ = 0.0;
};

}  // namespace karma::rng
