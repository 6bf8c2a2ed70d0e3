#include "karma/rng.hpp"

#include <cmath>

#include "karma/error.hpp"

namespace karma::rng {

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = kFnvOffset;
    for (unsigned char c : s) {
        h ^= c;
        h *= kFnvPrime;
    }
    return h;
}

}  // namespace

std::uint64_t derive_key(std::uint64_t base, std::string_view purpose) {
    return mix64(mix64(base + kGolden) ^ fnv1a(purpose));
}

std::uint64_t derive_key(std::uint64_t base, std::string_view purpose, std::uint64_t index) {
    return mix64(derive_key(base, purpose) ^ mix64(index + kGolden));
}

std::uint64_t Stream::bounded(std::uint64_t n) {
    if (n == 0) return 0;
    unsigned __int128 wide = static_cast<unsigned __int128>(next_u64()) * n;
    return static_cast<std::uint64_t>(wide >> 64);
}

double Stream::normal() {
    if (has_cached_) {
        has_cached_ = false;
        return cached_;
    }
    double u1 = 1.0 - next_unit();  // (0, 1]
    double u2 = next_unit();
    double r = std::sqrt(-2.0 * std::log(u1));
    double theta = 2.0 * M_PI * u2;
    cached_ = r * std::sin(theta);
    has_cached_ = true;
    return r * std::cos(theta);
}

double Stream::gamma(double alpha) {
    if (!(alpha > 0.0)) throw UsageError("rng::gamma: alpha must be positive");
    if (alpha < 1.0) {
        double u = next_unit();
        while (u <= 0.0) u = next_unit();
        return gamma(alpha + 1.0) * std::pow(u, 1.0 / alpha);
    }
    double d = alpha - 1.0 / 3.0;
    double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
        double x = normal();
        double v = 1.0 + c * x;
        if (v <= 0.0) continue;
        v = v * v * v;
        double u = next_unit();
        double x2 = x * x;
        if (u < 1.0 - 0.0331 * x2 * x2) return d * v;
        if (u > 0.0 && std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return d * v;
    }
}

void Stream::dirichlet(double concentration, std::span<double> out) {
    if (out.empty()) return;
    if (out.size() == 1) {
        out[0] = 1.0;
        return;
    }
    double total = 0.0;
    for (double& v : out) {
        v = gamma(concentration);
        total += v;
    }
    if (total <= 0.0) {
        // Astronomically unlikely underflow; fall back to uniform.
        double u = 1.0 / static_cast<double>(out.size());
        for (double& v : out) v = u;
        return;
    }
    for (double& v : out) v /= total;
}

}  // namespace karma::rng
