#pragma once

#include <cmath>
#include <span>

namespace karma {

// Angle in radians between two spectra; scale invariant, guarded against
// zero-norm inputs by eps in the denominator.
inline double spectral_angle(std::span<const double> a, std::span<const double> b,
                             double eps = 1e-8) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    double c = dot / (std::sqrt(na) * std::sqrt(nb) + eps);
    c = std::fmin(1.0, std::fmax(-1.0, c));
    return std::acos(c);
}

}  // namespace karma
