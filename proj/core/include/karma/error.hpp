#pragma once

#include <stdexcept>
#include <string>

namespace karma {

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Tensor/cube extent mismatches.
struct ShapeError : Error {
    using Error::Error;
};

// Non-finite values, zero denominators, diverging optimization.
struct NumericError : Error {
    using Error::Error;
};

// Bad configuration files, unknown keys, invalid parameter combinations.
struct ConfigError : Error {
    using Error::Error;
};

// Malformed on-disk artifacts (cubes, checkpoints).
struct FormatError : Error {
    using Error::Error;
};

// API misuse (bad arguments, unsupported sizes).
struct UsageError : Error {
    using Error::Error;
};

// Synthetic data generation could not satisfy its constraints.
struct GenerationError : Error {
    using Error::Error;
};

}  // namespace karma
