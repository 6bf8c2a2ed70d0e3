#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "karma/tensor.hpp"

// Central finite-difference validation of every differentiable operation and
// of the full training objective on a tiny model. The relative error of an
// element is |analytic - fd| / max(|analytic|, |fd|, floor); the floor keeps
// near-zero gradients from turning rounding noise into spurious failures.

namespace karma::gradcheck {

constexpr double kDefaultStep = 1e-5;
constexpr double kDenomFloor = 1e-3;
constexpr double kTolerance = 1e-4;

struct OpResult {
    std::string op;
    double max_rel_err = 0.0;
};

struct Report {
    std::vector<OpResult> ops;
    double end_to_end = 0.0;
    double tolerance = kTolerance;

    bool pass() const;
    // Name of the worst offender above tolerance, empty when passing.
    std::string worst_failure() const;
    std::string to_json() const;
};

// Max relative error between backward() gradients of fn() and central finite
// differences over every element of every grad-requiring leaf. fn must
// recompute the scalar from the leaves' current values on each call.
double check_scalar_fn(const std::function<nd::Tensor()>& fn, const std::vector<nd::Tensor>& leaves,
                       double step = kDefaultStep, double denom_floor = kDenomFloor);

// Per-op scenarios plus the end-to-end objective on a tiny model.
Report run_suite(std::uint64_t seed, double step = kDefaultStep);

}  // namespace karma::gradcheck
