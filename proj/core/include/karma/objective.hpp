#pragma once

#include "karma/model.hpp"
#include "karma/tensor.hpp"

// The hybrid objective: a vector-norm Huber reconstruction term, a spectral
// angle term, and a physics-consistency term tying each token's spectrum to
// endmembers * abundances, combined as lambda1*huber + lambda2*sam + lambda3*phys.

namespace karma::objective {

struct LossWeights {
    double lambda1 = 1.0;
    double lambda2 = 0.1;
    double lambda3 = 0.1;
    double delta = 1.0;    // Huber threshold
    double epsilon = 1e-8; // SAM denominator guard
    bool elementwise_huber = false;  // ablation variant

    void validate() const;
};

// Which rows feed each term: pixel losses default to masked tokens only
// (the MAE convention); the physics term defaults to every token.
struct LossScope {
    bool pixel_masked_only = true;
    bool phys_all_tokens = true;
};

struct LossReport {
    nd::Tensor total;   // differentiable scalar
    double total_value = 0.0;
    double huber = 0.0;
    double sam = 0.0;
    double phys = 0.0;
    double huber_weighted = 0.0;
    double sam_weighted = 0.0;
    double phys_weighted = 0.0;
};

// Per row i with residual rho = ||pred_i - target_i||: 0.5*rho^2 when
// rho <= delta, else delta*rho - 0.5*delta^2; mean over rows. The
// element-wise variant applies the same branch per component.
nd::Tensor huber_loss(const nd::Tensor& pred, const nd::Tensor& target, double delta,
                      bool elementwise = false);

// Mean over rows of arccos(<p, t> / (||p|| ||t|| + epsilon)), in radians.
nd::Tensor sam_loss(const nd::Tensor& pred, const nd::Tensor& target, double epsilon);

// Mean over rows of ||target - endmembers * abundance||^2.
nd::Tensor phys_loss(const nd::Tensor& target_spectra, const nd::Tensor& abundances,
                     const nd::Tensor& endmembers);

struct LossTargets {
    nd::Tensor token_pixels;   // T x P*P*C, the patchified input
    nd::Tensor token_spectra;  // T x C, per-token mean spectra
};

LossReport total_loss(const model::ForwardOutput& fwd, const LossTargets& targets,
                      const LossWeights& weights, const LossScope& scope,
                      const model::MaskPlan& plan);

}  // namespace karma::objective
