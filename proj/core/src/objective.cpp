#include "karma/objective.hpp"

#include <cmath>
#include <limits>

namespace karma::objective {

using nd::Tensor;

void LossWeights::validate() const {
    auto check = [](double v, const char* name) {
        if (!std::isfinite(v) || v < 0.0)
            throw ConfigError(std::string("loss.") + name + " must be finite and non-negative");
    };
    check(lambda1, "lambda1");
    check(lambda2, "lambda2");
    check(lambda3, "lambda3");
    if (!(delta > 0.0)) throw ConfigError("loss.delta must be > 0");
    if (!(epsilon > 0.0)) throw ConfigError("loss.epsilon must be > 0");
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// 0.5*min(rho, delta)^2 + delta*max(rho - delta, 0) reproduces both branches
// and is continuous at rho == delta.
Tensor huber_of_residual(const Tensor& rho, double delta) {
    Tensor quad = nd::mul(nd::square(nd::clamp(rho, -kInf, delta)), 0.5);
    Tensor lin = nd::mul(nd::clamp(nd::add(rho, -delta), 0.0, kInf), delta);
    return nd::add(quad, lin);
}

}  // namespace

Tensor huber_loss(const Tensor& pred, const Tensor& target, double delta, bool elementwise) {
    if (pred.shape() != target.shape())
        throw ShapeError("huber_loss: shapes differ: " + nd::shape_str(pred.shape()) + " vs " +
                         nd::shape_str(target.shape()));
    if (!(delta > 0.0)) throw UsageError("huber_loss: delta must be > 0");
    Tensor diff = nd::sub(pred, target);
    Tensor rho = elementwise ? nd::abs(diff) : nd::l2norm_rows(diff);
    return nd::mean(huber_of_residual(rho, delta));
}

Tensor sam_loss(const Tensor& pred, const Tensor& target, double epsilon) {
    if (pred.shape() != target.shape())
        throw ShapeError("sam_loss: shapes differ: " + nd::shape_str(pred.shape()) + " vs " +
                         nd::shape_str(target.shape()));
    Tensor dots = nd::dot_rows(pred, target);
    Tensor denom = nd::add(nd::mul(nd::l2norm_rows(pred), nd::l2norm_rows(target)), epsilon);
    return nd::mean(nd::arccos(nd::div(dots, denom)));
}

Tensor phys_loss(const Tensor& target_spectra, const Tensor& abundances,
                 const Tensor& endmembers) {
    if (abundances.cols() != endmembers.cols())
        throw ShapeError("phys_loss: abundance count " + std::to_string(abundances.cols()) +
                         " vs endmember count " + std::to_string(endmembers.cols()));
    if (target_spectra.rows() != abundances.rows() || target_spectra.cols() != endmembers.rows())
        throw ShapeError("phys_loss: target " + nd::shape_str(target_spectra.shape()) +
                         " incompatible with " + nd::shape_str(abundances.shape()) + " * " +
                         nd::shape_str(endmembers.shape()) + "^T");
    Tensor recon = nd::matmul(abundances, nd::transpose(endmembers));
    Tensor diff = nd::sub(target_spectra, recon);
    double rows = static_cast<double>(target_spectra.rows());
    return nd::mul(nd::sum(nd::square(diff)), 1.0 / rows);
}

LossReport total_loss(const model::ForwardOutput& fwd, const LossTargets& targets,
                      const LossWeights& weights, const LossScope& scope,
                      const model::MaskPlan& plan) {
    weights.validate();
    const std::int64_t bands = targets.token_spectra.cols();
    const std::int64_t token_dim = targets.token_pixels.cols();
    const std::int64_t pixels_per_token = token_dim / bands;

    // Pixel-space rows: one spectrum per pixel of each supervised token.
    Tensor pred_tokens;
    Tensor target_tokens;
    if (scope.pixel_masked_only) {
        if (plan.masked.empty())
            throw UsageError("total_loss: masked-only pixel scope with an empty mask");
        pred_tokens = fwd.pixel_recon;
        target_tokens = nd::gather_rows(targets.token_pixels, plan.masked);
    } else {
        pred_tokens = fwd.pixel_all;
        target_tokens = targets.token_pixels;
    }
    std::int64_t n_rows = pred_tokens.rows() * pixels_per_token;
    Tensor pred_px = nd::reshape(pred_tokens, {n_rows, bands});
    Tensor target_px = nd::reshape(target_tokens, {n_rows, bands});

    Tensor huber = huber_loss(pred_px, target_px, weights.delta, weights.elementwise_huber);
    Tensor sam = sam_loss(pred_px, target_px, weights.epsilon);

    Tensor abund = fwd.abundances;
    Tensor spectra = targets.token_spectra;
    if (!scope.phys_all_tokens) {
        if (plan.masked.empty())
            throw UsageError("total_loss: masked-only phys scope with an empty mask");
        abund = nd::gather_rows(abund, plan.masked);
        spectra = nd::gather_rows(spectra, plan.masked);
    }
    Tensor phys = phys_loss(spectra, abund, fwd.endmembers);

    LossReport report;
    report.total = nd::add(nd::add(nd::mul(huber, weights.lambda1), nd::mul(sam, weights.lambda2)),
                           nd::mul(phys, weights.lambda3));
    report.total_value = report.total.item();
    report.huber = huber.item();
    report.sam = sam.item();
    report.phys = phys.item();
    report.huber_weighted = weights.lambda1 * report.huber;
    report.sam_weighted = weights.lambda2 * report.sam;
    report.phys_weighted = weights.lambda3 * report.phys;
    return report;
}

}  // namespace karma::objective
