#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "karma/cube.hpp"

// Evaluation metrics (no gradients): PSNR/SSIM/spectral angle for
// reconstruction quality, Top-1/mIoU for segmentation, plus the independent
// constrained-least-squares unmixing oracle and endmember alignment.

namespace karma::metrics {

struct ReconReport {
    double avg_psnr = 0.0;
    std::vector<double> per_channel_psnr;
    double max_psnr = 0.0;
    double avg_ssim = 0.0;
    std::vector<double> per_channel_ssim;
    double max_ssim = 0.0;
    double mean_sam = 0.0;

    std::string to_json() const;
};

// Zero-MSE channels report the 99 dB sentinel instead of infinity.
constexpr double kPsnrCap = 99.0;

struct PsnrResult {
    double avg = 0.0;
    std::vector<double> per_channel;
};
PsnrResult psnr(const synth::HyperCube& ref, const synth::HyperCube& rec, double data_range);

// Single-scale SSIM on one channel: 8x8 uniform sliding window, stride 1,
// C1 = (0.01*range)^2, C2 = (0.03*range)^2, mean over window positions.
constexpr std::int64_t kSsimWindow = 8;
double ssim_channel(std::span<const double> ref, std::span<const double> rec, std::int64_t height,
                    std::int64_t width, double data_range);

struct SsimResult {
    double avg = 0.0;
    std::vector<double> per_channel;
};
SsimResult ssim(const synth::HyperCube& ref, const synth::HyperCube& rec, double data_range);

// Mean per-pixel spectral angle in radians.
double sam_metric(const synth::HyperCube& ref, const synth::HyperCube& rec, double eps = 1e-8);

ReconReport recon_report(const synth::HyperCube& ref, const synth::HyperCube& rec,
                         double data_range);
// Channel-wise mean across several (ref, rec) pairs.
ReconReport aggregate_recon_reports(const std::vector<ReconReport>& reports);

// Fully constrained least squares by projected gradient descent on
// 0.5*||r - A x||^2 over the simplex. step <= 0 selects 1/L with L the top
// eigenvalue of A^T A estimated by 50 power iterations.
struct FclsResult {
    std::vector<double> abundance;
    double objective = 0.0;  // ||r - A x||^2
    double residual_norm = 0.0;
    bool converged = false;
    std::int64_t iterations = 0;
};
FclsResult fcls_oracle(std::span<const double> spectrum, const synth::EndmemberMatrix& endmembers,
                       std::int64_t max_iters = 1000, double step = 0.0);

// Euclidean projection onto the probability simplex (sort-based).
void project_simplex(std::span<double> x);

// Exhaustive permutation alignment between two C x M endmember sets; refuses
// M > 10. Returns the permutation p minimizing mean angle(learned[p[j]], truth[j]).
struct Alignment {
    std::vector<std::int64_t> permutation;
    double mean_sam = 0.0;
};
Alignment align_endmembers(const synth::EndmemberMatrix& learned,
                           const synth::EndmemberMatrix& truth);

struct SegReport {
    struct PerClass {
        std::int64_t cls = 0;
        bool present = false;   // appears in prediction or truth
        double top1 = 0.0;      // percent
        double iou = 0.0;       // percent
    };
    std::vector<PerClass> per_class;
    double macro_top1 = 0.0;
    double macro_iou = 0.0;
    double overall_top1 = 0.0;  // micro accuracy, percent

    std::string to_json() const;
};
SegReport segmentation_report(const std::vector<int>& pred, const std::vector<int>& truth,
                              int num_classes);

}  // namespace karma::metrics
