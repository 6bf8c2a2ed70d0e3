#include "karma/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "karma/spectral.hpp"

namespace karma::metrics {

using nlohmann::json;

namespace {

void require_same_shape(const synth::HyperCube& a, const synth::HyperCube& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": cube shapes differ: " + std::to_string(a.height) +
                         "x" + std::to_string(a.width) + "x" + std::to_string(a.bands) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                         std::to_string(b.bands));
}

}  // namespace

PsnrResult psnr(const synth::HyperCube& ref, const synth::HyperCube& rec, double data_range) {
    require_same_shape(ref, rec, "psnr");
    if (!(data_range > 0.0)) throw UsageError("psnr: data_range must be > 0");
    PsnrResult out;
    out.per_channel.resize(static_cast<std::size_t>(ref.bands));
    std::int64_t pixels = ref.pixel_count();
    for (std::int64_t c = 0; c < ref.bands; ++c) {
        double mse = 0.0;
        for (std::int64_t p = 0; p < pixels; ++p) {
            double d = static_cast<double>(ref.values[static_cast<std::size_t>(p * ref.bands + c)]) -
                       static_cast<double>(rec.values[static_cast<std::size_t>(p * ref.bands + c)]);
            mse += d * d;
        }
        mse /= static_cast<double>(pixels);
        out.per_channel[static_cast<std::size_t>(c)] =
            mse == 0.0 ? kPsnrCap : 10.0 * std::log10(data_range * data_range / mse);
    }
    out.avg = std::accumulate(out.per_channel.begin(), out.per_channel.end(), 0.0) /
              static_cast<double>(ref.bands);
    return out;
}

double ssim_channel(std::span<const double> ref, std::span<const double> rec, std::int64_t height,
                    std::int64_t width, double data_range) {
    if (height < kSsimWindow || width < kSsimWindow)
        throw UsageError("ssim: image " + std::to_string(height) + "x" + std::to_string(width) +
                         " smaller than the " + std::to_string(kSsimWindow) + "x" +
                         std::to_string(kSsimWindow) + " window");
    if (static_cast<std::int64_t>(ref.size()) != height * width || ref.size() != rec.size())
        throw ShapeError("ssim: channel buffers do not match the declared extent");
    const double c1 = (0.01 * data_range) * (0.01 * data_range);
    const double c2 = (0.03 * data_range) * (0.03 * data_range);
    const double n = static_cast<double>(kSsimWindow * kSsimWindow);
    double total = 0.0;
    std::int64_t positions = 0;
    for (std::int64_t y = 0; y + kSsimWindow <= height; ++y) {
        for (std::int64_t x = 0; x + kSsimWindow <= width; ++x) {
            double sx = 0.0, sy = 0.0, sxx = 0.0, syy = 0.0, sxy = 0.0;
            for (std::int64_t wy = 0; wy < kSsimWindow; ++wy) {
                for (std::int64_t wx = 0; wx < kSsimWindow; ++wx) {
                    double a = ref[static_cast<std::size_t>((y + wy) * width + (x + wx))];
                    double b = rec[static_cast<std::size_t>((y + wy) * width + (x + wx))];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            }
            double mx = sx / n, my = sy / n;
            double vx = sxx / n - mx * mx;
            double vy = syy / n - my * my;
            double cov = sxy / n - mx * my;
            double num = (2.0 * mx * my + c1) * (2.0 * cov + c2);
            double den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
            ++positions;
        }
    }
    return total / static_cast<double>(positions);
}

SsimResult ssim(const synth::HyperCube& ref, const synth::HyperCube& rec, double data_range) {
    require_same_shape(ref, rec, "ssim");
    SsimResult out;
    out.per_channel.resize(static_cast<std::size_t>(ref.bands));
    std::int64_t pixels = ref.pixel_count();
    std::vector<double> a(static_cast<std::size_t>(pixels)), b(static_cast<std::size_t>(pixels));
    for (std::int64_t c = 0; c < ref.bands; ++c) {
        for (std::int64_t p = 0; p < pixels; ++p) {
            a[static_cast<std::size_t>(p)] = ref.values[static_cast<std::size_t>(p * ref.bands + c)];
            b[static_cast<std::size_t>(p)] = rec.values[static_cast<std::size_t>(p * ref.bands + c)];
        }
        out.per_channel[static_cast<std::size_t>(c)] =
            ssim_channel(a, b, ref.height, ref.width, data_range);
    }
    out.avg = std::accumulate(out.per_channel.begin(), out.per_channel.end(), 0.0) /
              static_cast<double>(ref.bands);
    return out;
}

double sam_metric(const synth::HyperCube& ref, const synth::HyperCube& rec, double eps) {
    require_same_shape(ref, rec, "sam_metric");
    std::int64_t pixels = ref.pixel_count();
    std::vector<double> a(static_cast<std::size_t>(ref.bands)), b(static_cast<std::size_t>(ref.bands));
    double total = 0.0;
    for (std::int64_t p = 0; p < pixels; ++p) {
        for (std::int64_t c = 0; c < ref.bands; ++c) {
            a[static_cast<std::size_t>(c)] = ref.values[static_cast<std::size_t>(p * ref.bands + c)];
            b[static_cast<std::size_t>(c)] = rec.values[static_cast<std::size_t>(p * ref.bands + c)];
        }
        total += spectral_angle(a, b, eps);
    }
    return total / static_cast<double>(pixels);
}

ReconReport recon_report(const synth::HyperCube& ref, const synth::HyperCube& rec,
                         double data_range) {
    ReconReport r;
    auto ps = psnr(ref, rec, data_range);
    auto ss = ssim(ref, rec, data_range);
    r.avg_psnr = ps.avg;
    r.per_channel_psnr = std::move(ps.per_channel);
    r.max_psnr = *std::max_element(r.per_channel_psnr.begin(), r.per_channel_psnr.end());
    r.avg_ssim = ss.avg;
    r.per_channel_ssim = std::move(ss.per_channel);
    r.max_ssim = *std::max_element(r.per_channel_ssim.begin(), r.per_channel_ssim.end());
    r.mean_sam = sam_metric(ref, rec);
    return r;
}

ReconReport aggregate_recon_reports(const std::vector<ReconReport>& reports) {
    if (reports.empty()) throw UsageError("aggregate_recon_reports: no reports");
    std::size_t channels = reports[0].per_channel_psnr.size();
    ReconReport out;
    out.per_channel_psnr.assign(channels, 0.0);
    out.per_channel_ssim.assign(channels, 0.0);
    for (const auto& r : reports) {
        if (r.per_channel_psnr.size() != channels)
            throw ShapeError("aggregate_recon_reports: channel counts differ");
        for (std::size_t c = 0; c < channels; ++c) {
            out.per_channel_psnr[c] += r.per_channel_psnr[c];
            out.per_channel_ssim[c] += r.per_channel_ssim[c];
        }
        out.mean_sam += r.mean_sam;
    }
    double n = static_cast<double>(reports.size());
    for (std::size_t c = 0; c < channels; ++c) {
        out.per_channel_psnr[c] /= n;
        out.per_channel_ssim[c] /= n;
    }
    out.mean_sam /= n;
    out.avg_psnr = std::accumulate(out.per_channel_psnr.begin(), out.per_channel_psnr.end(), 0.0) /
                   static_cast<double>(channels);
    out.avg_ssim = std::accumulate(out.per_channel_ssim.begin(), out.per_channel_ssim.end(), 0.0) /
                   static_cast<double>(channels);
    out.max_psnr = *std::max_element(out.per_channel_psnr.begin(), out.per_channel_psnr.end());
    out.max_ssim = *std::max_element(out.per_channel_ssim.begin(), out.per_channel_ssim.end());
    return out;
}

std::string ReconReport::to_json() const {
    json j{{"avg_psnr", avg_psnr},
           {"per_channel_psnr", per_channel_psnr},
           {"max_psnr", max_psnr},
           {"avg_ssim", avg_ssim},
           {"per_channel_ssim", per_channel_ssim},
           {"max_ssim", max_ssim},
           {"mean_sam", mean_sam}};
    return j.dump(2);
}

void project_simplex(std::span<double> x) {
    // Sort-based Euclidean projection (Held/Duchi).
    std::vector<double> u(x.begin(), x.end());
    std::sort(u.begin(), u.end(), std::greater<double>());
    double cum = 0.0, theta = 0.0;
    std::size_t rho = 0;
    for (std::size_t j = 0; j < u.size(); ++j) {
        cum += u[j];
        double t = (cum - 1.0) / static_cast<double>(j + 1);
        if (u[j] - t > 0.0) {
            rho = j + 1;
            theta = t;
        }
    }
    for (double& v : x) v = std::max(0.0, v - theta);
}

FclsResult fcls_oracle(std::span<const double> spectrum, const synth::EndmemberMatrix& em,
                       std::int64_t max_iters, double step) {
    const std::int64_t C = em.bands;
    const std::int64_t M = em.count;
    if (static_cast<std::int64_t>(spectrum.size()) != C)
        throw ShapeError("fcls_oracle: spectrum has " + std::to_string(spectrum.size()) +
                         " bands, endmembers have " + std::to_string(C));
    if (max_iters < 1) throw UsageError("fcls_oracle: max_iters must be >= 1");

    // Gram matrix and A^T r.
    std::vector<double> ata(static_cast<std::size_t>(M * M), 0.0);
    std::vector<double> atr(static_cast<std::size_t>(M), 0.0);
    for (std::int64_t i = 0; i < M; ++i) {
        for (std::int64_t j = 0; j < M; ++j) {
            double acc = 0.0;
            for (std::int64_t c = 0; c < C; ++c) acc += em.at(c, i) * em.at(c, j);
            ata[static_cast<std::size_t>(i * M + j)] = acc;
        }
        double acc = 0.0;
        for (std::int64_t c = 0; c < C; ++c) acc += em.at(c, i) * spectrum[static_cast<std::size_t>(c)];
        atr[static_cast<std::size_t>(i)] = acc;
    }

    if (step <= 0.0) {
        // Largest eigenvalue of A^T A by 50 power iterations.
        std::vector<double> v(static_cast<std::size_t>(M), 1.0 / std::sqrt(static_cast<double>(M)));
        std::vector<double> w(static_cast<std::size_t>(M));
        double lambda = 0.0;
        for (int it = 0; it < 50; ++it) {
            for (std::int64_t i = 0; i < M; ++i) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < M; ++j)
                    acc += ata[static_cast<std::size_t>(i * M + j)] * v[static_cast<std::size_t>(j)];
                w[static_cast<std::size_t>(i)] = acc;
            }
            double norm = 0.0;
            for (double x : w) norm += x * x;
            norm = std::sqrt(norm);
            if (norm == 0.0) break;
            lambda = 0.0;
            for (std::int64_t i = 0; i < M; ++i) {
                v[static_cast<std::size_t>(i)] = w[static_cast<std::size_t>(i)] / norm;
                lambda += v[static_cast<std::size_t>(i)] * w[static_cast<std::size_t>(i)];
            }
        }
        if (!(lambda > 0.0)) throw NumericError("fcls_oracle: degenerate endmember matrix");
        step = 1.0 / lambda;
    }

    double rr = 0.0;
    for (double v : spectrum) rr += v * v;
    auto objective_of = [&](const std::vector<double>& x) {
        // ||r - A x||^2 = r^T r - 2 x^T A^T r + x^T A^T A x
        double quad = 0.0, lin = 0.0;
        for (std::int64_t i = 0; i < M; ++i) {
            lin += x[static_cast<std::size_t>(i)] * atr[static_cast<std::size_t>(i)];
            double acc = 0.0;
            for (std::int64_t j = 0; j < M; ++j)
                acc += ata[static_cast<std::size_t>(i * M + j)] * x[static_cast<std::size_t>(j)];
            quad += x[static_cast<std::size_t>(i)] * acc;
        }
        return rr - 2.0 * lin + quad;
    };

    FclsResult result;
    std::vector<double> x(static_cast<std::size_t>(M), 1.0 / static_cast<double>(M));
    std::vector<double> grad(static_cast<std::size_t>(M));
    double prev_obj = objective_of(x);
    for (std::int64_t it = 0; it < max_iters; ++it) {
        // gradient of 0.5*||r - A x||^2 is A^T A x - A^T r
        for (std::int64_t i = 0; i < M; ++i) {
            double acc = 0.0;
            for (std::int64_t j = 0; j < M; ++j)
                acc += ata[static_cast<std::size_t>(i * M + j)] * x[static_cast<std::size_t>(j)];
            grad[static_cast<std::size_t>(i)] = acc - atr[static_cast<std::size_t>(i)];
        }
        double shift = 0.0;
        for (std::int64_t i = 0; i < M; ++i) {
            double nx = x[static_cast<std::size_t>(i)] - step * grad[static_cast<std::size_t>(i)];
            shift = std::max(shift, std::fabs(nx - x[static_cast<std::size_t>(i)]));
            x[static_cast<std::size_t>(i)] = nx;
        }
        project_simplex(x);
        result.iterations = it + 1;
        double obj = objective_of(x);
        if (std::fabs(prev_obj - obj) <= 1e-15 * std::max(1.0, std::fabs(prev_obj)) &&
            shift <= 1e-12) {
            result.converged = true;
            prev_obj = obj;
            break;
        }
        prev_obj = obj;
    }
    result.abundance = std::move(x);
    result.objective = std::max(0.0, prev_obj);
    result.residual_norm = std::sqrt(result.objective);
    return result;
}

Alignment align_endmembers(const synth::EndmemberMatrix& learned,
                           const synth::EndmemberMatrix& truth) {
    if (learned.bands != truth.bands || learned.count != truth.count)
        throw ShapeError("align_endmembers: shapes differ: " + std::to_string(learned.bands) + "x" +
                         std::to_string(learned.count) + " vs " + std::to_string(truth.bands) +
                         "x" + std::to_string(truth.count));
    const std::int64_t M = truth.count;
    if (M > 10) throw UsageError("align_endmembers: M > 10 (factorial search refused)");

    // Pairwise angles first; the permutation search only sums them.
    std::vector<double> angle(static_cast<std::size_t>(M * M));
    for (std::int64_t i = 0; i < M; ++i) {
        auto li = learned.column(i);
        for (std::int64_t j = 0; j < M; ++j) {
            auto tj = truth.column(j);
            angle[static_cast<std::size_t>(i * M + j)] = spectral_angle(li, tj);
        }
    }
    std::vector<std::int64_t> perm(static_cast<std::size_t>(M));
    std::iota(perm.begin(), perm.end(), 0);
    Alignment best;
    best.mean_sam = std::numeric_limits<double>::infinity();
    do {
        double total = 0.0;
        for (std::int64_t j = 0; j < M; ++j)
            total += angle[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)] * M + j)];
        double mean = total / static_cast<double>(M);
        if (mean < best.mean_sam) {
            best.mean_sam = mean;
            best.permutation = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return best;
}

SegReport segmentation_report(const std::vector<int>& pred, const std::vector<int>& truth,
                              int num_classes) {
    if (pred.size() != truth.size())
        throw ShapeError("segmentation_report: " + std::to_string(pred.size()) +
                         " predictions vs " + std::to_string(truth.size()) + " labels");
    if (num_classes < 1) throw UsageError("segmentation_report: num_classes must be >= 1");
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || pred[i] >= num_classes)
            throw UsageError("segmentation_report: prediction label " + std::to_string(pred[i]) +
                             " out of range [0, " + std::to_string(num_classes) + ")");
        if (truth[i] < 0 || truth[i] >= num_classes)
            throw UsageError("segmentation_report: truth label " + std::to_string(truth[i]) +
                             " out of range [0, " + std::to_string(num_classes) + ")");
    }
    std::vector<std::int64_t> correct(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> total(static_cast<std::size_t>(num_classes), 0);
    std::vector<std::int64_t> predicted(static_cast<std::size_t>(num_classes), 0);
    std::int64_t overall_correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        ++total[static_cast<std::size_t>(truth[i])];
        ++predicted[static_cast<std::size_t>(pred[i])];
        if (pred[i] == truth[i]) {
            ++correct[static_cast<std::size_t>(truth[i])];
            ++overall_correct;
        }
    }
    SegReport report;
    double acc_sum = 0.0, iou_sum = 0.0;
    int acc_n = 0, iou_n = 0;
    for (int c = 0; c < num_classes; ++c) {
        SegReport::PerClass pc;
        pc.cls = c;
        auto tot = total[static_cast<std::size_t>(c)];
        auto prd = predicted[static_cast<std::size_t>(c)];
        auto cor = correct[static_cast<std::size_t>(c)];
        pc.present = tot > 0 || prd > 0;
        if (pc.present) {
            pc.top1 = tot > 0 ? 100.0 * static_cast<double>(cor) / static_cast<double>(tot) : 0.0;
            std::int64_t uni = tot + prd - cor;
            pc.iou = uni > 0 ? 100.0 * static_cast<double>(cor) / static_cast<double>(uni) : 0.0;
            acc_sum += pc.top1;
            iou_sum += pc.iou;
            ++acc_n;
            ++iou_n;
        }
        report.per_class.push_back(pc);
    }
    report.macro_top1 = acc_n ? acc_sum / acc_n : 0.0;
    report.macro_iou = iou_n ? iou_sum / iou_n : 0.0;
    report.overall_top1 = pred.empty()
                              ? 0.0
                              : 100.0 * static_cast<double>(overall_correct) /
                                    static_cast<double>(pred.size());
    return report;
}

std::string SegReport::to_json() const {
    json per = json::array();
    for (const auto& pc : per_class) {
        if (!pc.present) continue;
        per.push_back(json{{"class", pc.cls}, {"top1", pc.top1}, {"iou", pc.iou}});
    }
    json j{{"per_class", per},
           {"macro", json{{"top1", macro_top1}, {"iou", macro_iou}}},
           {"overall_top1", overall_top1}};
    return j.dump(2);
}

}  // namespace karma::metrics
