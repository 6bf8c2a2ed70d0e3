#include "karma/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "karma/log.hpp"
#include "karma/rng.hpp"

namespace karma::train {

using nd::Tensor;
using nd::index_t;
using nlohmann::json;

void TrainConfig::validate() const {
    if (!(base_lr > 0.0)) throw ConfigError("base_lr must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
        throw ConfigError("betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("adam_eps must be > 0");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (!(val_fraction >= 0.0 && val_fraction < 1.0))
        throw ConfigError("data.val_fraction must lie in [0, 1)");
    if (downstream.epochs < 1) throw ConfigError("downstream.epochs must be >= 1");
    if (!(downstream.lr > 0.0)) throw ConfigError("downstream.lr must be > 0");
    if (!(downstream.val_fraction > 0.0 && downstream.val_fraction < 1.0))
        throw ConfigError("downstream.val_fraction must lie in (0, 1)");
    loss.validate();
    model.validate();
}

double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr,
                 std::int64_t warmup_steps) {
    if (step < 0 || step > total_steps) throw UsageError("cosine_lr: step out of range");
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    std::int64_t span = total_steps - warmup_steps;
    if (span <= 0) return base_lr;
    double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(span);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

void adamw_step(model::ParamStore& params, double lr, double beta1, double beta2, double eps,
                double weight_decay) {
    std::uint64_t t = params.step + 1;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (const auto& name : params.names) {
        Tensor& p = params.at(name);
        if (!p.requires_grad()) continue;
        if (!p.has_grad())
            throw UsageError("adamw_step: parameter '" + name + "' has no gradient");
        const auto& g = p.grad();
        for (double gv : g)
            if (!std::isfinite(gv))
                throw NumericError("adamw_step: non-finite gradient in '" + name + "' at step " +
                                   std::to_string(t));
        auto& m = params.opt_m[name];
        auto& v = params.opt_v[name];
        if (m.size() != g.size()) m.assign(g.size(), 0.0);
        if (v.size() != g.size()) v.assign(g.size(), 0.0);
        auto& data = p.values();
        for (std::size_t i = 0; i < g.size(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            data[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * data[i]);
        }
    }
    params.step = t;
}

double clip_global_norm(model::ParamStore& params, double max_norm) {
    double sq = 0.0;
    for (const auto& name : params.names) {
        Tensor& p = params.at(name);
        if (!p.requires_grad() || !p.has_grad()) continue;
        for (double g : p.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (max_norm > 0.0 && norm > max_norm) {
        double scale = max_norm / norm;
        for (const auto& name : params.names) {
            Tensor& p = params.at(name);
            if (!p.requires_grad() || !p.has_grad()) continue;
            for (double& g : p.grad()) g *= scale;
        }
    }
    return norm;
}

std::string step_record_json(const StepRecord& rec) {
    json j{{"step", rec.step},
           {"epoch", rec.epoch},
           {"lr", rec.lr},
           {"total", rec.total},
           {"huber", rec.huber},
           {"sam", rec.sam},
           {"phys", rec.phys},
           {"huber_weighted", rec.huber_weighted},
           {"sam_weighted", rec.sam_weighted},
           {"phys_weighted", rec.phys_weighted}};
    return j.dump();
}

namespace {

struct Split {
    std::vector<const synth::Tile*> train;
    std::vector<const synth::Tile*> val;
};

// Deterministic tail split when no explicit validation directory is given.
Split split_tiles(const synth::Dataset& data, double val_fraction) {
    Split s;
    std::size_t n = data.tiles.size();
    std::size_t n_val = static_cast<std::size_t>(std::llround(val_fraction * static_cast<double>(n)));
    if (n_val >= n) n_val = n > 1 ? n - 1 : 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (i + n_val >= n)
            s.val.push_back(&data.tiles[i]);
        else
            s.train.push_back(&data.tiles[i]);
    }
    return s;
}

struct LossAverages {
    double total = 0.0, huber = 0.0, sam = 0.0, phys = 0.0;
    double huber_w = 0.0, sam_w = 0.0, phys_w = 0.0;
};

}  // namespace

EvalResult evaluate_masked_reconstruction(const model::ParamStore& params,
                                          const model::ModelConfig& cfg,
                                          const std::vector<const synth::HyperCube*>& tiles,
                                          std::uint64_t seed, double mask_ratio) {
    if (tiles.empty()) throw UsageError("evaluate: no tiles");
    double rho = mask_ratio < 0.0 ? cfg.mask_ratio : mask_ratio;
    std::vector<metrics::ReconReport> reports;
    double phys_total = 0.0;
    std::uint64_t eval_seed = rng::derive_key(seed, "eval");
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        const synth::HyperCube& cube = *tiles[i];
        Tensor tokens = model::patchify(cube, cfg.patch_size);
        model::MaskPlan plan = model::make_mask(cfg.token_count(), rho, eval_seed, i);
        Tensor composite_tokens = nd::detach(tokens);
        if (!plan.masked.empty()) {
            auto fwd = model::forward(tokens, plan, params, cfg);
            const auto& pred = fwd.pixel_recon.values();
            auto& out = composite_tokens.values();
            index_t dim = tokens.cols();
            for (std::size_t k = 0; k < plan.masked.size(); ++k) {
                for (index_t j = 0; j < dim; ++j) {
                    double v = pred[k * static_cast<std::size_t>(dim) + static_cast<std::size_t>(j)];
                    v = std::min(cube.data_range, std::max(0.0, v));
                    out[static_cast<std::size_t>(plan.masked[k] * dim + j)] = v;
                }
            }
            // Physics term over all tokens, for diagnostics and sweeps.
            objective::LossTargets targets;
            targets.token_pixels = tokens;
            targets.token_spectra = model::token_mean_spectra(tokens, cfg.bands);
            phys_total +=
                objective::phys_loss(targets.token_spectra, fwd.abundances, fwd.endmembers).item();
        }
        synth::HyperCube recon = model::unpatchify(composite_tokens, cfg.image_size, cfg.patch_size,
                                                   cfg.bands, cube.data_range);
        reports.push_back(metrics::recon_report(cube, recon, cube.data_range));
    }
    EvalResult out;
    out.recon = metrics::aggregate_recon_reports(reports);
    out.phys_loss = phys_total / static_cast<double>(tiles.size());
    return out;
}

PretrainResult pretrain(const TrainConfig& cfg, const synth::Dataset& data,
                        const std::filesystem::path& out_dir,
                        const std::filesystem::path& resume, const synth::Dataset* val_data) {
    cfg.validate();
    if (data.tiles.empty()) throw UsageError("pretrain: empty dataset");
    for (const auto& tile : data.tiles) {
        if (tile.cube.height != cfg.model.image_size || tile.cube.width != cfg.model.image_size ||
            tile.cube.bands != cfg.model.bands)
            throw ShapeError("pretrain: tile " + tile.name + " does not match model config");
    }

    Split split;
    if (val_data) {
        for (const auto& tile : data.tiles) split.train.push_back(&tile);
        for (const auto& tile : val_data->tiles) split.val.push_back(&tile);
    } else {
        split = split_tiles(data, cfg.val_fraction);
    }
    if (split.train.empty()) throw UsageError("pretrain: empty train split");

    PretrainResult result;
    if (resume.empty()) {
        result.params = model::init_params(cfg.model, cfg.seed);
    } else {
        result.params = model::load_checkpoint(resume);
        log::info("resumed from " + resume.string() + " at step " +
                  std::to_string(result.params.step));
    }

    const index_t n_train = static_cast<index_t>(split.train.size());
    const index_t steps_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
    const index_t total_steps = cfg.epochs * steps_per_epoch;
    const index_t warmup_steps = static_cast<index_t>(
        std::llround(cfg.resolved_warmup_epochs() * static_cast<double>(steps_per_epoch)));
    index_t step = static_cast<index_t>(result.params.step);
    if (step > total_steps) throw UsageError("pretrain: checkpoint is past the configured epochs");

    std::ofstream log_file;
    if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        log_file.open(out_dir / "train_log.jsonl", step > 0 ? std::ios::app : std::ios::trunc);
        if (!log_file) throw FormatError("cannot open train log in " + out_dir.string());
    }
    auto emit = [&](const std::string& line) {
        if (log_file.is_open()) log_file << line << "\n" << std::flush;
    };

    // Pre-patchified constants are reused across epochs.
    std::vector<Tensor> tokens_cache;
    std::vector<Tensor> spectra_cache;
    tokens_cache.reserve(split.train.size());
    for (const synth::Tile* tile : split.train) {
        tokens_cache.push_back(model::patchify(tile->cube, cfg.model.patch_size));
        spectra_cache.push_back(model::token_mean_spectra(tokens_cache.back(), cfg.model.bands));
    }

    const index_t T = cfg.model.token_count();
    std::vector<index_t> order(static_cast<std::size_t>(n_train));

    const index_t start_epoch = step / steps_per_epoch;
    try {
        for (index_t epoch = start_epoch; epoch < cfg.epochs; ++epoch) {
            std::iota(order.begin(), order.end(), 0);
            rng::Stream shuffle_stream(
                rng::derive_key(cfg.seed, "order", static_cast<std::uint64_t>(epoch)));
            shuffle_stream.shuffle(std::span<index_t>(order));

            index_t batch0 = (epoch == start_epoch) ? step % steps_per_epoch : 0;
            for (index_t batch = batch0; batch < steps_per_epoch; ++batch) {
                double lr = cosine_lr(step, total_steps, cfg.base_lr, warmup_steps);
                index_t begin = batch * cfg.batch_size;
                index_t end = std::min<index_t>(begin + cfg.batch_size, n_train);
                index_t actual = end - begin;

                Tensor batch_total;
                LossAverages avg;
                for (index_t i = begin; i < end; ++i) {
                    index_t tile_idx = order[static_cast<std::size_t>(i)];
                    std::uint64_t ordinal =
                        static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(n_train) +
                        static_cast<std::uint64_t>(i);
                    model::MaskPlan plan =
                        model::make_mask(T, cfg.model.mask_ratio, cfg.seed, ordinal);
                    auto fwd = model::forward(tokens_cache[static_cast<std::size_t>(tile_idx)], plan,
                                              result.params, cfg.model);
                    objective::LossTargets targets;
                    targets.token_pixels = tokens_cache[static_cast<std::size_t>(tile_idx)];
                    targets.token_spectra = spectra_cache[static_cast<std::size_t>(tile_idx)];
                    auto rep = objective::total_loss(fwd, targets, cfg.loss, cfg.scope, plan);
                    batch_total = batch_total.defined() ? nd::add(batch_total, rep.total) : rep.total;
                    avg.total += rep.total_value;
                    avg.huber += rep.huber;
                    avg.sam += rep.sam;
                    avg.phys += rep.phys;
                    avg.huber_w += rep.huber_weighted;
                    avg.sam_w += rep.sam_weighted;
                    avg.phys_w += rep.phys_weighted;
                }
                Tensor batch_loss = nd::mul(batch_total, 1.0 / static_cast<double>(actual));
                double loss_value = batch_loss.item();
                if (!std::isfinite(loss_value))
                    throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));

                result.params.zero_grads();
                nd::backward(batch_loss);
                clip_global_norm(result.params, cfg.clip_norm);
                adamw_step(result.params, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);

                double inv = 1.0 / static_cast<double>(actual);
                StepRecord rec;
                rec.step = step;
                rec.epoch = epoch;
                rec.lr = lr;
                rec.total = avg.total * inv;
                rec.huber = avg.huber * inv;
                rec.sam = avg.sam * inv;
                rec.phys = avg.phys * inv;
                rec.huber_weighted = avg.huber_w * inv;
                rec.sam_weighted = avg.sam_w * inv;
                rec.phys_weighted = avg.phys_w * inv;
                result.log.steps.push_back(rec);
                emit(step_record_json(rec));
                ++step;
            }

            if (!split.val.empty()) {
                std::vector<const synth::HyperCube*> val_cubes;
                for (const synth::Tile* tile : split.val) val_cubes.push_back(&tile->cube);
                auto eval = evaluate_masked_reconstruction(result.params, cfg.model, val_cubes,
                                                           cfg.seed);
                result.log.validation.emplace_back(epoch, eval.recon);
                json j{{"epoch", epoch},
                       {"val_avg_psnr", eval.recon.avg_psnr},
                       {"val_avg_ssim", eval.recon.avg_ssim},
                       {"val_mean_sam", eval.recon.mean_sam},
                       {"val_phys_loss", eval.phys_loss}};
                emit(j.dump());
            }

            if (!out_dir.empty() && cfg.checkpoint_every > 0 &&
                (epoch + 1) % cfg.checkpoint_every == 0 && epoch + 1 < cfg.epochs) {
                char name[48];
                std::snprintf(name, sizeof(name), "ckpt_epoch_%05lld.kckp",
                              static_cast<long long>(epoch + 1));
                model::save_checkpoint(result.params, out_dir / name);
            }
        }
    } catch (const NumericError& e) {
        emit(json{{"abort", std::string(e.what())}, {"step", step}}.dump());
        throw;
    }

    if (!out_dir.empty()) model::save_checkpoint(result.params, out_dir / "final.kckp");
    return result;
}

std::vector<int> patch_labels(const std::vector<int>& pixel_labels, std::int64_t height,
                              std::int64_t width, std::int64_t patch_size) {
    if (static_cast<std::int64_t>(pixel_labels.size()) != height * width)
        throw ShapeError("patch_labels: label grid does not match the image extents");
    if (height % patch_size != 0 || width % patch_size != 0)
        throw ShapeError("patch_labels: image not divisible by patch size");
    std::int64_t gh = height / patch_size, gw = width / patch_size;
    std::vector<int> out(static_cast<std::size_t>(gh * gw));
    int max_label = 0;
    for (int v : pixel_labels) max_label = std::max(max_label, v);
    std::vector<int> counts(static_cast<std::size_t>(max_label + 1));
    for (std::int64_t gy = 0; gy < gh; ++gy) {
        for (std::int64_t gx = 0; gx < gw; ++gx) {
            std::fill(counts.begin(), counts.end(), 0);
            for (std::int64_t py = 0; py < patch_size; ++py)
                for (std::int64_t px = 0; px < patch_size; ++px) {
                    int lab = pixel_labels[static_cast<std::size_t>(
                        (gy * patch_size + py) * width + gx * patch_size + px)];
                    ++counts[static_cast<std::size_t>(lab)];
                }
            int best = 0;
            for (std::size_t c = 1; c < counts.size(); ++c)
                if (counts[c] > counts[static_cast<std::size_t>(best)]) best = static_cast<int>(c);
            out[static_cast<std::size_t>(gy * gw + gx)] = best;
        }
    }
    return out;
}

DownstreamResult train_downstream(const model::ParamStore& encoder, const TrainConfig& cfg,
                                  const synth::Dataset& data) {
    cfg.validate();
    if (data.tiles.size() < 2) throw UsageError("train_downstream: need at least 2 tiles");
    std::int64_t num_classes = cfg.downstream.num_classes > 0 ? cfg.downstream.num_classes
                                                              : data.params.endmembers;
    DownstreamResult result;
    result.encoder_checksum_before = encoder.checksum();

    // Frozen encoder: latents over fully visible tiles, detached once.
    model::MaskPlan plan = model::full_visibility(cfg.model.token_count());
    std::vector<Tensor> latents;
    std::vector<std::vector<nd::index_t>> labels;
    latents.reserve(data.tiles.size());
    for (const auto& tile : data.tiles) {
        Tensor tokens = model::patchify(tile.cube, cfg.model.patch_size);
        latents.push_back(nd::detach(model::encode(tokens, plan, encoder, cfg.model)));
        auto patch = patch_labels(tile.labels, tile.cube.height, tile.cube.width,
                                  cfg.model.patch_size);
        std::vector<nd::index_t> as_idx(patch.begin(), patch.end());
        for (auto lab : as_idx)
            if (lab >= num_classes)
                throw UsageError("train_downstream: label " + std::to_string(lab) +
                                 " exceeds num_classes " + std::to_string(num_classes));
        labels.push_back(std::move(as_idx));
    }

    Split split = split_tiles(data, cfg.downstream.val_fraction);
    std::vector<std::size_t> train_idx, val_idx;
    for (std::size_t i = 0; i < data.tiles.size(); ++i) {
        bool in_val = false;
        for (const synth::Tile* t : split.val)
            if (t == &data.tiles[i]) in_val = true;
        (in_val ? val_idx : train_idx).push_back(i);
    }
    if (train_idx.empty() || val_idx.empty())
        throw UsageError("train_downstream: split produced an empty side");

    result.head = model::init_downstream_params(cfg.model, num_classes,
                                                rng::derive_key(cfg.seed, "downstream"));
    std::vector<std::size_t> order(train_idx);
    for (std::int64_t epoch = 0; epoch < cfg.downstream.epochs; ++epoch) {
        rng::Stream st(rng::derive_key(cfg.seed, "ds_order", static_cast<std::uint64_t>(epoch)));
        st.shuffle(std::span<std::size_t>(order));
        for (std::size_t i : order) {
            Tensor logits = model::downstream_logits(latents[i], result.head, cfg.model);
            Tensor loss = nd::cross_entropy(logits, labels[i]);
            if (!std::isfinite(loss.item()))
                throw NumericError("train_downstream: non-finite loss");
            result.head.zero_grads();
            nd::backward(loss);
            adamw_step(result.head, cfg.downstream.lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                       cfg.downstream.weight_decay);
        }
    }

    // Held-out evaluation plus the constant-predictor baseline.
    std::vector<int> pred_all, truth_all;
    for (std::size_t i : val_idx) {
        Tensor logits = model::downstream_logits(latents[i], result.head, cfg.model);
        for (index_t t = 0; t < logits.rows(); ++t) {
            int best = 0;
            for (index_t k = 1; k < logits.cols(); ++k)
                if (logits.at(t, k) > logits.at(t, best)) best = static_cast<int>(k);
            pred_all.push_back(best);
            truth_all.push_back(static_cast<int>(labels[i][static_cast<std::size_t>(t)]));
        }
    }
    result.report = metrics::segmentation_report(pred_all, truth_all, static_cast<int>(num_classes));
    result.overall_top1 = result.report.overall_top1;
    std::vector<std::int64_t> freq(static_cast<std::size_t>(num_classes), 0);
    for (int t : truth_all) ++freq[static_cast<std::size_t>(t)];
    std::int64_t top = *std::max_element(freq.begin(), freq.end());
    result.majority_top1 =
        truth_all.empty() ? 0.0
                          : 100.0 * static_cast<double>(top) / static_cast<double>(truth_all.size());
    result.encoder_checksum_after = encoder.checksum();
    return result;
}

}  // namespace karma::train
