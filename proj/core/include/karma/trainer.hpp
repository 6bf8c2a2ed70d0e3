#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "karma/metrics.hpp"
#include "karma/model.hpp"
#include "karma/objective.hpp"
#include "karma/synthgen.hpp"

// Deterministic optimization: AdamW with warmup + cosine decay, per-epoch
// data reshuffling derived from (seed, epoch), checkpointing, JSONL logging.
// Identical (config, seed, data) produce bit-identical parameters.

namespace karma::train {

struct DownstreamConfig {
    std::int64_t num_classes = 0;  // 0: use the dataset's endmember count
    std::int64_t epochs = 60;
    double lr = 1e-3;
    double weight_decay = 0.0;
    double val_fraction = 0.25;
};

struct TrainConfig {
    double base_lr = 1e-4;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    std::int64_t epochs = 100;
    std::int64_t batch_size = 8;
    double warmup_epochs = -1.0;  // <0: 5% of epochs
    std::uint64_t seed = 0;
    double clip_norm = 1.0;  // <=0 disables
    std::int64_t checkpoint_every = 0;  // epochs between checkpoints; 0: final only
    objective::LossWeights loss;
    objective::LossScope scope;
    model::ModelConfig model;
    std::string train_dir;
    std::string val_dir;
    double val_fraction = 0.125;  // used when val_dir is empty
    DownstreamConfig downstream;

    double resolved_warmup_epochs() const {
        return warmup_epochs < 0.0 ? 0.05 * static_cast<double>(epochs) : warmup_epochs;
    }
    void validate() const;
};

// Linear warmup from 0 to base_lr over warmup_steps, then cosine decay to 0
// at total_steps.
double cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr,
                 std::int64_t warmup_steps);

// Bias-corrected Adam with decoupled weight decay over every trainable tensor
// in the store; moments live in the store, keyed by parameter name. Aborts
// with the offending parameter name on a non-finite gradient.
void adamw_step(model::ParamStore& params, double lr, double beta1, double beta2, double eps,
                double weight_decay);

// Returns the pre-clip global norm.
double clip_global_norm(model::ParamStore& params, double max_norm);

struct StepRecord {
    std::int64_t step = 0;
    std::int64_t epoch = 0;
    double lr = 0.0;
    double total = 0.0;
    double huber = 0.0;
    double sam = 0.0;
    double phys = 0.0;
    double huber_weighted = 0.0;
    double sam_weighted = 0.0;
    double phys_weighted = 0.0;
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<std::pair<std::int64_t, metrics::ReconReport>> validation;  // (epoch, report)
};

struct PretrainResult {
    model::ParamStore params;
    TrainLog log;
};

// out_dir empty: no files are written. resume empty: fresh initialization.
// val_data, when given, is the validation split; otherwise a deterministic
// tail fraction of data is held out per cfg.val_fraction.
PretrainResult pretrain(const TrainConfig& cfg, const synth::Dataset& data,
                        const std::filesystem::path& out_dir = {},
                        const std::filesystem::path& resume = {},
                        const synth::Dataset* val_data = nullptr);

struct EvalResult {
    metrics::ReconReport recon;
    double phys_loss = 0.0;
};

// Masked-reconstruction evaluation: mask, reconstruct, paste predictions into
// the visible context, score the composite against the original.
// mask_ratio < 0 uses cfg.mask_ratio; 0 scores the identity composite.
EvalResult evaluate_masked_reconstruction(const model::ParamStore& params,
                                          const model::ModelConfig& cfg,
                                          const std::vector<const synth::HyperCube*>& tiles,
                                          std::uint64_t seed, double mask_ratio = -1.0);

struct DownstreamResult {
    model::ParamStore head;
    metrics::SegReport report;
    double overall_top1 = 0.0;   // percent, held-out
    double majority_top1 = 0.0;  // percent, constant-predictor baseline on the same split
    std::uint64_t encoder_checksum_before = 0;
    std::uint64_t encoder_checksum_after = 0;
};

// Freezes the encoder (latents are detached), trains the convolutional head
// with cross-entropy, and reports segmentation quality on held-out tiles.
DownstreamResult train_downstream(const model::ParamStore& encoder, const TrainConfig& cfg,
                                  const synth::Dataset& data);

// Majority label of the patch's pixels; ties break to the lowest class.
std::vector<int> patch_labels(const std::vector<int>& pixel_labels, std::int64_t height,
                              std::int64_t width, std::int64_t patch_size);

std::string step_record_json(const StepRecord& rec);

}  // namespace karma::train
