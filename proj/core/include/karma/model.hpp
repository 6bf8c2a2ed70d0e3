#pragma once

#include <cstdint>
#include <vector>

#include "karma/cube.hpp"
#include "karma/params.hpp"
#include "karma/tensor.hpp"

// The network: patch embedding, random masking, visible-only transformer
// encoder, mask-token decoder with a pixel head and an abundance branch whose
// learnable endmember matrix reconstructs each token's spectrum as A * x.

namespace karma::model {

struct ModelConfig {
    std::int64_t image_size = 32;   // square tiles
    std::int64_t patch_size = 8;
    std::int64_t bands = 16;
    std::int64_t embed_dim = 64;
    std::int64_t decoder_dim = 32;
    std::int64_t heads = 8;
    std::int64_t encoder_depth = 2;
    std::int64_t decoder_depth = 1;
    double mask_ratio = 0.75;
    std::int64_t endmember_count = 8;
    double mlp_ratio = 4.0;

    std::int64_t grid_side() const { return image_size / patch_size; }
    std::int64_t token_count() const { return grid_side() * grid_side(); }
    std::int64_t token_dim() const { return patch_size * patch_size * bands; }

    // allow_zero_mask relaxes the mask-ratio lower bound for evaluation runs
    // that paste originals everywhere.
    void validate(bool allow_zero_mask = false) const;
};

// Deterministic record of which patch tokens are hidden for one sample.
struct MaskPlan {
    std::int64_t total = 0;
    std::vector<nd::index_t> visible;  // ascending
    std::vector<nd::index_t> masked;   // ascending
};

struct ForwardOutput {
    nd::Tensor pixel_recon;  // |masked| x P*P*C (undefined when nothing is masked)
    nd::Tensor pixel_all;    // T x P*P*C
    nd::Tensor abundances;   // T x M, rows on the simplex
    nd::Tensor phys_recon;   // T x C, exactly endmembers * abundances
    nd::Tensor endmembers;   // C x M parameter handle
    nd::Tensor latent;       // |visible| x D
};

// Row t is patch t in row-major patch order; within a patch pixels are
// row-major with bands contiguous per pixel. unpatchify inverts it exactly.
nd::Tensor patchify(const synth::HyperCube& cube, std::int64_t patch_size);
synth::HyperCube unpatchify(const nd::Tensor& tokens, std::int64_t image_size,
                            std::int64_t patch_size, std::int64_t bands, double data_range = 1.0);

MaskPlan make_mask(std::int64_t total_tokens, double mask_ratio, std::uint64_t seed,
                   std::uint64_t sample_index);
MaskPlan full_visibility(std::int64_t total_tokens);

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed);

nd::Tensor encode(const nd::Tensor& tokens, const MaskPlan& plan, const ParamStore& params,
                  const ModelConfig& cfg);
ForwardOutput decode(const nd::Tensor& latent, const MaskPlan& plan, const ParamStore& params,
                     const ModelConfig& cfg);
ForwardOutput forward(const nd::Tensor& tokens, const MaskPlan& plan, const ParamStore& params,
                      const ModelConfig& cfg);

// Mean spectrum over the P*P pixels of one token row.
std::vector<double> patch_mean_spectrum(const nd::Tensor& tokens, std::int64_t token,
                                        std::int64_t bands);
// Same thing for every token as a T x C constant tensor (loss target).
nd::Tensor token_mean_spectra(const nd::Tensor& tokens, std::int64_t bands);

// Downstream head over frozen encoder latents: tokens on the (H/P)x(W/P)
// grid go through one 3x3 same-padded convolution (D -> D/2, GELU) realized
// as a matmul over unfolded windows, then a per-position linear to classes.
ParamStore init_downstream_params(const ModelConfig& cfg, std::int64_t num_classes,
                                  std::uint64_t seed);
nd::Tensor downstream_logits(const nd::Tensor& latent_grid, const ParamStore& head,
                             const ModelConfig& cfg);

// Fixed 1-d sinusoidal table, one row per token index.
nd::Tensor sinusoidal_positions(std::int64_t count, std::int64_t dim);

}  // namespace karma::model
