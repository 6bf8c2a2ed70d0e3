#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "karma/cube.hpp"

// Synthetic hyperspectral data that follows the linear mixing model exactly:
// every pixel is endmembers * abundances plus optional i.i.d. Gaussian noise.
// Generation is a pure function of (parameters, seed); tiles derive their own
// streams from (seed, tile_index) and can be produced independently.

namespace karma::synth {

struct GenParams {
    std::int64_t tiles = 64;
    std::int64_t height = 32;
    std::int64_t width = 32;
    std::int64_t bands = 16;
    std::int64_t endmembers = 4;
    double concentration = 0.5;   // symmetric Dirichlet parameter
    double noise_sigma = 0.0;
    double min_separation = 0.15; // pairwise endmember angle, radians
    std::uint64_t seed = 0;

    void validate() const;
};

// M smooth spectra (sums of 3-6 Gaussian bumps) rescaled into [0.05, 0.95],
// resampled until all pairwise angles reach min_separation (up to 100 tries
// per column).
EndmemberMatrix sample_endmembers(std::int64_t bands, std::int64_t count, std::uint64_t seed,
                                  double min_separation = 0.15);

// Per-pixel symmetric Dirichlet draws, one 3x3 box blur, then re-projection
// onto the simplex (clip negatives, renormalize).
AbundanceField sample_abundance_field(std::int64_t height, std::int64_t width, std::int64_t count,
                                      double concentration, std::uint64_t seed);

// r = A x + e per pixel, clamped to [0, data_range], stored as f32.
HyperCube mix(const GroundTruth& gt, std::uint64_t noise_seed = 0);

// Dominant endmember per pixel; ties break to the lowest index.
std::vector<int> derive_labels(const GroundTruth& gt);

struct Tile {
    std::string name;
    HyperCube cube;
    AbundanceField abundances;
    std::vector<int> labels;
    std::uint64_t seed = 0;
};

struct Dataset {
    GenParams params;
    EndmemberMatrix endmembers;
    std::vector<Tile> tiles;
};

Tile generate_tile(const GenParams& params, const EndmemberMatrix& em, std::int64_t tile_index);
Dataset generate_dataset(const GenParams& params);

// On-disk layout: manifest.json, endmembers.emm, tile_NNNN.{hsc,abf,json} and
// tile_NNNN.labels.json per tile. Byte-identical across reruns.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace karma::synth
