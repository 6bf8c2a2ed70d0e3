#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "karma/error.hpp"

namespace karma::synth {

// H x W x C reflectance cube, band-interleaved-by-pixel. On-disk payloads are
// 32-bit floats, so values are held as float and widened to double on entry
// to the model; round-trips through disk are bit-exact.
struct HyperCube {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t bands = 0;
    double data_range = 1.0;
    std::vector<float> values;  // (y * width + x) * bands + b

    static HyperCube zeros(std::int64_t h, std::int64_t w, std::int64_t c, double range = 1.0);

    float at(std::int64_t y, std::int64_t x, std::int64_t b) const {
        return values[static_cast<std::size_t>((y * width + x) * bands + b)];
    }
    float& at(std::int64_t y, std::int64_t x, std::int64_t b) {
        return values[static_cast<std::size_t>((y * width + x) * bands + b)];
    }
    std::int64_t pixel_count() const { return height * width; }
    bool same_shape(const HyperCube& o) const {
        return height == o.height && width == o.width && bands == o.bands;
    }
};

// C x M matrix of material signatures; column m is one endmember spectrum.
struct EndmemberMatrix {
    std::int64_t bands = 0;
    std::int64_t count = 0;
    std::vector<double> values;  // row-major C x M

    double at(std::int64_t c, std::int64_t m) const {
        return values[static_cast<std::size_t>(c * count + m)];
    }
    double& at(std::int64_t c, std::int64_t m) {
        return values[static_cast<std::size_t>(c * count + m)];
    }
    std::vector<double> column(std::int64_t m) const;
};

// H x W x M simplex field: per-pixel mixing fractions.
struct AbundanceField {
    std::int64_t height = 0;
    std::int64_t width = 0;
    std::int64_t count = 0;
    std::vector<double> values;  // (y * width + x) * count + m

    double at(std::int64_t y, std::int64_t x, std::int64_t m) const {
        return values[static_cast<std::size_t>((y * width + x) * count + m)];
    }
    double& at(std::int64_t y, std::int64_t x, std::int64_t m) {
        return values[static_cast<std::size_t>((y * width + x) * count + m)];
    }
};

struct GroundTruth {
    EndmemberMatrix endmembers;
    AbundanceField abundances;
    double noise_sigma = 0.0;
};

// Flat binary container: 4-byte magic, three u32 little-endian extents, then
// extent-product IEEE-754 LE 32-bit floats with the last extent contiguous.
//   "HSC1": (H, W, C) cube      "EMM1": (1, C, M)      "ABF1": (H, W, M)
void write_cube(const HyperCube& cube, const std::filesystem::path& path);
HyperCube read_cube(const std::filesystem::path& path);

void write_endmembers(const EndmemberMatrix& em, const std::filesystem::path& path);
EndmemberMatrix read_endmembers(const std::filesystem::path& path);

void write_abundance(const AbundanceField& field, const std::filesystem::path& path);
AbundanceField read_abundance(const std::filesystem::path& path);

}  // namespace karma::synth
