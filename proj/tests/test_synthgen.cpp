#include <cmath>

#include "doctest.h"
#include "karma/spectral.hpp"
#include "karma/synthgen.hpp"
#include "support.hpp"

using namespace karma;

TEST_CASE("endmember columns respect the separation floor") {
    auto em = synth::sample_endmembers(16, 2, 42);
    CHECK(spectral_angle(em.column(0), em.column(1)) >= 0.15);
}

TEST_CASE("endmember values live in [0.05, 0.95]") {
    auto em = synth::sample_endmembers(218, 8, 7);
    for (double v : em.values) {
        CHECK(v >= 0.05);
        CHECK(v <= 0.95);
    }
}

TEST_CASE("endmember sampling is a pure function of the seed") {
    auto a = synth::sample_endmembers(32, 4, 1234);
    auto b = synth::sample_endmembers(32, 4, 1234);
    CHECK(a.values == b.values);
}

TEST_CASE("endmember preconditions are enforced") {
    CHECK_THROWS_AS(synth::sample_endmembers(16, 1, 0), UsageError);
    CHECK_THROWS_AS(synth::sample_endmembers(3, 4, 0), UsageError);
    // An absurd separation demand cannot be met.
    CHECK_THROWS_AS(synth::sample_endmembers(16, 8, 0, 1.5), GenerationError);
}

TEST_CASE("huge concentration collapses the Dirichlet to uniform") {
    auto field = synth::sample_abundance_field(8, 8, 4, 1e6, 5);
    for (double v : field.values) CHECK(std::fabs(v - 0.25) < 0.01);
}

TEST_CASE("abundance vectors sum to one") {
    auto field = synth::sample_abundance_field(16, 16, 5, 0.5, 6);
    for (std::int64_t p = 0; p < 16 * 16; ++p) {
        double total = 0.0;
        for (std::int64_t m = 0; m < 5; ++m) {
            double v = field.values[static_cast<std::size_t>(p * 5 + m)];
            CHECK(v >= 0.0);
            total += v;
        }
        CHECK(std::fabs(total - 1.0) <= 1e-9);
    }
}

TEST_CASE("a single-endmember field is exactly one") {
    auto field = synth::sample_abundance_field(4, 4, 1, 0.5, 9);
    for (double v : field.values) CHECK(v == 1.0);
}

TEST_CASE("mix with an identity basis returns the abundances") {
    synth::GroundTruth gt;
    gt.endmembers.bands = 2;
    gt.endmembers.count = 2;
    gt.endmembers.values = {1.0, 0.0, 0.0, 1.0};
    gt.abundances.height = 1;
    gt.abundances.width = 1;
    gt.abundances.count = 2;
    gt.abundances.values = {0.3, 0.7};
    auto cube = synth::mix(gt);
    CHECK(cube.at(0, 0, 0) == doctest::Approx(0.3));
    CHECK(cube.at(0, 0, 1) == doctest::Approx(0.7));
}

TEST_CASE("noiseless mixing is exact") {
    synth::GroundTruth gt;
    gt.endmembers = synth::sample_endmembers(8, 3, 77);
    gt.abundances = synth::sample_abundance_field(8, 8, 3, 0.5, 78);
    auto cube = synth::mix(gt, 79);
    for (std::int64_t p = 0; p < 64; ++p) {
        for (std::int64_t c = 0; c < 8; ++c) {
            double v = 0.0;
            for (std::int64_t m = 0; m < 3; ++m)
                v += gt.endmembers.at(c, m) * gt.abundances.values[static_cast<std::size_t>(p * 3 + m)];
            v = std::min(1.0, std::max(0.0, v));
            CHECK(cube.values[static_cast<std::size_t>(p * 8 + c)] == static_cast<float>(v));
        }
    }
}

TEST_CASE("noise level matches the declared sigma statistically") {
    synth::GroundTruth gt;
    gt.endmembers = synth::sample_endmembers(4, 3, 11);
    gt.abundances = synth::sample_abundance_field(64, 64, 3, 0.8, 12);
    gt.noise_sigma = 0.01;
    auto cube = synth::mix(gt, 13);
    double sq = 0.0;
    std::int64_t n = 0;
    for (std::int64_t p = 0; p < 64 * 64; ++p) {
        for (std::int64_t c = 0; c < 4; ++c) {
            double clean = 0.0;
            for (std::int64_t m = 0; m < 3; ++m)
                clean += gt.endmembers.at(c, m) *
                         gt.abundances.values[static_cast<std::size_t>(p * 3 + m)];
            double d = static_cast<double>(cube.values[static_cast<std::size_t>(p * 4 + c)]) - clean;
            sq += d * d;
            ++n;
        }
    }
    double sd = std::sqrt(sq / static_cast<double>(n));
    CHECK(sd > 0.008);
    CHECK(sd < 0.012);
}

TEST_CASE("noiseless mixing is affine in the abundances") {
    auto em = synth::sample_endmembers(8, 3, 21);
    auto make = [&](const std::vector<double>& x) {
        synth::GroundTruth gt;
        gt.endmembers = em;
        gt.abundances.height = 1;
        gt.abundances.width = 1;
        gt.abundances.count = 3;
        gt.abundances.values = x;
        return synth::mix(gt);
    };
    std::vector<double> x1{0.6, 0.3, 0.1}, x2{0.1, 0.2, 0.7};
    const double alpha = 0.25;
    std::vector<double> blend(3);
    for (int m = 0; m < 3; ++m) blend[static_cast<std::size_t>(m)] =
        alpha * x1[static_cast<std::size_t>(m)] + (1 - alpha) * x2[static_cast<std::size_t>(m)];
    auto c1 = make(x1), c2 = make(x2), cb = make(blend);
    for (std::int64_t c = 0; c < 8; ++c) {
        double expect = alpha * c1.at(0, 0, c) + (1 - alpha) * c2.at(0, 0, c);
        CHECK(std::fabs(cb.at(0, 0, c) - expect) <= 1e-6);  // f32 storage rounding
    }
}

TEST_CASE("labels pick the dominant component with low-index ties") {
    synth::GroundTruth gt;
    gt.endmembers = synth::sample_endmembers(4, 2, 1);
    gt.abundances.height = 1;
    gt.abundances.width = 2;
    gt.abundances.count = 2;
    gt.abundances.values = {0.7, 0.3, 0.5, 0.5};
    auto labels = synth::derive_labels(gt);
    CHECK(labels[0] == 0);
    CHECK(labels[1] == 0);  // tie goes to the lowest index
}

TEST_CASE("symmetric Dirichlet yields balanced labels") {
    synth::GroundTruth gt;
    gt.endmembers = synth::sample_endmembers(8, 4, 3);
    gt.abundances = synth::sample_abundance_field(128, 128, 4, 1.0, 4);
    auto labels = synth::derive_labels(gt);
    std::vector<int> counts(4, 0);
    for (int lab : labels) ++counts[static_cast<std::size_t>(lab)];
    for (int m = 0; m < 4; ++m) {
        double freq = static_cast<double>(counts[static_cast<std::size_t>(m)]) /
                      static_cast<double>(labels.size());
        CHECK(freq > 0.20);
        CHECK(freq < 0.30);
    }
}

TEST_CASE("cube files round-trip bit-exactly") {
    testsupport::TempDir dir("cube_io");
    auto cube = testsupport::random_cube(6, 4, 5, 91);
    synth::write_cube(cube, dir / "a.hsc");
    auto back = synth::read_cube(dir / "a.hsc");
    CHECK(back.height == 6);
    CHECK(back.width == 4);
    CHECK(back.bands == 5);
    CHECK(back.values == cube.values);
}

TEST_CASE("wrong magic is rejected with the byte offset") {
    testsupport::TempDir dir("bad_magic");
    {
        std::ofstream out(dir / "bad.hsc", std::ios::binary);
        out << "NOPE" << std::string(12, '\0');
    }
    try {
        synth::read_cube(dir / "bad.hsc");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        std::string msg = e.what();
        CHECK(msg.find("byte 0") != std::string::npos);
        CHECK(msg.find("HSC1") != std::string::npos);
    }
}

TEST_CASE("truncated payloads are rejected") {
    testsupport::TempDir dir("truncated");
    auto cube = testsupport::random_cube(2, 2, 3, 92);
    synth::write_cube(cube, dir / "t.hsc");
    auto bytes = testsupport::read_bytes(dir / "t.hsc");
    bytes.resize(16 + 10 * 4 / 2);  // header + half the floats
    {
        std::ofstream out(dir / "t.hsc", std::ios::binary);
        out.write(reinterpret_cast<const char*>(bytes.data()),
                  static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(synth::read_cube(dir / "t.hsc"), FormatError);
}

TEST_CASE("oversized extents are rejected before allocation") {
    testsupport::TempDir dir("overflow");
    {
        std::ofstream out(dir / "o.hsc", std::ios::binary);
        out << "HSC1";
        std::uint32_t big[3] = {0xFFFFFFFFu, 0xFFFFFFFFu, 0xFFFFFFFFu};
        out.write(reinterpret_cast<const char*>(big), 12);
    }
    try {
        synth::read_cube(dir / "o.hsc");
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("overflow") != std::string::npos);
    }
}

TEST_CASE("datasets round-trip through the directory layout") {
    testsupport::TempDir dir("dataset");
    synth::GenParams params;
    params.tiles = 3;
    params.height = 8;
    params.width = 8;
    params.bands = 6;
    params.endmembers = 3;
    params.seed = 55;
    auto ds = synth::generate_dataset(params);
    synth::write_dataset(ds, dir.path());
    auto back = synth::load_dataset(dir.path());
    CHECK(back.tiles.size() == 3);
    CHECK(back.endmembers.count == 3);
    CHECK(back.tiles[1].cube.values == ds.tiles[1].cube.values);
    CHECK(back.tiles[2].labels == ds.tiles[2].labels);
    CHECK(back.params.seed == params.seed);
}

TEST_CASE("generation is deterministic per seed and tile") {
    synth::GenParams params;
    params.tiles = 2;
    params.height = 8;
    params.width = 8;
    params.bands = 6;
    params.endmembers = 3;
    params.seed = 17;
    auto a = synth::generate_dataset(params);
    auto b = synth::generate_dataset(params);
    CHECK(a.endmembers.values == b.endmembers.values);
    CHECK(a.tiles[0].cube.values == b.tiles[0].cube.values);
    CHECK(a.tiles[1].abundances.values == b.tiles[1].abundances.values);
}
