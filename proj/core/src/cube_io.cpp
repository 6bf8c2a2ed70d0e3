#include "karma/cube.hpp"

#include <limits>

#include "binio.hpp"

namespace karma::synth {

namespace {

// Payload cap keeps a corrupt header from driving a huge allocation.
constexpr std::uint64_t kMaxElements = 1ull << 31;

struct Extents {
    std::uint32_t a = 0, b = 0, c = 0;
    std::uint64_t elements() const {
        return static_cast<std::uint64_t>(a) * b * c;
    }
};

void write_container(const char magic[4], Extents e, const std::vector<float>& payload,
                     const std::filesystem::path& path) {
    binio::Writer w(path.string());
    w.magic(magic);
    w.u32(e.a);
    w.u32(e.b);
    w.u32(e.c);
    for (float v : payload) w.f32(v);
    w.close();
}

std::vector<float> read_container(const char magic[4], Extents& e,
                                  const std::filesystem::path& path) {
    binio::Reader r(path.string());
    r.expect_magic(magic);
    std::size_t header_at = r.offset();
    e.a = r.u32("extent");
    e.b = r.u32("extent");
    e.c = r.u32("extent");
    std::uint64_t n = e.elements();
    if (n == 0 || n > kMaxElements)
        throw FormatError(r.path() + ": extent overflow at byte " + std::to_string(header_at) +
                          " (" + std::to_string(e.a) + "x" + std::to_string(e.b) + "x" +
                          std::to_string(e.c) + ")");
    std::vector<float> payload(n);
    for (std::uint64_t i = 0; i < n; ++i) payload[i] = r.f32("payload");
    if (!r.at_eof())
        throw FormatError(r.path() + ": trailing bytes after payload at byte " +
                          std::to_string(r.offset()));
    return payload;
}

}  // namespace

HyperCube HyperCube::zeros(std::int64_t h, std::int64_t w, std::int64_t c, double range) {
    HyperCube cube;
    cube.height = h;
    cube.width = w;
    cube.bands = c;
    cube.data_range = range;
    cube.values.assign(static_cast<std::size_t>(h * w * c), 0.0f);
    return cube;
}

std::vector<double> EndmemberMatrix::column(std::int64_t m) const {
    std::vector<double> col(static_cast<std::size_t>(bands));
    for (std::int64_t c = 0; c < bands; ++c) col[static_cast<std::size_t>(c)] = at(c, m);
    return col;
}

void write_cube(const HyperCube& cube, const std::filesystem::path& path) {
    if (cube.values.size() != static_cast<std::size_t>(cube.height * cube.width * cube.bands))
        throw ShapeError("write_cube: value count does not match extents");
    write_container("HSC1",
                    {static_cast<std::uint32_t>(cube.height),
                     static_cast<std::uint32_t>(cube.width),
                     static_cast<std::uint32_t>(cube.bands)},
                    cube.values, path);
}

HyperCube read_cube(const std::filesystem::path& path) {
    Extents e;
    auto payload = read_container("HSC1", e, path);
    HyperCube cube;
    cube.height = e.a;
    cube.width = e.b;
    cube.bands = e.c;
    cube.values = std::move(payload);
    return cube;
}

void write_endmembers(const EndmemberMatrix& em, const std::filesystem::path& path) {
    std::vector<float> payload(em.values.begin(), em.values.end());
    write_container("EMM1",
                    {1u, static_cast<std::uint32_t>(em.bands), static_cast<std::uint32_t>(em.count)},
                    payload, path);
}

EndmemberMatrix read_endmembers(const std::filesystem::path& path) {
    Extents e;
    auto payload = read_container("EMM1", e, path);
    if (e.a != 1)
        throw FormatError(path.string() + ": endmember container expects leading extent 1");
    EndmemberMatrix em;
    em.bands = e.b;
    em.count = e.c;
    em.values.assign(payload.begin(), payload.end());
    return em;
}

void write_abundance(const AbundanceField& field, const std::filesystem::path& path) {
    std::vector<float> payload(field.values.begin(), field.values.end());
    write_container("ABF1",
                    {static_cast<std::uint32_t>(field.height),
                     static_cast<std::uint32_t>(field.width),
                     static_cast<std::uint32_t>(field.count)},
                    payload, path);
}

AbundanceField read_abundance(const std::filesystem::path& path) {
    Extents e;
    auto payload = read_container("ABF1", e, path);
    AbundanceField field;
    field.height = e.a;
    field.width = e.b;
    field.count = e.c;
    field.values.assign(payload.begin(), payload.end());
    return field;
}

}  // namespace karma::synth
