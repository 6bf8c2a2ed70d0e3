#include "karma/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "json.hpp"
#include "karma/log.hpp"
#include "karma/rng.hpp"
#include "karma/spectral.hpp"

namespace karma::synth {

using nlohmann::json;

void GenParams::validate() const {
    if (tiles < 1) throw ConfigError("gen.tiles must be >= 1");
    if (height < 1 || width < 1) throw ConfigError("gen.height/width must be >= 1");
    if (bands < 1) throw ConfigError("gen.bands must be >= 1");
    if (endmembers < 2) throw ConfigError("gen.endmembers must be >= 2");
    if (endmembers > bands) throw ConfigError("gen.endmembers cannot exceed gen.bands");
    if (!(concentration > 0.0)) throw ConfigError("gen.concentration must be > 0");
    if (noise_sigma < 0.0) throw ConfigError("gen.noise_sigma must be >= 0");
    if (!(min_separation > 0.0)) throw ConfigError("gen.min_separation must be > 0");
}

namespace {

std::vector<double> sample_spectrum(rng::Stream& st, std::int64_t bands) {
    std::vector<double> s(static_cast<std::size_t>(bands), 0.0);
    int bumps = 3 + static_cast<int>(st.bounded(4));  // 3..6
    double b = static_cast<double>(bands);
    for (int k = 0; k < bumps; ++k) {
        double center = st.uniform(-0.1 * b, 1.1 * b);
        double width = st.uniform(std::max(1.0, b / 16.0), std::max(2.0, b / 4.0));
        double amp = st.uniform(0.2, 1.0);
        for (std::int64_t c = 0; c < bands; ++c) {
            double d = (static_cast<double>(c) - center) / width;
            s[static_cast<std::size_t>(c)] += amp * std::exp(-0.5 * d * d);
        }
    }
    return s;
}

bool rescale_unit(std::vector<double>& s, double lo, double hi) {
    double mn = s[0], mx = s[0];
    for (double v : s) {
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx - mn < 1e-12) return false;
    for (double& v : s) v = lo + (hi - lo) * (v - mn) / (mx - mn);
    return true;
}

}  // namespace

EndmemberMatrix sample_endmembers(std::int64_t bands, std::int64_t count, std::uint64_t seed,
                                  double min_separation) {
    if (count < 2) throw UsageError("sample_endmembers: need at least 2 endmembers");
    if (bands < count) throw UsageError("sample_endmembers: need bands >= endmembers");
    rng::Stream st(rng::derive_key(seed, "endmembers"));
    std::vector<std::vector<double>> cols;
    cols.reserve(static_cast<std::size_t>(count));
    for (std::int64_t m = 0; m < count; ++m) {
        bool placed = false;
        for (int attempt = 0; attempt < 100 && !placed; ++attempt) {
            auto s = sample_spectrum(st, bands);
            if (!rescale_unit(s, 0.05, 0.95)) continue;
            bool separated = true;
            for (const auto& prev : cols)
                if (spectral_angle(s, prev) < min_separation) separated = false;
            if (separated) {
                cols.push_back(std::move(s));
                placed = true;
            }
        }
        if (!placed)
            throw GenerationError("sample_endmembers: could not separate column " +
                                  std::to_string(m) + " after 100 attempts (min angle " +
                                  std::to_string(min_separation) + ")");
    }
    EndmemberMatrix em;
    em.bands = bands;
    em.count = count;
    em.values.resize(static_cast<std::size_t>(bands * count));
    for (std::int64_t c = 0; c < bands; ++c)
        for (std::int64_t m = 0; m < count; ++m)
            em.at(c, m) = cols[static_cast<std::size_t>(m)][static_cast<std::size_t>(c)];
    return em;
}

AbundanceField sample_abundance_field(std::int64_t height, std::int64_t width, std::int64_t count,
                                      double concentration, std::uint64_t seed) {
    if (count < 1) throw UsageError("sample_abundance_field: count must be >= 1");
    if (!(concentration > 0.0)) throw UsageError("sample_abundance_field: concentration must be > 0");
    AbundanceField field;
    field.height = height;
    field.width = width;
    field.count = count;
    field.values.resize(static_cast<std::size_t>(height * width * count));

    rng::Stream st(rng::derive_key(seed, "abundance"));
    std::vector<double> draw(static_cast<std::size_t>(count));
    for (std::int64_t p = 0; p < height * width; ++p) {
        st.dirichlet(concentration, draw);
        std::copy(draw.begin(), draw.end(),
                  field.values.begin() + static_cast<std::ptrdiff_t>(p * count));
    }

    // 3x3 box blur with available-neighbor averaging keeps each vector a
    // convex combination of simplex vectors.
    AbundanceField blurred = field;
    for (std::int64_t y = 0; y < height; ++y) {
        for (std::int64_t x = 0; x < width; ++x) {
            for (std::int64_t m = 0; m < count; ++m) {
                double acc = 0.0;
                int n = 0;
                for (std::int64_t dy = -1; dy <= 1; ++dy) {
                    for (std::int64_t dx = -1; dx <= 1; ++dx) {
                        std::int64_t yy = y + dy, xx = x + dx;
                        if (yy < 0 || yy >= height || xx < 0 || xx >= width) continue;
                        acc += field.at(yy, xx, m);
                        ++n;
                    }
                }
                blurred.at(y, x, m) = acc / n;
            }
        }
    }

    // Re-project: clip negatives (none expected), renormalize the sum.
    for (std::int64_t p = 0; p < height * width; ++p) {
        double total = 0.0;
        for (std::int64_t m = 0; m < count; ++m) {
            double& v = blurred.values[static_cast<std::size_t>(p * count + m)];
            if (v < 0.0) v = 0.0;
            total += v;
        }
        if (total <= 0.0) {
            for (std::int64_t m = 0; m < count; ++m)
                blurred.values[static_cast<std::size_t>(p * count + m)] = 1.0 / count;
            continue;
        }
        for (std::int64_t m = 0; m < count; ++m)
            blurred.values[static_cast<std::size_t>(p * count + m)] /= total;
    }
    return blurred;
}

HyperCube mix(const GroundTruth& gt, std::uint64_t noise_seed) {
    const auto& em = gt.endmembers;
    const auto& ab = gt.abundances;
    if (em.count != ab.count)
        throw ShapeError("mix: endmember count " + std::to_string(em.count) +
                         " vs abundance count " + std::to_string(ab.count));
    HyperCube cube = HyperCube::zeros(ab.height, ab.width, em.bands);
    rng::Stream noise(rng::derive_key(noise_seed, "noise"));
    for (std::int64_t p = 0; p < ab.height * ab.width; ++p) {
        const double* x = ab.values.data() + p * ab.count;
        for (std::int64_t c = 0; c < em.bands; ++c) {
            double v = 0.0;
            for (std::int64_t m = 0; m < em.count; ++m) v += em.at(c, m) * x[m];
            if (gt.noise_sigma > 0.0) v += gt.noise_sigma * noise.normal();
            v = std::min(cube.data_range, std::max(0.0, v));
            cube.values[static_cast<std::size_t>(p * em.bands + c)] = static_cast<float>(v);
        }
    }
    return cube;
}

std::vector<int> derive_labels(const GroundTruth& gt) {
    const auto& ab = gt.abundances;
    std::vector<int> labels(static_cast<std::size_t>(ab.height * ab.width));
    for (std::int64_t p = 0; p < ab.height * ab.width; ++p) {
        const double* x = ab.values.data() + p * ab.count;
        int best = 0;
        for (std::int64_t m = 1; m < ab.count; ++m)
            if (x[m] > x[best]) best = static_cast<int>(m);
        labels[static_cast<std::size_t>(p)] = best;
    }
    return labels;
}

Tile generate_tile(const GenParams& params, const EndmemberMatrix& em, std::int64_t tile_index) {
    std::uint64_t tile_seed = rng::derive_key(params.seed, "tile", static_cast<std::uint64_t>(tile_index));
    GroundTruth gt;
    gt.endmembers = em;
    gt.abundances = sample_abundance_field(params.height, params.width, params.endmembers,
                                           params.concentration, tile_seed);
    gt.noise_sigma = params.noise_sigma;
    Tile tile;
    char name[32];
    std::snprintf(name, sizeof(name), "tile_%04lld", static_cast<long long>(tile_index));
    tile.name = name;
    tile.seed = tile_seed;
    tile.cube = mix(gt, tile_seed);
    tile.labels = derive_labels(gt);
    tile.abundances = std::move(gt.abundances);
    return tile;
}

Dataset generate_dataset(const GenParams& params) {
    params.validate();
    Dataset ds;
    ds.params = params;
    ds.endmembers = sample_endmembers(params.bands, params.endmembers, params.seed,
                                      params.min_separation);
    ds.tiles.reserve(static_cast<std::size_t>(params.tiles));
    for (std::int64_t i = 0; i < params.tiles; ++i)
        ds.tiles.push_back(generate_tile(params, ds.endmembers, i));
    return ds;
}

namespace {

json gen_params_json(const GenParams& p) {
    return json{{"tiles", p.tiles},
                {"height", p.height},
                {"width", p.width},
                {"bands", p.bands},
                {"endmembers", p.endmembers},
                {"concentration", p.concentration},
                {"noise_sigma", p.noise_sigma},
                {"min_separation", p.min_separation},
                {"seed", p.seed}};
}

GenParams gen_params_from_json(const json& j) {
    GenParams p;
    p.tiles = j.at("tiles").get<std::int64_t>();
    p.height = j.at("height").get<std::int64_t>();
    p.width = j.at("width").get<std::int64_t>();
    p.bands = j.at("bands").get<std::int64_t>();
    p.endmembers = j.at("endmembers").get<std::int64_t>();
    p.concentration = j.at("concentration").get<double>();
    p.noise_sigma = j.at("noise_sigma").get<double>();
    p.min_separation = j.at("min_separation").get<double>();
    p.seed = j.at("seed").get<std::uint64_t>();
    return p;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
    if (!out) throw FormatError("write failed: " + path.string());
}

json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    return j;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    write_endmembers(ds.endmembers, dir / "endmembers.emm");

    json manifest;
    manifest["params"] = gen_params_json(ds.params);
    manifest["endmember_file"] = "endmembers.emm";
    json records = json::array();
    for (const auto& tile : ds.tiles) {
        write_cube(tile.cube, dir / (tile.name + ".hsc"));
        write_abundance(tile.abundances, dir / (tile.name + ".abf"));

        json sidecar{{"data_range", tile.cube.data_range},
                     {"noise_sigma", ds.params.noise_sigma},
                     {"M", ds.params.endmembers},
                     {"seed", tile.seed},
                     {"endmember_file", "endmembers.emm"},
                     {"abundance_file", tile.name + ".abf"}};
        write_text(dir / (tile.name + ".json"), sidecar.dump(2) + "\n");

        json labels{{"height", ds.params.height},
                    {"width", ds.params.width},
                    {"values", tile.labels}};
        write_text(dir / (tile.name + ".labels.json"), labels.dump() + "\n");

        records.push_back(json{{"name", tile.name},
                               {"cube", tile.name + ".hsc"},
                               {"sidecar", tile.name + ".json"},
                               {"abundance", tile.name + ".abf"},
                               {"labels", tile.name + ".labels.json"},
                               {"seed", tile.seed}});
    }
    manifest["tiles"] = records;
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    log::info("wrote " + std::to_string(ds.tiles.size()) + " tiles to " + dir.string());
}

Dataset load_dataset(const std::filesystem::path& dir) {
    json manifest = read_json_file(dir / "manifest.json");
    Dataset ds;
    ds.params = gen_params_from_json(manifest.at("params"));
    ds.endmembers = read_endmembers(dir / manifest.at("endmember_file").get<std::string>());
    for (const auto& rec : manifest.at("tiles")) {
        Tile tile;
        tile.name = rec.at("name").get<std::string>();
        tile.seed = rec.at("seed").get<std::uint64_t>();
        tile.cube = read_cube(dir / rec.at("cube").get<std::string>());
        tile.abundances = read_abundance(dir / rec.at("abundance").get<std::string>());
        json labels = read_json_file(dir / rec.at("labels").get<std::string>());
        tile.labels = labels.at("values").get<std::vector<int>>();
        ds.tiles.push_back(std::move(tile));
    }
    return ds;
}

}  // namespace karma::synth
