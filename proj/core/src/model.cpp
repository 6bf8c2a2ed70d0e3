#include "karma/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "karma/rng.hpp"

namespace karma::model {

using nd::Tensor;
using nd::index_t;

void ModelConfig::validate(bool allow_zero_mask) const {
    if (image_size < 1) throw ConfigError("model.image_size must be >= 1");
    if (patch_size < 1) throw ConfigError("model.patch_size must be >= 1");
    if (image_size % patch_size != 0)
        throw ConfigError("model.image_size must be divisible by model.patch_size");
    if (bands < 1) throw ConfigError("model.bands must be >= 1");
    if (heads < 1) throw ConfigError("model.heads must be >= 1");
    if (embed_dim % heads != 0)
        throw ConfigError("model.embed_dim must be divisible by model.heads");
    if (decoder_dim % heads != 0)
        throw ConfigError("model.decoder_dim must be divisible by model.heads");
    if (decoder_dim % 2 != 0 || decoder_dim < 2)
        throw ConfigError("model.decoder_dim must be even (abundance head is D_dec -> D_dec/2 -> M)");
    if (encoder_depth < 1 || decoder_depth < 1)
        throw ConfigError("model.encoder_depth/decoder_depth must be >= 1");
    if (allow_zero_mask) {
        if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
            throw ConfigError("model.mask_ratio must lie in [0, 1)");
    } else if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) {
        throw ConfigError("model.mask_ratio must lie in (0, 1)");
    }
    if (endmember_count < 2) throw ConfigError("model.endmember_count must be >= 2");
    if (!(mlp_ratio > 0.0)) throw ConfigError("model.mlp_ratio must be > 0");
}

nd::Tensor patchify(const synth::HyperCube& cube, std::int64_t patch_size) {
    if (cube.height % patch_size != 0 || cube.width % patch_size != 0)
        throw ConfigError("patchify: cube " + std::to_string(cube.height) + "x" +
                          std::to_string(cube.width) + " not divisible by patch size " +
                          std::to_string(patch_size));
    index_t gh = cube.height / patch_size;
    index_t gw = cube.width / patch_size;
    index_t token_dim = patch_size * patch_size * cube.bands;
    std::vector<double> data(static_cast<std::size_t>(gh * gw * token_dim));
    std::size_t pos = 0;
    for (index_t pr = 0; pr < gh; ++pr)
        for (index_t pc = 0; pc < gw; ++pc)
            for (index_t py = 0; py < patch_size; ++py)
                for (index_t px = 0; px < patch_size; ++px)
                    for (index_t b = 0; b < cube.bands; ++b)
                        data[pos++] = cube.at(pr * patch_size + py, pc * patch_size + px, b);
    return Tensor::from_vector({gh * gw, token_dim}, std::move(data));
}

synth::HyperCube unpatchify(const nd::Tensor& tokens, std::int64_t image_size,
                            std::int64_t patch_size, std::int64_t bands, double data_range) {
    index_t grid = image_size / patch_size;
    if (tokens.rows() != grid * grid || tokens.cols() != patch_size * patch_size * bands)
        throw ShapeError("unpatchify: token matrix " + nd::shape_str(tokens.shape()) +
                         " does not match image geometry");
    synth::HyperCube cube = synth::HyperCube::zeros(image_size, image_size, bands, data_range);
    const double* src = tokens.data();
    std::size_t pos = 0;
    for (index_t pr = 0; pr < grid; ++pr)
        for (index_t pc = 0; pc < grid; ++pc)
            for (index_t py = 0; py < patch_size; ++py)
                for (index_t px = 0; px < patch_size; ++px)
                    for (index_t b = 0; b < bands; ++b)
                        cube.at(pr * patch_size + py, pc * patch_size + px, b) =
                            static_cast<float>(src[pos++]);
    return cube;
}

MaskPlan make_mask(std::int64_t total_tokens, double mask_ratio, std::uint64_t seed,
                   std::uint64_t sample_index) {
    if (total_tokens < 1) throw UsageError("make_mask: no tokens");
    if (!(mask_ratio >= 0.0 && mask_ratio < 1.0))
        throw UsageError("make_mask: mask_ratio out of [0, 1)");
    index_t k = static_cast<index_t>(std::llround(mask_ratio * static_cast<double>(total_tokens)));
    MaskPlan plan;
    plan.total = total_tokens;
    if (k == 0) {
        plan.visible.resize(static_cast<std::size_t>(total_tokens));
        std::iota(plan.visible.begin(), plan.visible.end(), 0);
        return plan;
    }
    // Random keys, argsort, first k become masked.
    rng::Stream st(rng::derive_key(seed, "mask", sample_index));
    std::vector<std::pair<std::uint64_t, index_t>> keys;
    keys.reserve(static_cast<std::size_t>(total_tokens));
    for (index_t t = 0; t < total_tokens; ++t) keys.emplace_back(st.next_u64(), t);
    std::stable_sort(keys.begin(), keys.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    for (index_t i = 0; i < total_tokens; ++i) {
        if (i < k)
            plan.masked.push_back(keys[static_cast<std::size_t>(i)].second);
        else
            plan.visible.push_back(keys[static_cast<std::size_t>(i)].second);
    }
    std::sort(plan.masked.begin(), plan.masked.end());
    std::sort(plan.visible.begin(), plan.visible.end());
    return plan;
}

MaskPlan full_visibility(std::int64_t total_tokens) {
    MaskPlan plan;
    plan.total = total_tokens;
    plan.visible.resize(static_cast<std::size_t>(total_tokens));
    std::iota(plan.visible.begin(), plan.visible.end(), 0);
    return plan;
}

nd::Tensor sinusoidal_positions(std::int64_t count, std::int64_t dim) {
    std::vector<double> data(static_cast<std::size_t>(count * dim), 0.0);
    for (index_t p = 0; p < count; ++p) {
        for (index_t i = 0; i < dim / 2; ++i) {
            double rate = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(dim));
            data[static_cast<std::size_t>(p * dim + 2 * i)] = std::sin(p * rate);
            data[static_cast<std::size_t>(p * dim + 2 * i + 1)] = std::cos(p * rate);
        }
        if (dim % 2) data[static_cast<std::size_t>(p * dim + dim - 1)] = 0.0;
    }
    return Tensor::from_vector({count, dim}, std::move(data), false);
}

namespace {

Tensor uniform_init(nd::Shape shape, double bound, std::uint64_t key) {
    rng::Stream st(key);
    std::vector<double> data(static_cast<std::size_t>(nd::numel(shape)));
    for (auto& v : data) v = st.uniform(-bound, bound);
    return Tensor::from_vector(std::move(shape), std::move(data), true);
}

void add_linear(ParamStore& ps, const std::string& name, index_t in, index_t out,
                std::uint64_t seed) {
    double bound = 1.0 / std::sqrt(static_cast<double>(in));
    ps.add(name + ".w", uniform_init({in, out}, bound, rng::derive_key(seed, "init/" + name + ".w")));
    ps.add(name + ".b", uniform_init({out}, bound, rng::derive_key(seed, "init/" + name + ".b")));
}

void add_layernorm(ParamStore& ps, const std::string& name, index_t dim) {
    ps.add(name + ".g", Tensor::full({dim}, 1.0, true));
    ps.add(name + ".b", Tensor::zeros({dim}, true));
}

void add_block(ParamStore& ps, const std::string& prefix, index_t dim, double mlp_ratio,
               std::uint64_t seed) {
    add_layernorm(ps, prefix + ".ln1", dim);
    add_linear(ps, prefix + ".attn.q", dim, dim, seed);
    add_linear(ps, prefix + ".attn.k", dim, dim, seed);
    add_linear(ps, prefix + ".attn.v", dim, dim, seed);
    add_linear(ps, prefix + ".attn.o", dim, dim, seed);
    add_layernorm(ps, prefix + ".ln2", dim);
    index_t hidden = std::max<index_t>(1, static_cast<index_t>(std::llround(mlp_ratio * dim)));
    add_linear(ps, prefix + ".mlp.fc1", dim, hidden, seed);
    add_linear(ps, prefix + ".mlp.fc2", hidden, dim, seed);
}

Tensor linear(const Tensor& x, const ParamStore& ps, const std::string& name) {
    return nd::add(nd::matmul(x, ps.at(name + ".w")), ps.at(name + ".b"));
}

Tensor attention(const Tensor& x, const ParamStore& ps, const std::string& prefix, index_t heads) {
    index_t dim = x.cols();
    index_t dh = dim / heads;
    Tensor q = linear(x, ps, prefix + ".attn.q");
    Tensor k = linear(x, ps, prefix + ".attn.k");
    Tensor v = linear(x, ps, prefix + ".attn.v");
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Tensor> mixed;
    mixed.reserve(static_cast<std::size_t>(heads));
    for (index_t h = 0; h < heads; ++h) {
        Tensor qh = nd::slice_cols(q, h * dh, (h + 1) * dh);
        Tensor kh = nd::slice_cols(k, h * dh, (h + 1) * dh);
        Tensor vh = nd::slice_cols(v, h * dh, (h + 1) * dh);
        Tensor scores = nd::mul(nd::matmul(qh, nd::transpose(kh)), scale);
        mixed.push_back(nd::matmul(nd::softmax(scores), vh));
    }
    return linear(nd::concat_cols(mixed), ps, prefix + ".attn.o");
}

Tensor block(const Tensor& x, const ParamStore& ps, const std::string& prefix, index_t heads) {
    Tensor h = nd::layernorm(x, ps.at(prefix + ".ln1.g"), ps.at(prefix + ".ln1.b"));
    Tensor y = nd::add(x, attention(h, ps, prefix, heads));
    Tensor h2 = nd::layernorm(y, ps.at(prefix + ".ln2.g"), ps.at(prefix + ".ln2.b"));
    Tensor m = linear(nd::gelu(linear(h2, ps, prefix + ".mlp.fc1")), ps, prefix + ".mlp.fc2");
    return nd::add(y, m);
}

}  // namespace

ParamStore init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ParamStore ps;
    index_t T = cfg.token_count();
    add_linear(ps, "patch_proj", cfg.token_dim(), cfg.embed_dim, seed);
    ps.add("enc.pos", sinusoidal_positions(T, cfg.embed_dim));
    for (index_t l = 0; l < cfg.encoder_depth; ++l)
        add_block(ps, "enc.l" + std::to_string(l), cfg.embed_dim, cfg.mlp_ratio, seed);
    add_layernorm(ps, "enc.norm", cfg.embed_dim);

    add_linear(ps, "dec.embed", cfg.embed_dim, cfg.decoder_dim, seed);
    ps.add("dec.mask_token", Tensor::zeros({cfg.decoder_dim}, true));
    ps.add("dec.pos", sinusoidal_positions(T, cfg.decoder_dim));
    for (index_t l = 0; l < cfg.decoder_depth; ++l)
        add_block(ps, "dec.l" + std::to_string(l), cfg.decoder_dim, cfg.mlp_ratio, seed);
    add_layernorm(ps, "dec.norm", cfg.decoder_dim);

    add_linear(ps, "head.pixel", cfg.decoder_dim, cfg.token_dim(), seed);
    add_linear(ps, "head.abund.fc1", cfg.decoder_dim, cfg.decoder_dim / 2, seed);
    add_linear(ps, "head.abund.fc2", cfg.decoder_dim / 2, cfg.endmember_count, seed);

    // Learned spectral basis, uniform in [0, 1] per entry.
    {
        rng::Stream st(rng::derive_key(seed, "init/endmembers"));
        std::vector<double> a(static_cast<std::size_t>(cfg.bands * cfg.endmember_count));
        for (auto& v : a) v = st.next_unit();
        ps.add("endmembers", Tensor::from_vector({cfg.bands, cfg.endmember_count}, std::move(a), true));
    }
    return ps;
}

nd::Tensor encode(const nd::Tensor& tokens, const MaskPlan& plan, const ParamStore& params,
                  const ModelConfig& cfg) {
    if (tokens.rows() != plan.total)
        throw ShapeError("encode: plan covers " + std::to_string(plan.total) + " tokens, got " +
                         std::to_string(tokens.rows()));
    if (plan.visible.empty()) throw UsageError("encode: plan leaves no visible tokens");
    Tensor vis = nd::gather_rows(tokens, plan.visible);
    Tensor x = linear(vis, params, "patch_proj");
    x = nd::add(x, nd::gather_rows(params.at("enc.pos"), plan.visible));
    for (index_t l = 0; l < cfg.encoder_depth; ++l)
        x = block(x, params, "enc.l" + std::to_string(l), cfg.heads);
    return nd::layernorm(x, params.at("enc.norm.g"), params.at("enc.norm.b"));
}

ForwardOutput decode(const nd::Tensor& latent, const MaskPlan& plan, const ParamStore& params,
                     const ModelConfig& cfg) {
    index_t T = plan.total;
    Tensor d = linear(latent, params, "dec.embed");
    Tensor full = nd::scatter_rows(T, plan.visible, d);
    if (!plan.masked.empty()) {
        Tensor mask_rows = nd::repeat_rows(params.at("dec.mask_token"),
                                           static_cast<index_t>(plan.masked.size()));
        full = nd::add(full, nd::scatter_rows(T, plan.masked, mask_rows));
    }
    full = nd::add(full, params.at("dec.pos"));
    for (index_t l = 0; l < cfg.decoder_depth; ++l)
        full = block(full, params, "dec.l" + std::to_string(l), cfg.heads);
    full = nd::layernorm(full, params.at("dec.norm.g"), params.at("dec.norm.b"));

    ForwardOutput out;
    out.latent = latent;
    out.pixel_all = linear(full, params, "head.pixel");
    if (!plan.masked.empty()) out.pixel_recon = nd::gather_rows(out.pixel_all, plan.masked);
    Tensor hidden = nd::gelu(linear(full, params, "head.abund.fc1"));
    out.abundances = nd::softmax(linear(hidden, params, "head.abund.fc2"));
    out.endmembers = params.at("endmembers");
    out.phys_recon = nd::matmul(out.abundances, nd::transpose(out.endmembers));
    return out;
}

ForwardOutput forward(const nd::Tensor& tokens, const MaskPlan& plan, const ParamStore& params,
                      const ModelConfig& cfg) {
    return decode(encode(tokens, plan, params, cfg), plan, params, cfg);
}

std::vector<double> patch_mean_spectrum(const nd::Tensor& tokens, std::int64_t token,
                                        std::int64_t bands) {
    if (token < 0 || token >= tokens.rows())
        throw UsageError("patch_mean_spectrum: token index out of range");
    index_t pixels = tokens.cols() / bands;
    std::vector<double> mean(static_cast<std::size_t>(bands), 0.0);
    const double* row = tokens.data() + token * tokens.cols();
    for (index_t p = 0; p < pixels; ++p)
        for (index_t b = 0; b < bands; ++b) mean[static_cast<std::size_t>(b)] += row[p * bands + b];
    for (auto& v : mean) v /= static_cast<double>(pixels);
    return mean;
}

nd::Tensor token_mean_spectra(const nd::Tensor& tokens, std::int64_t bands) {
    index_t T = tokens.rows();
    std::vector<double> data(static_cast<std::size_t>(T * bands));
    for (index_t t = 0; t < T; ++t) {
        auto mean = patch_mean_spectrum(tokens, t, bands);
        std::copy(mean.begin(), mean.end(), data.begin() + static_cast<std::ptrdiff_t>(t * bands));
    }
    return Tensor::from_vector({T, bands}, std::move(data));
}

ParamStore init_downstream_params(const ModelConfig& cfg, std::int64_t num_classes,
                                  std::uint64_t seed) {
    if (num_classes < 2) throw ConfigError("downstream: num_classes must be >= 2");
    ParamStore ps;
    index_t half = std::max<index_t>(1, cfg.embed_dim / 2);
    add_linear(ps, "ds.conv", 9 * cfg.embed_dim, half, seed);
    add_linear(ps, "ds.fc", half, num_classes, seed);
    return ps;
}

nd::Tensor downstream_logits(const nd::Tensor& latent_grid, const ParamStore& head,
                             const ModelConfig& cfg) {
    index_t side = cfg.grid_side();
    index_t T = side * side;
    index_t D = cfg.embed_dim;
    if (latent_grid.rows() != T || latent_grid.cols() != D)
        throw ShapeError("downstream_logits: expected " + std::to_string(T) + "x" +
                         std::to_string(D) + " latents, got " + nd::shape_str(latent_grid.shape()));
    // Zero-padded 3x3 neighborhoods via one appended zero row.
    Tensor padded = nd::concat_rows({latent_grid, Tensor::zeros({1, D})});
    std::vector<index_t> idx;
    idx.reserve(static_cast<std::size_t>(T * 9));
    for (index_t gy = 0; gy < side; ++gy)
        for (index_t gx = 0; gx < side; ++gx)
            for (index_t dy = -1; dy <= 1; ++dy)
                for (index_t dx = -1; dx <= 1; ++dx) {
                    index_t yy = gy + dy, xx = gx + dx;
                    bool in = yy >= 0 && yy < side && xx >= 0 && xx < side;
                    idx.push_back(in ? yy * side + xx : T);
                }
    Tensor windows = nd::reshape(nd::gather_rows(padded, std::move(idx)), {T, 9 * D});
    Tensor hidden = nd::gelu(linear(windows, head, "ds.conv"));
    return linear(hidden, head, "ds.fc");
}

}  // namespace karma::model
