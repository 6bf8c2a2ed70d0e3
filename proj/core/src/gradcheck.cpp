#include "karma/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"
#include "karma/model.hpp"
#include "karma/objective.hpp"
#include "karma/rng.hpp"

namespace karma::gradcheck {

using nd::Tensor;
using nd::index_t;

bool Report::pass() const {
    if (end_to_end >= tolerance) return false;
    for (const auto& r : ops)
        if (r.max_rel_err >= tolerance) return false;
    return true;
}

std::string Report::worst_failure() const {
    std::string worst;
    double err = tolerance;
    for (const auto& r : ops) {
        if (r.max_rel_err >= err) {
            err = r.max_rel_err;
            worst = r.op;
        }
    }
    if (end_to_end >= err) worst = "full_objective";
    return worst;
}

std::string Report::to_json() const {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& r : ops) per.push_back({{"op", r.op}, {"max_rel_err", r.max_rel_err}});
    nlohmann::json j{{"ops", per},
                     {"end_to_end", end_to_end},
                     {"tolerance", tolerance},
                     {"pass", pass()}};
    return j.dump(2);
}

double check_scalar_fn(const std::function<Tensor()>& fn, const std::vector<Tensor>& leaves,
                       double step, double denom_floor) {
    Tensor root = fn();
    for (auto leaf : leaves) leaf.zero_grad();
    nd::backward(root);

    double worst = 0.0;
    for (auto leaf : leaves) {
        if (!leaf.requires_grad()) continue;
        const std::vector<double> analytic = leaf.grad();
        auto& vals = leaf.values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            double keep = vals[i];
            vals[i] = keep + step;
            double up = fn().item();
            vals[i] = keep - step;
            double down = fn().item();
            vals[i] = keep;
            double fd = (up - down) / (2.0 * step);
            double denom = std::max({std::fabs(analytic[i]), std::fabs(fd), denom_floor});
            worst = std::max(worst, std::fabs(analytic[i] - fd) / denom);
        }
    }
    return worst;
}

namespace {

Tensor random_tensor(nd::Shape shape, rng::Stream& st, double lo, double hi, bool rg = true) {
    std::vector<double> data(static_cast<std::size_t>(nd::numel(shape)));
    for (auto& v : data) v = st.uniform(lo, hi);
    return Tensor::from_vector(std::move(shape), std::move(data), rg);
}

// Scalarize through fixed random weights so every output element matters.
Tensor weigh(const Tensor& t, const Tensor& w) { return nd::sum(nd::mul(t, w)); }

struct Scenario {
    std::string name;
    std::vector<Tensor> leaves;
    std::function<Tensor()> fn;
};

std::vector<Scenario> build_scenarios(std::uint64_t seed) {
    rng::Stream st(rng::derive_key(seed, "gradcheck"));
    std::vector<Scenario> out;
    auto add = [&](std::string name, std::vector<Tensor> leaves, std::function<Tensor()> fn) {
        out.push_back({std::move(name), std::move(leaves), std::move(fn)});
    };

    {
        Tensor a = random_tensor({4, 3}, st, -2.0, 2.0);
        Tensor b = random_tensor({3, 2}, st, -2.0, 2.0);
        Tensor w = random_tensor({4, 2}, st, -1.0, 1.0, false);
        add("matmul", {a, b}, [=] { return weigh(nd::matmul(a, b), w); });
    }
    {
        Tensor a = random_tensor({3, 4}, st, -2.0, 2.0);
        Tensor w = random_tensor({4, 3}, st, -1.0, 1.0, false);
        add("transpose", {a}, [=] { return weigh(nd::transpose(a), w); });
    }
    {
        Tensor a = random_tensor({3, 4}, st, -2.0, 2.0);
        Tensor w = random_tensor({6, 2}, st, -1.0, 1.0, false);
        add("reshape", {a}, [=] { return weigh(nd::reshape(a, {6, 2}), w); });
    }
    {
        Tensor a = random_tensor({3, 5}, st, -2.0, 2.0);
        Tensor w = random_tensor({3, 2}, st, -1.0, 1.0, false);
        add("slice_cols", {a}, [=] { return weigh(nd::slice_cols(a, 1, 3), w); });
    }
    {
        Tensor a = random_tensor({3, 2}, st, -2.0, 2.0);
        Tensor b = random_tensor({3, 3}, st, -2.0, 2.0);
        Tensor w = random_tensor({3, 5}, st, -1.0, 1.0, false);
        add("concat_cols", {a, b}, [=] { return weigh(nd::concat_cols({a, b}), w); });
    }
    {
        Tensor a = random_tensor({2, 4}, st, -2.0, 2.0);
        Tensor b = random_tensor({3, 4}, st, -2.0, 2.0);
        Tensor w = random_tensor({5, 4}, st, -1.0, 1.0, false);
        add("concat_rows", {a, b}, [=] { return weigh(nd::concat_rows({a, b}), w); });
    }
    {
        Tensor a = random_tensor({5, 3}, st, -2.0, 2.0);
        Tensor w = random_tensor({4, 3}, st, -1.0, 1.0, false);
        std::vector<index_t> idx{4, 0, 2, 0};  // repeats accumulate
        add("gather_rows", {a}, [=] { return weigh(nd::gather_rows(a, idx), w); });
    }
    {
        Tensor rows = random_tensor({3, 2}, st, -2.0, 2.0);
        Tensor w = random_tensor({6, 2}, st, -1.0, 1.0, false);
        std::vector<index_t> idx{5, 1, 3};
        add("scatter_rows", {rows}, [=] { return weigh(nd::scatter_rows(6, idx, rows), w); });
    }
    {
        Tensor row = random_tensor({4}, st, -2.0, 2.0);
        Tensor w = random_tensor({3, 4}, st, -1.0, 1.0, false);
        add("repeat_rows", {row}, [=] { return weigh(nd::repeat_rows(row, 3), w); });
    }

    auto binary = [&](const char* name, auto op, double blo, double bhi) {
        Tensor a = random_tensor({3, 4}, st, -2.0, 2.0);
        Tensor b = random_tensor({3, 4}, st, blo, bhi);
        Tensor row = random_tensor({4}, st, blo, bhi);
        Tensor w = random_tensor({3, 4}, st, -1.0, 1.0, false);
        add(name, {a, b, row},
            [=] { return nd::add(weigh(op(a, b), w), weigh(op(a, row), w)); });
    };
    binary("add", [](const Tensor& x, const Tensor& y) { return nd::add(x, y); }, -2.0, 2.0);
    binary("sub", [](const Tensor& x, const Tensor& y) { return nd::sub(x, y); }, -2.0, 2.0);
    binary("mul", [](const Tensor& x, const Tensor& y) { return nd::mul(x, y); }, -2.0, 2.0);
    binary("div", [](const Tensor& x, const Tensor& y) { return nd::div(x, y); }, 0.5, 2.0);

    auto unary = [&](const char* name, auto op, double lo, double hi) {
        Tensor a = random_tensor({3, 4}, st, lo, hi);
        Tensor w = random_tensor({3, 4}, st, -1.0, 1.0, false);
        add(name, {a}, [=] { return weigh(op(a), w); });
    };
    unary("sqrt", [](const Tensor& x) { return nd::sqrt(x); }, 0.2, 2.0);
    unary("square", [](const Tensor& x) { return nd::square(x); }, -2.0, 2.0);
    unary("abs", [](const Tensor& x) { return nd::abs(x); }, 0.1, 2.0);
    unary("clamp", [](const Tensor& x) { return nd::clamp(x, -1.5, 1.5); }, -1.2, 1.2);
    unary("arccos", [](const Tensor& x) { return nd::arccos(x); }, -0.9, 0.9);
    unary("gelu", [](const Tensor& x) { return nd::gelu(x); }, -2.0, 2.0);

    {
        Tensor a = random_tensor({3, 4}, st, -2.0, 2.0);
        add("sum", {a}, [=] { return nd::sum(a); });
    }
    {
        Tensor a = random_tensor({3, 4}, st, -2.0, 2.0);
        add("mean", {a}, [=] { return nd::mean(a); });
    }
    {
        Tensor a = random_tensor({3, 4}, st, 0.5, 2.0);
        Tensor w = random_tensor({3}, st, -1.0, 1.0, false);
        add("l2norm", {a}, [=] { return weigh(nd::l2norm_rows(a), w); });
    }
    {
        Tensor a = random_tensor({3, 4}, st, -2.0, 2.0);
        Tensor b = random_tensor({3, 4}, st, -2.0, 2.0);
        Tensor w = random_tensor({3}, st, -1.0, 1.0, false);
        add("dot", {a, b}, [=] { return weigh(nd::dot_rows(a, b), w); });
    }
    {
        Tensor a = random_tensor({3, 5}, st, -2.0, 2.0);
        Tensor w = random_tensor({3, 5}, st, -1.0, 1.0, false);
        add("softmax", {a}, [=] { return weigh(nd::softmax(a), w); });
    }
    {
        Tensor x = random_tensor({4, 6}, st, -2.0, 2.0);
        Tensor g = random_tensor({6}, st, 0.5, 1.5);
        Tensor b = random_tensor({6}, st, -0.5, 0.5);
        Tensor w = random_tensor({4, 6}, st, -1.0, 1.0, false);
        add("layernorm", {x, g, b}, [=] { return weigh(nd::layernorm(x, g, b), w); });
    }
    {
        Tensor logits = random_tensor({5, 3}, st, -2.0, 2.0);
        std::vector<index_t> labels{0, 2, 1, 2, 0};
        add("cross_entropy", {logits}, [=] { return nd::cross_entropy(logits, labels); });
    }
    return out;
}

// Tiny but complete model so the end-to-end check exercises every layer type
// and all three loss terms jointly.
model::ModelConfig tiny_config() {
    model::ModelConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.bands = 3;
    cfg.embed_dim = 16;
    cfg.decoder_dim = 8;
    cfg.heads = 2;
    cfg.encoder_depth = 1;
    cfg.decoder_depth = 1;
    cfg.mask_ratio = 0.5;
    cfg.endmember_count = 3;
    cfg.mlp_ratio = 2.0;
    return cfg;
}

}  // namespace

Report run_suite(std::uint64_t seed, double step) {
    Report report;
    for (auto& sc : build_scenarios(seed))
        report.ops.push_back({sc.name, check_scalar_fn(sc.fn, sc.leaves, step)});

    model::ModelConfig cfg = tiny_config();
    model::ParamStore params = model::init_params(cfg, rng::derive_key(seed, "gradcheck_model"));
    rng::Stream st(rng::derive_key(seed, "gradcheck_data"));
    synth::HyperCube cube = synth::HyperCube::zeros(cfg.image_size, cfg.image_size, cfg.bands);
    for (auto& v : cube.values) v = static_cast<float>(st.next_unit());
    Tensor tokens = model::patchify(cube, cfg.patch_size);
    model::MaskPlan plan = model::make_mask(cfg.token_count(), cfg.mask_ratio, seed, 0);

    objective::LossTargets targets;
    targets.token_pixels = tokens;
    targets.token_spectra = model::token_mean_spectra(tokens, cfg.bands);
    objective::LossWeights weights;
    weights.lambda1 = 1.0;
    weights.lambda2 = 1.0;
    weights.lambda3 = 1.0;
    objective::LossScope scope;

    std::vector<Tensor> leaves;
    for (const auto& name : params.names)
        if (params.at(name).requires_grad()) leaves.push_back(params.at(name));
    auto fn = [&]() {
        auto fwd = model::forward(tokens, plan, params, cfg);
        return objective::total_loss(fwd, targets, weights, scope, plan).total;
    };
    report.end_to_end = check_scalar_fn(fn, leaves, step);
    return report;
}

}  // namespace karma::gradcheck
