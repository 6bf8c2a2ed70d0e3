#include <benchmark/benchmark.h>

#include "karma/model.hpp"
#include "karma/objective.hpp"
#include "karma/rng.hpp"
#include "karma/tensor.hpp"

namespace nd = karma::nd;

namespace {

nd::Tensor random_matrix(nd::index_t r, nd::index_t c, bool rg, std::uint64_t key) {
    karma::rng::Stream st(key);
    std::vector<double> data(static_cast<std::size_t>(r * c));
    for (auto& v : data) v = st.uniform(-1.0, 1.0);
    return nd::Tensor::from_vector({r, c}, std::move(data), rg);
}

void BM_MatmulForward(benchmark::State& state) {
    nd::index_t n = state.range(0);
    auto a = random_matrix(n, n, false, 1);
    auto b = random_matrix(n, n, false, 2);
    for (auto _ : state) {
        auto c = nd::matmul(a, b);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_MatmulForward)->Arg(64)->Arg(128)->Arg(256);

void BM_MatmulBackward(benchmark::State& state) {
    nd::index_t n = state.range(0);
    auto a = random_matrix(n, n, true, 1);
    auto b = random_matrix(n, n, true, 2);
    for (auto _ : state) {
        auto loss = nd::mean(nd::matmul(a, b));
        a.zero_grad();
        b.zero_grad();
        nd::backward(loss);
        benchmark::DoNotOptimize(a.grad().data());
    }
}
BENCHMARK(BM_MatmulBackward)->Arg(64)->Arg(128);

void BM_ForwardBackwardStep(benchmark::State& state) {
    karma::model::ModelConfig cfg;
    cfg.image_size = 32;
    cfg.patch_size = 8;
    cfg.bands = 16;
    cfg.embed_dim = 64;
    cfg.decoder_dim = 32;
    cfg.heads = 8;
    cfg.encoder_depth = 2;
    cfg.decoder_depth = 1;
    cfg.endmember_count = 4;
    auto params = karma::model::init_params(cfg, 1);
    karma::synth::HyperCube cube = karma::synth::HyperCube::zeros(32, 32, 16);
    karma::rng::Stream st(3);
    for (auto& v : cube.values) v = static_cast<float>(st.next_unit());
    auto tokens = karma::model::patchify(cube, cfg.patch_size);
    auto plan = karma::model::make_mask(cfg.token_count(), cfg.mask_ratio, 1, 0);
    karma::objective::LossTargets targets;
    targets.token_pixels = tokens;
    targets.token_spectra = karma::model::token_mean_spectra(tokens, cfg.bands);
    karma::objective::LossWeights weights;
    karma::objective::LossScope scope;

    for (auto _ : state) {
        auto fwd = karma::model::forward(tokens, plan, params, cfg);
        auto rep = karma::objective::total_loss(fwd, targets, weights, scope, plan);
        params.zero_grads();
        nd::backward(rep.total);
        benchmark::DoNotOptimize(rep.total_value);
    }
}
BENCHMARK(BM_ForwardBackwardStep);

}  // namespace

BENCHMARK_MAIN();
