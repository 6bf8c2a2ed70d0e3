#include <benchmark/benchmark.h>

#include "karma/metrics.hpp"
#include "karma/rng.hpp"
#include "karma/synthgen.hpp"

namespace {

karma::synth::HyperCube noisy_cube(std::int64_t side, std::int64_t bands, std::uint64_t key) {
    auto cube = karma::synth::HyperCube::zeros(side, side, bands);
    karma::rng::Stream st(key);
    for (auto& v : cube.values) v = static_cast<float>(st.next_unit());
    return cube;
}

void BM_Ssim(benchmark::State& state) {
    auto a = noisy_cube(state.range(0), 16, 1);
    auto b = noisy_cube(state.range(0), 16, 2);
    for (auto _ : state) {
        auto r = karma::metrics::ssim(a, b, 1.0);
        benchmark::DoNotOptimize(r.avg);
    }
}
BENCHMARK(BM_Ssim)->Arg(32)->Arg(64);

void BM_FclsOracle(benchmark::State& state) {
    auto em = karma::synth::sample_endmembers(16, state.range(0), 5);
    std::vector<double> mixture(16, 0.0);
    for (std::int64_t c = 0; c < 16; ++c)
        for (std::int64_t m = 0; m < em.count; ++m)
            mixture[static_cast<std::size_t>(c)] += em.at(c, m) / static_cast<double>(em.count);
    for (auto _ : state) {
        auto r = karma::metrics::fcls_oracle(mixture, em, 500);
        benchmark::DoNotOptimize(r.objective);
    }
}
BENCHMARK(BM_FclsOracle)->Arg(3)->Arg(4)->Arg(8);

}  // namespace
