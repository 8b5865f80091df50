#include <benchmark/benchmark.h>

#include "layerforge/numkernel.hpp"
#include "layerforge/rng.hpp"

using namespace layerforge;

static void BM_Matmul(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(1);
    Tensor a = rng_normal(rng, {n, n}, 0, 1);
    Tensor b = rng_normal(rng, {n, n}, 0, 1);
    for (auto _ : state) {
        Tensor c = numkernel::matmul(a, b);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

static void BM_MatmulNT(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(2);
    Tensor a = rng_normal(rng, {n, n}, 0, 1);
    Tensor b = rng_normal(rng, {n, n}, 0, 1);
    for (auto _ : state) {
        Tensor c = numkernel::matmul_nt(a, b);
        benchmark::DoNotOptimize(c.data());
    }
    state.SetItemsProcessed(state.iterations() * 2 * n * n * n);
}
BENCHMARK(BM_MatmulNT)->Arg(64)->Arg(128)->Arg(256);

static void BM_SvdThin(benchmark::State& state) {
    const int64_t d1 = state.range(0);
    const int64_t m = state.range(1);
    Rng rng(3);
    Tensor w = rng_normal(rng, {d1, m}, 0, 1);
    for (auto _ : state) {
        auto svd = numkernel::svd_thin(w);
        benchmark::DoNotOptimize(svd.sigma.data());
    }
}
BENCHMARK(BM_SvdThin)->Args({64, 768})->Args({192, 768})->Args({64, 2304});

static void BM_AdamWStep(benchmark::State& state) {
    const int64_t n = state.range(0);
    Rng rng(4);
    Tensor param = rng_normal(rng, {n}, 0, 0.1);
    Tensor grad = rng_normal(rng, {n}, 0, 0.01);
    auto st = numkernel::make_adamw_state({n});
    numkernel::AdamWConfig cfg;
    for (auto _ : state) {
        numkernel::adamw_step(param, grad, st, cfg);
        benchmark::DoNotOptimize(param.data());
    }
    state.SetItemsProcessed(state.iterations() * n);
}
BENCHMARK(BM_AdamWStep)->Arg(1 << 16);
