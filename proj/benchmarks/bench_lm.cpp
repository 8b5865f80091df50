#include <benchmark/benchmark.h>

#include "layerforge/checkpoint.hpp"
#include "layerforge/lm.hpp"
#include "layerforge/predictor.hpp"
#include "layerforge/rng.hpp"
#include "layerforge/svdspace.hpp"

using namespace layerforge;

namespace {

checkpoint::TransformerCheckpoint bench_model() {
    checkpoint::ModelConfig cfg;
    cfg.n_layers = 12;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.d_ff = 192;
    cfg.vocab_size = 258;
    cfg.max_seq_len = 256;
    Rng rng(7);
    return checkpoint::random_checkpoint(cfg, rng, 0.02);
}

lm::TokenBatch bench_batch(int64_t batch, int64_t seq) {
    Rng rng(8);
    lm::TokenBatch b;
    b.batch = batch;
    b.seq = seq;
    b.tokens.resize(static_cast<size_t>(batch * seq));
    for (auto& t : b.tokens) t = static_cast<int32_t>(rng.bounded(258));
    return b;
}

}  // namespace

static void BM_LmForward(benchmark::State& state) {
    auto model = bench_model();
    auto params = lm::ModelParams<float>::from_checkpoint(model);
    auto batch = bench_batch(8, 128);
    lm::ForwardCache<float> cache;
    for (auto _ : state) {
        lm::forward(params, batch, cache);
        benchmark::DoNotOptimize(cache.logits.data());
    }
    state.SetItemsProcessed(state.iterations() * batch.batch * batch.seq);
}
BENCHMARK(BM_LmForward);

static void BM_LmTrainStep(benchmark::State& state) {
    auto model = bench_model();
    auto params = lm::ModelParams<float>::from_checkpoint(model);
    auto grads = lm::ModelParams<float>::zeros_like(params);
    auto batch = bench_batch(8, 128);
    lm::ForwardCache<float> cache;
    for (auto _ : state) {
        grads.for_each_param([](const std::string&, std::vector<float>& g, int64_t) {
            std::fill(g.begin(), g.end(), 0.0f);
        });
        const double loss = lm::loss_and_backward(params, batch, cache, grads);
        benchmark::DoNotOptimize(loss);
    }
    state.SetItemsProcessed(state.iterations() * batch.batch * batch.seq);
}
BENCHMARK(BM_LmTrainStep);

static void BM_PredictorEpoch(benchmark::State& state) {
    auto model = bench_model();
    auto space = svdspace::decompose_family(model, checkpoint::MatrixFamily::q_proj);
    auto ds = predictor::build_triplets(space);
    predictor::PredictorTrainConfig cfg;
    cfg.epochs = 1;
    for (auto _ : state) {
        auto trained =
            predictor::train_predictor(checkpoint::MatrixFamily::q_proj, ds, cfg, 256);
        benchmark::DoNotOptimize(trained.net.w3.data());
    }
}
BENCHMARK(BM_PredictorEpoch);

static void BM_SpaceDecompose(benchmark::State& state) {
    auto model = bench_model();
    for (auto _ : state) {
        auto space = svdspace::decompose_family(model, checkpoint::MatrixFamily::gate_proj);
        benchmark::DoNotOptimize(space.sigma.data());
    }
}
BENCHMARK(BM_SpaceDecompose);

BENCHMARK_MAIN();
