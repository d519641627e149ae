#include <benchmark/benchmark.h>

#include "alora/adapter.hpp"
#include "alora/allocator.hpp"
#include "alora/autodiff.hpp"
#include "alora/ops.hpp"
#include "alora/task.hpp"
#include "alora/transformer.hpp"

namespace {

alora::SuperNetwork make_model() {
    alora::ModelConfig cfg;
    alora::Rng rng(1);
    return alora::build_supernetwork(cfg, 48, rng);
}

alora::Batch make_batch(int64_t n) {
    alora::TaskSpec spec;
    spec.train_size = n;
    spec.val_size = 4;
    spec.test_size = 4;
    return alora::gen_task(spec).train;
}

void bm_forward_loss(benchmark::State& state) {
    alora::set_precision(alora::Precision::f64);
    alora::SuperNetwork model = make_model();
    alora::Batch batch = make_batch(state.range(0));
    alora::NoGradGuard ng;
    for (auto _ : state) {
        benchmark::DoNotOptimize(alora::lm_loss(model, batch).item());
    }
}
BENCHMARK(bm_forward_loss)->Arg(4)->Arg(16);

void bm_backward(benchmark::State& state) {
    alora::set_precision(alora::Precision::f64);
    alora::SuperNetwork model = make_model();
    alora::Batch batch = make_batch(state.range(0));
    std::vector<alora::Tensor> params = model.adapter_params(false);
    for (auto _ : state) {
        alora::Tensor loss = alora::lm_loss(model, batch);
        benchmark::DoNotOptimize(alora::backward(loss, params));
    }
}
BENCHMARK(bm_backward)->Arg(4)->Arg(16);

void bm_importance_scores(benchmark::State& state) {
    alora::set_precision(alora::Precision::f64);
    alora::SuperNetwork model = make_model();
    alora::Batch batch = make_batch(16);
    for (auto _ : state) {
        benchmark::DoNotOptimize(alora::importance_scores(model, batch));
    }
}
BENCHMARK(bm_importance_scores)->Unit(benchmark::kMillisecond);

void bm_adapter_forward(benchmark::State& state) {
    alora::set_precision(alora::Precision::f64);
    alora::Rng rng(3);
    alora::GatedLoraAdapter ad = alora::make_adapter("b", 64, 64, 8, rng);
    alora::Tensor x = alora::Tensor::from(
        {64, 64}, rng.normal_vec(64 * 64, 0.0, 1.0));
    alora::NoGradGuard ng;
    for (auto _ : state) {
        benchmark::DoNotOptimize(alora::adapter_forward(x, ad, nullptr));
    }
}
BENCHMARK(bm_adapter_forward);

}  // namespace

BENCHMARK_MAIN();
