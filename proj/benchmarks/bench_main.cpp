#include <benchmark/benchmark.h>

#include "modelmix/metrics.hpp"
#include "modelmix/mixer.hpp"
#include "modelmix/ops.hpp"
#include "modelmix/rng.hpp"
#include "modelmix/synthtasks.hpp"
#include "modelmix/trainer.hpp"
#include "modelmix/unet.hpp"

using namespace modelmix;

namespace {

Tensor4<float> random_tensor(Shape4 s, SeededRng& rng) {
  Tensor4<float> t(s);
  for (float& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

void BM_Conv3x3Forward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  SeededRng rng(1);
  const auto x = Var<float>::leaf(random_tensor({8, c, hw, hw}, rng));
  const auto k = Var<float>::leaf(random_tensor({c, c, 3, 3}, rng));
  const auto b = Var<float>::leaf(random_tensor({1, c, 1, 1}, rng));
  for (auto _ : state) {
    Var<float> y = conv2d(x, k, b, 1, 1);
    benchmark::DoNotOptimize(y.value().data().data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(8 * c * c * 9 * hw * hw));
}
BENCHMARK(BM_Conv3x3Forward)->Args({8, 64})->Args({16, 32})->Args({32, 16})->Unit(benchmark::kMicrosecond);

void BM_Conv3x3Backward(benchmark::State& state) {
  const auto c = static_cast<std::size_t>(state.range(0));
  const auto hw = static_cast<std::size_t>(state.range(1));
  SeededRng rng(2);
  const Tensor4<float> xv = random_tensor({8, c, hw, hw}, rng), kv = random_tensor({c, c, 3, 3}, rng);
  const Tensor4<float> bv = random_tensor({1, c, 1, 1}, rng), w = random_tensor({8, c, hw, hw}, rng);
  for (auto _ : state) {
    auto x = Var<float>::leaf(xv, true), k = Var<float>::leaf(kv, true), b = Var<float>::leaf(bv, true);
    backward(weighted_sum(conv2d(x, k, b, 1, 1), w));
    benchmark::DoNotOptimize(k.has_grad());
  }
}
BENCHMARK(BM_Conv3x3Backward)->Args({8, 64})->Args({16, 32})->Unit(benchmark::kMicrosecond);

void BM_UNetTrainPass(benchmark::State& state) {
  UNetConfig cfg;
  cfg.base_channels = static_cast<int>(state.range(0));
  cfg.num_classes = 3;
  SeededRng rng(3);
  const SegModel<float> model(cfg, "bench", rng);
  const auto x = Var<float>::leaf(random_tensor({8, 1, 64, 64}, rng));
  const Tensor4<float> w = random_tensor({8, 3, 64, 64}, rng);
  for (auto _ : state) {
    SeededRng drop(4);
    backward(weighted_sum(model.forward(x, true, drop), w));
  }
}
BENCHMARK(BM_UNetTrainPass)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

void BM_UNetPredict(benchmark::State& state) {
  UNetConfig cfg;
  cfg.num_classes = 3;
  SeededRng rng(5);
  const SegModel<float> model(cfg, "bench", rng);
  const Tensor4<float> x = random_tensor({8, 1, 64, 64}, rng);
  for (auto _ : state) benchmark::DoNotOptimize(model.predict(x).data().data());
}
BENCHMARK(BM_UNetPredict)->Unit(benchmark::kMillisecond);

void BM_VirtualEncoderForward(benchmark::State& state) {
  UNetConfig cfg;
  cfg.num_classes = 3;
  SeededRng rng(6);
  const SegModel<float> a(cfg, "a", rng), b(cfg, "b", rng);
  const auto layers = a.enumerate_encoder_layers();
  const VirtualEncoder<float> venc(a, b, MixPlan{"a", "b", {layers[2]}, 0.3});
  const auto x = Var<float>::leaf(random_tensor({8, 1, 64, 64}, rng));
  for (auto _ : state) {
    SeededRng drop(7);
    benchmark::DoNotOptimize(venc.forward(x, true, drop).value().data().data());
  }
}
BENCHMARK(BM_VirtualEncoderForward)->Unit(benchmark::kMillisecond);

void BM_Hausdorff(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  SeededRng rng(8);
  Mask a(n, n, 0), b(n, n, 0);
  for (std::size_t p = 0; p < n * n; ++p) {
    a.data[p] = rng.bernoulli(0.1);
    b.data[p] = rng.bernoulli(0.1);
  }
  for (auto _ : state) benchmark::DoNotOptimize(hausdorff(a, b));
}
BENCHMARK(BM_Hausdorff)->Arg(32)->Arg(64)->Arg(256)->Unit(benchmark::kMicrosecond);

void BM_TrainStepVariant4(benchmark::State& state) {
  SynthConfig sc;
  auto [s, p] = generate_task_pair(7, sc);
  TrainConfig cfg;
  cfg.variant = 4;
  cfg.unet.base_channels = static_cast<int>(state.range(0));
  ModelMixTrainer trainer(cfg, s, p);
  Batch bs, bp;
  for (std::size_t k = 0; k < cfg.batch_size; ++k) {
    bs.push_back(&s.items[k]);
    bp.push_back(&p.items[k]);
  }
  SeededRng rng(9);
  for (auto _ : state) benchmark::DoNotOptimize(trainer.train_step(bs, bp, rng).breakdown.total);
}
BENCHMARK(BM_TrainStepVariant4)->Arg(4)->Arg(8)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
