#include <benchmark/benchmark.h>

#include "nnformer/attention.hpp"
#include "nnformer/metrics.hpp"
#include "nnformer/ops.hpp"
#include "nnformer/rng.hpp"

using namespace nnformer;

namespace {

Tensor<float> random(Shape shape, CounterRng& rng) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

void BM_Matmul(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  CounterRng rng(1);
  const auto a = random(Shape{n, n}, rng);
  const auto b = random(Shape{n, n}, rng);
  for (auto _ : state) {
    Tape<float> tape(Tape<float>::Mode::kInference);
    benchmark::DoNotOptimize(ops::matmul(tape, a, b));
  }
  state.SetItemsProcessed(state.iterations() * n * n * n);
}
BENCHMARK(BM_Matmul)->Arg(64)->Arg(128)->Arg(256);

void BM_Conv3d(benchmark::State& state) {
  const std::int64_t c = state.range(0);
  CounterRng rng(2);
  const auto x = random(Shape{1, c, 16, 16, 16}, rng);
  const auto w = random(Shape{c, c, 3, 3, 3}, rng);
  const auto b = random(Shape{c}, rng);
  for (auto _ : state) {
    Tape<float> tape(Tape<float>::Mode::kInference);
    benchmark::DoNotOptimize(ops::conv3d(tape, x, w, b, {.stride = {1, 1, 1}, .padding = {1, 1, 1}}));
  }
}
BENCHMARK(BM_Conv3d)->Arg(8)->Arg(16);

void BM_LocalAttention(benchmark::State& state) {
  const std::int64_t c = 32;
  const std::int64_t g = state.range(0);
  CounterRng rng(3);
  const auto p = attention::init_attention<float>(c, 2, {4, 4, 4}, rng);
  const auto x = random(Shape{1, c, g, g, g}, rng);
  for (auto _ : state) {
    Tape<float> tape(Tape<float>::Mode::kInference);
    benchmark::DoNotOptimize(attention::lv_msa(tape, x, p, attention::PartitionSpec{{4, 4, 4}, {0, 0, 0}}));
  }
}
BENCHMARK(BM_LocalAttention)->Arg(8)->Arg(16);

void BM_ShiftedAttention(benchmark::State& state) {
  const std::int64_t c = 32;
  const std::int64_t g = state.range(0);
  CounterRng rng(4);
  const auto p = attention::init_attention<float>(c, 2, {4, 4, 4}, rng);
  const auto x = random(Shape{1, c, g, g, g}, rng);
  for (auto _ : state) {
    Tape<float> tape(Tape<float>::Mode::kInference);
    benchmark::DoNotOptimize(attention::slv_msa(tape, x, p, attention::PartitionSpec{{4, 4, 4}, {2, 2, 2}}));
  }
}
BENCHMARK(BM_ShiftedAttention)->Arg(8)->Arg(16);

void BM_GlobalAttention(benchmark::State& state) {
  const std::int64_t c = 32;
  const std::int64_t g = state.range(0);
  CounterRng rng(5);
  const auto p = attention::init_attention<float>(c, 2, {g, g, g}, rng);
  const auto x = random(Shape{1, c, g, g, g}, rng);
  for (auto _ : state) {
    Tape<float> tape(Tape<float>::Mode::kInference);
    benchmark::DoNotOptimize(attention::gv_msa(tape, x, p));
  }
}
BENCHMARK(BM_GlobalAttention)->Arg(4)->Arg(8);

void BM_Hd95(benchmark::State& state) {
  const std::int64_t n = state.range(0);
  const Extent3 e{n, n, n / 2};
  metrics::BinaryMask a{e, std::vector<std::uint8_t>(static_cast<std::size_t>(e[0] * e[1] * e[2]))};
  metrics::BinaryMask b = a;
  for (std::int64_t x = 0; x < e[0]; ++x) {
    for (std::int64_t y = 0; y < e[1]; ++y) {
      for (std::int64_t z = 0; z < e[2]; ++z) {
        const auto i = static_cast<std::size_t>((x * e[1] + y) * e[2] + z);
        const double dx = x - n / 2.0, dy = y - n / 2.0, dz = z - n / 4.0;
        a.voxels[i] = dx * dx + dy * dy + 4 * dz * dz < n * n / 9.0;
        b.voxels[i] = (dx - 2) * (dx - 2) + dy * dy + 4 * dz * dz < n * n / 10.0;
      }
    }
  }
  for (auto _ : state) benchmark::DoNotOptimize(metrics::hd95(a, b, {1.0, 1.0, 2.0}));
}
BENCHMARK(BM_Hd95)->Arg(32)->Arg(64);

}  // namespace
