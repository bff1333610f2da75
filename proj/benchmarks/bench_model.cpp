#include <benchmark/benchmark.h>

#include "nnformer/losses.hpp"
#include "nnformer/model.hpp"
#include "nnformer/optim.hpp"
#include "nnformer/synthetic.hpp"
#include "nnformer/trainer.hpp"

using namespace nnformer;

namespace {

void BM_ToyForward(benchmark::State& state) {
  const ModelConfig cfg = preset("toy");
  const net::Model<float> model(cfg, 0);
  const auto scan = train::gen_synthetic(1, train::synthetic_params_for(cfg));
  const Tensor<float> x = train::stack_volumes({scan});
  for (auto _ : state) {
    Tape<float> tape(Tape<float>::Mode::kInference);
    benchmark::DoNotOptimize(model.forward(tape, x));
  }
}
BENCHMARK(BM_ToyForward)->Unit(benchmark::kMillisecond);

void BM_ToyTrainStep(benchmark::State& state) {
  const ModelConfig cfg = preset("toy");
  net::Model<float> model(cfg, 0);
  const auto params = train::synthetic_params_for(cfg);
  const std::vector<train::SyntheticScan> batch{train::gen_synthetic(1, params), train::gen_synthetic(2, params)};
  const Tensor<float> x = train::stack_volumes(batch);
  const train::LabelBatch labels = train::stack_labels(batch);
  train::Sgd<float> sgd(model.parameters(), train::OptimizerConfig{});
  for (auto _ : state) {
    Tape<float> tape;
    const Tensor<float> loss = train::total_loss(tape, model.forward(tape, x), labels);
    sgd.zero_grad();
    tape.backward(loss);
    sgd.step(1e-3);
  }
}
BENCHMARK(BM_ToyTrainStep)->Unit(benchmark::kMillisecond);

}  // namespace
