#include "nnformer/mlp.hpp"

#include <cmath>

#include "nnformer/errors.hpp"
#include "nnformer/ops.hpp"

namespace nnformer::net {

template <typename T>
Tensor<T> trunc_normal(Shape shape, CounterRng& rng, double stddev) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(rng.truncated_normal(stddev));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
MlpParams<T> init_mlp(std::int64_t channels, double hidden_ratio, CounterRng& rng) {
  const auto hidden = static_cast<std::int64_t>(std::llround(hidden_ratio * static_cast<double>(channels)));
  if (channels < 1 || hidden < 1) {
    throw ConfigError("mlp: hidden width " + std::to_string(hidden) + " for " + std::to_string(channels) +
                      " channels");
  }
  MlpParams<T> p;
  p.w1 = trunc_normal<T>({channels, hidden}, rng);
  p.b1 = Tensor<T>(Shape{hidden});
  p.b1.set_requires_grad(true);
  p.w2 = trunc_normal<T>({hidden, channels}, rng);
  p.b2 = Tensor<T>(Shape{channels});
  p.b2.set_requires_grad(true);
  return p;
}

template <typename T>
Tensor<T> mlp(Tape<T>& tape, const Tensor<T>& x, const MlpParams<T>& params) {
  auto h = ops::linear(tape, x, params.w1, params.b1, MacClass::kOther);
  h = ops::gelu(tape, h);
  return ops::linear(tape, h, params.w2, params.b2, MacClass::kOther);
}

template Tensor<float> trunc_normal<float>(Shape, CounterRng&, double);
template Tensor<double> trunc_normal<double>(Shape, CounterRng&, double);
template MlpParams<float> init_mlp<float>(std::int64_t, double, CounterRng&);
template MlpParams<double> init_mlp<double>(std::int64_t, double, CounterRng&);
template Tensor<float> mlp<float>(Tape<float>&, const Tensor<float>&, const MlpParams<float>&);
template Tensor<double> mlp<double>(Tape<double>&, const Tensor<double>&, const MlpParams<double>&);

}  // namespace nnformer::net
