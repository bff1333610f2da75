#pragma once

#include <cstdint>

#include "nnformer/rng.hpp"
#include "nnformer/tape.hpp"
#include "nnformer/tensor.hpp"

namespace nnformer::net {

// Two-layer perceptron applied to the last axis: C -> hidden -> C.
template <typename T>
struct MlpParams {
  Tensor<T> w1;  // [C, hidden]
  Tensor<T> b1;  // [hidden]
  Tensor<T> w2;  // [hidden, C]
  Tensor<T> b2;  // [C]
};

// hidden = round(ratio * channels); weights truncated-normal(0.02), zero biases.
template <typename T>
MlpParams<T> init_mlp(std::int64_t channels, double hidden_ratio, CounterRng& rng);

template <typename T>
Tensor<T> mlp(Tape<T>& tape, const Tensor<T>& x, const MlpParams<T>& params);

// Truncated-normal (sigma 0.02, cut at 2 sigma) matrix used for every linear
// and attention weight.
template <typename T>
Tensor<T> trunc_normal(Shape shape, CounterRng& rng, double stddev = 0.02);

}  // namespace nnformer::net
