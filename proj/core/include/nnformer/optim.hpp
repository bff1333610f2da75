#pragma once

#include <cstdint>
#include <vector>

#include "nnformer/model.hpp"
#include "nnformer/tensor.hpp"

namespace nnformer::train {

struct OptimizerConfig {
  double initial_lr = 0.01;
  double momentum = 0.99;
  double weight_decay = 3e-5;
  std::int64_t max_epoch = 50;
  std::int64_t iters_per_epoch = 25;
  std::int64_t batch_size = 2;
  // Global gradient-norm clip; 0 disables it.
  double grad_clip = 0.0;

  // Throws ConfigError on a non-positive count or rate.
  void validate() const;
};

// initial_lr * (1 - epoch / max_epoch)^0.9. Throws UsageError outside
// [0, max_epoch].
double poly_lr(std::int64_t epoch, const OptimizerConfig& cfg);

// SGD with heavy-ball momentum and weight decay folded into the velocity:
// v = momentum * v + g + weight_decay * p, p -= lr * v.
template <typename T>
class Sgd {
 public:
  Sgd(std::vector<net::NamedTensor<T>> params, OptimizerConfig cfg);

  // Parameters without a gradient are treated as having a zero gradient.
  // Throws NumericError naming the first parameter with a non-finite
  // gradient, before anything is modified.
  void step(double lr);
  void zero_grad();

  // Global L2 norm of all gradients.
  double grad_norm() const;

  const OptimizerConfig& config() const { return cfg_; }
  const std::vector<net::NamedTensor<T>>& parameters() const { return params_; }
  // Velocity buffers, in parameter order, named after their parameter.
  std::vector<net::NamedTensor<T>>& velocity() { return velocity_; }
  const std::vector<net::NamedTensor<T>>& velocity() const { return velocity_; }

 private:
  std::vector<net::NamedTensor<T>> params_;
  std::vector<net::NamedTensor<T>> velocity_;
  OptimizerConfig cfg_;
};

extern template class Sgd<float>;
extern template class Sgd<double>;

}  // namespace nnformer::train
