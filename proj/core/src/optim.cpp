#include "nnformer/optim.hpp"

#include <cmath>
#include <string>

#include "nnformer/errors.hpp"

namespace nnformer::train {

void OptimizerConfig::validate() const {
  if (!(initial_lr > 0.0)) throw ConfigError("optimizer: initial_lr must be positive");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("optimizer: momentum must lie in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ConfigError("optimizer: weight_decay must be non-negative");
  if (max_epoch <= 0) throw ConfigError("optimizer: max_epoch must be positive");
  if (iters_per_epoch <= 0) throw ConfigError("optimizer: iters_per_epoch must be positive");
  if (batch_size <= 0) throw ConfigError("optimizer: batch_size must be positive");
  if (!(grad_clip >= 0.0)) throw ConfigError("optimizer: grad_clip must be non-negative");
}

double poly_lr(std::int64_t epoch, const OptimizerConfig& cfg) {
  if (cfg.max_epoch <= 0) throw UsageError("poly_lr: max_epoch must be positive");
  if (epoch < 0 || epoch > cfg.max_epoch) {
    throw UsageError("poly_lr: epoch " + std::to_string(epoch) + " outside [0, " + std::to_string(cfg.max_epoch) +
                     "]");
  }
  const double frac = 1.0 - static_cast<double>(epoch) / static_cast<double>(cfg.max_epoch);
  return cfg.initial_lr * std::pow(frac, 0.9);
}

template <typename T>
Sgd<T>::Sgd(std::vector<net::NamedTensor<T>> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  cfg_.validate();
  velocity_.reserve(params_.size());
  for (const auto& p : params_) velocity_.push_back({p.name, Tensor<T>(p.tensor.shape())});
}

template <typename T>
double Sgd<T>::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  return std::sqrt(sq);
}

template <typename T>
void Sgd<T>::step(double lr) {
  for (const auto& p : params_) {
    for (T g : p.tensor.grad()) {
      if (!std::isfinite(static_cast<double>(g))) {
        throw NumericError("non-finite gradient in parameter " + p.name);
      }
    }
  }
  double clip = 1.0;
  if (cfg_.grad_clip > 0.0) {
    const double norm = grad_norm();
    if (norm > cfg_.grad_clip) clip = cfg_.grad_clip / norm;
  }
  const T mu = static_cast<T>(cfg_.momentum);
  const T wd = static_cast<T>(cfg_.weight_decay);
  const T rate = static_cast<T>(lr);
  const T c = static_cast<T>(clip);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor<T> param = params_[i].tensor;
    auto p = param.mutable_data();
    auto v = velocity_[i].tensor.mutable_data();
    const auto g = param.grad();
    const bool has = param.has_grad();
    for (std::size_t j = 0; j < p.size(); ++j) {
      const T gj = has ? c * g[j] : T(0);
      v[j] = mu * v[j] + gj + wd * p[j];
      p[j] -= rate * v[j];
    }
  }
}

template <typename T>
void Sgd<T>::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

template class Sgd<float>;
template class Sgd<double>;

}  // namespace nnformer::train
