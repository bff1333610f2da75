#include "nnformer/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "nnformer/errors.hpp"

namespace nnformer {

std::int64_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::string to_string(const Extent3& e) {
  std::ostringstream os;
  os << e[0] << 'x' << e[1] << 'x' << e[2];
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : storage_(std::make_shared<TensorStorage<T>>()) {
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  storage_->data.assign(static_cast<std::size_t>(nnformer::numel(shape)), fill);
  storage_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : storage_(std::make_shared<TensorStorage<T>>()) {
  for (auto d : shape) {
    if (d <= 0) throw DimensionError("tensor extents must be positive, got " + to_string(shape));
  }
  if (nnformer::numel(shape) != static_cast<std::int64_t>(values.size())) {
    throw DimensionError("shape " + to_string(shape) + " does not hold " + std::to_string(values.size()) +
                         " values");
  }
  storage_->shape = std::move(shape);
  storage_->data = std::move(values);
}

template <typename T>
std::int64_t Tensor<T>::dim(std::int64_t axis) const {
  const auto r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis out of range for shape " + to_string(shape()));
  return storage_->shape[static_cast<std::size_t>(axis)];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw UsageError("item() on tensor of shape " + to_string(shape()));
  return storage_->data[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(storage_->shape, storage_->data);
  out.storage_->requires_grad = storage_->requires_grad;
  return out;
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(storage_->data.begin(), storage_->data.end(), [](T v) { return std::isfinite(v); });
}

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> values(t.data().begin(), t.data().end());
  Tensor<To> out(t.shape(), std::move(values));
  out.set_requires_grad(t.requires_grad());
  return out;
}

template class Tensor<float>;
template class Tensor<double>;
template Tensor<float> cast<float, double>(const Tensor<double>&);
template Tensor<double> cast<double, float>(const Tensor<float>&);
template Tensor<float> cast<float, float>(const Tensor<float>&);
template Tensor<double> cast<double, double>(const Tensor<double>&);

}  // namespace nnformer
