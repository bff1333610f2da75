#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace nnformer {

using Shape = std::vector<std::int64_t>;
using Extent3 = std::array<std::int64_t, 3>;

std::int64_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
std::string to_string(const Extent3& e);

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  // Empty until the first gradient contribution arrives.
  std::vector<T> grad;
  bool requires_grad = false;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

// Dense row-major array. Copies share storage; use clone() for a deep copy.
// Feature maps use axis order (N, C, H, W, D) unless a function says
// otherwise.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return storage_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(storage_->shape.size()); }
  std::int64_t dim(std::int64_t axis) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(storage_->data.size()); }

  std::span<const T> data() const { return storage_->data; }
  std::span<T> mutable_data() { return storage_->data; }
  T item() const;
  T at(std::int64_t flat) const { return storage_->data[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const { return storage_->requires_grad; }
  void set_requires_grad(bool on) { storage_->requires_grad = on; }
  bool has_grad() const { return !storage_->grad.empty(); }
  std::span<const T> grad() const { return storage_->grad; }
  std::span<T> mutable_grad() { return storage_->grad_buffer(); }
  void zero_grad() { storage_->grad.clear(); }

  Tensor clone() const;
  bool all_finite() const;

  const std::shared_ptr<TensorStorage<T>>& storage() const { return storage_; }

 private:
  std::shared_ptr<TensorStorage<T>> storage_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace nnformer
