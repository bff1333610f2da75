#include "nnformer/tape.hpp"

#include <numeric>

#include "nnformer/errors.hpp"

namespace nnformer {

std::string_view to_string(MacClass cls) {
  switch (cls) {
    case MacClass::kProjection:
      return "projection";
    case MacClass::kAttention:
      return "attention";
    case MacClass::kConvolution:
      return "convolution";
    case MacClass::kOther:
      return "other";
  }
  return "?";
}

std::uint64_t MacReport::total_macs() const { return std::accumulate(macs.begin(), macs.end(), std::uint64_t{0}); }

std::uint64_t MacReport::attention_macs(std::string_view prefix) const {
  if (prefix.empty()) return macs_of(MacClass::kProjection) + macs_of(MacClass::kAttention);
  std::uint64_t total = 0;
  for (const auto& [label, counts] : by_scope) {
    if (label.starts_with(prefix)) {
      total += counts[static_cast<std::size_t>(MacClass::kProjection)] +
               counts[static_cast<std::size_t>(MacClass::kAttention)];
    }
  }
  return total;
}

template <typename T>
void Tape<T>::push(std::string_view op, std::shared_ptr<TensorStorage<T>> output, std::function<void()> adjoint) {
  nodes_.push_back(Node{std::string(op), std::move(output), std::move(adjoint)});
}

template <typename T>
void Tape<T>::count(MacClass cls, std::uint64_t macs) {
  report_.macs[static_cast<std::size_t>(cls)] += macs;
  report_.by_scope[scope_label_][static_cast<std::size_t>(cls)] += macs;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw UsageError("backward() needs a scalar loss, got shape " +
                     (loss.defined() ? to_string(loss.shape()) : std::string("<undefined>")));
  }
  auto& storage = *loss.storage();
  storage.grad_buffer()[0] += T(1);
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->adjoint();
  }
}

template <typename T>
void Tape<T>::clear() {
  nodes_.clear();
  report_ = MacReport{};
}

template <typename T>
Tape<T>::ScopeGuard::ScopeGuard(Tape& tape, std::string label) : tape_(tape) {
  tape_.scopes_.push_back(std::move(label));
  tape_.scope_label_.clear();
  for (const auto& s : tape_.scopes_) {
    if (!tape_.scope_label_.empty()) tape_.scope_label_ += '/';
    tape_.scope_label_ += s;
  }
}

template <typename T>
Tape<T>::ScopeGuard::~ScopeGuard() {
  tape_.scopes_.pop_back();
  tape_.scope_label_.clear();
  for (const auto& s : tape_.scopes_) {
    if (!tape_.scope_label_.empty()) tape_.scope_label_ += '/';
    tape_.scope_label_ += s;
  }
}

template class Tape<float>;
template class Tape<double>;

}  // namespace nnformer
