#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "nnformer/tensor.hpp"

namespace nnformer {

// Buckets for multiply-accumulate accounting. kProjection covers the
// token-wise linear maps inside attention (Q/K/V/output and the skip
// attention key-value projection); kAttention covers the two batched
// products QK^T and AV; kOther holds every remaining matrix product (MLP
// layers, deep-supervision heads).
enum class MacClass : std::uint8_t { kProjection = 0, kAttention = 1, kConvolution = 2, kOther = 3 };

inline constexpr std::size_t kMacClassCount = 4;

std::string_view to_string(MacClass cls);

using MacCounts = std::array<std::uint64_t, kMacClassCount>;

// One multiply-accumulate is one MAC and two counted operations.
struct MacReport {
  MacCounts macs{};
  std::map<std::string, MacCounts> by_scope;

  std::uint64_t macs_of(MacClass cls) const { return macs[static_cast<std::size_t>(cls)]; }
  std::uint64_t ops_of(MacClass cls) const { return 2 * macs_of(cls); }
  std::uint64_t total_macs() const;
  std::uint64_t total_ops() const { return 2 * total_macs(); }
  // Projection + attention MACs for scopes whose label starts with `prefix`.
  std::uint64_t attention_macs(std::string_view prefix = {}) const;

  bool operator==(const MacReport&) const = default;
};

// Records differentiable operations in execution order and replays their
// adjoints in reverse. A tape in inference mode records nothing but still
// accumulates MAC counts.
template <typename T>
class Tape {
 public:
  enum class Mode { kTrain, kInference };

  explicit Tape(Mode mode = Mode::kTrain) : mode_(mode) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return mode_ == Mode::kTrain; }

  // True if an op over `inputs` must be recorded.
  template <typename... Ts>
  bool needs_grad(const Ts&... inputs) const {
    return recording() && ((inputs.defined() && inputs.requires_grad()) || ...);
  }

  void push(std::string_view op, std::shared_ptr<TensorStorage<T>> output,
            std::function<void()> adjoint);

  void count(MacClass cls, std::uint64_t macs);

  // Seeds d(loss)/d(loss) = 1 and runs every recorded adjoint once, last
  // first. Throws UsageError unless `loss` holds exactly one element.
  void backward(const Tensor<T>& loss);

  std::size_t size() const { return nodes_.size(); }
  std::string_view op_name(std::size_t i) const { return nodes_[i].op; }
  const MacReport& mac_report() const { return report_; }

  // Drops recorded nodes (and the intermediates they keep alive) and resets
  // MAC accounting.
  void clear();

  class ScopeGuard {
   public:
    ScopeGuard(Tape& tape, std::string label);
    ~ScopeGuard();
    ScopeGuard(const ScopeGuard&) = delete;
    ScopeGuard& operator=(const ScopeGuard&) = delete;

   private:
    Tape& tape_;
  };

  // Labels MAC counts made while the guard lives; nested labels join with '/'.
  [[nodiscard]] ScopeGuard scope(std::string label) { return ScopeGuard(*this, std::move(label)); }

 private:
  struct Node {
    std::string op;
    std::shared_ptr<TensorStorage<T>> output;
    std::function<void()> adjoint;
  };

  Mode mode_;
  std::vector<Node> nodes_;
  MacReport report_;
  std::vector<std::string> scopes_;
  std::string scope_label_;
};

extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace nnformer
