#pragma once

#include <cstdint>

namespace nnformer {

// Counter-based generator: output i is a keyed hash of i, so streams can be
// split without sharing state and replayed from (key, counter).
class CounterRng {
 public:
  explicit CounterRng(std::uint64_t key, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  std::uint64_t next_u64();
  // Uniform on [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer on [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  double normal();
  // Normal(0, stddev) resampled until it falls inside +-bound * stddev.
  double truncated_normal(double stddev, double bound = 2.0);
  bool bernoulli(double p) { return uniform() < p; }

  // Independent child stream identified by `stream`.
  CounterRng split(std::uint64_t stream) const;

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x);

}  // namespace nnformer
