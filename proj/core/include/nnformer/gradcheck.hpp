#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "nnformer/tape.hpp"
#include "nnformer/tensor.hpp"

namespace nnformer {

struct GradCheckReport {
  std::string op_name;
  double max_rel_error = 0.0;
  bool passed = false;
  double tolerance = 0.0;
  std::size_t probes = 0;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  // Probe at most this many elements, drawn without replacement across all
  // inputs; 0 probes every element.
  std::size_t max_probes = 0;
  std::uint64_t seed = 0;
  // Added to every analytic derivative before comparison. Used to prove the
  // checker rejects a wrong gradient.
  double analytic_bias = 0.0;
};

// Builds the function under test on a tape from its (differentiable) inputs.
using GradFunction = std::function<Tensor<double>(Tape<double>&, std::span<const Tensor<double>>)>;

// Compares reverse-mode derivatives of <fn(inputs), r> against five-point
// central differences with step h, where r is a fixed random unit vector (1
// for scalar outputs).
// `inputs` are perturbed in place and restored. Relative error per probed
// element is |a - n| / max(|a|, |n|, 1e-8).
GradCheckReport gradcheck(std::string op_name, const GradFunction& fn, std::span<const Tensor<double>> inputs,
                          const GradCheckOptions& options);

}  // namespace nnformer
