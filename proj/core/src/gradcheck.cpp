#include "nnformer/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "nnformer/ops.hpp"
#include "nnformer/rng.hpp"

namespace nnformer {

GradCheckReport gradcheck(std::string op_name, const GradFunction& fn, std::span<const Tensor<double>> inputs,
                          const GradCheckOptions& options) {
  std::vector<Tensor<double>> handles(inputs.begin(), inputs.end());
  std::vector<bool> had_grad_flag;
  for (auto& h : handles) {
    had_grad_flag.push_back(h.requires_grad());
    h.zero_grad();
    h.set_requires_grad(true);
  }

  CounterRng rng(options.seed);
  Tensor<double> weights;
  auto objective = [&](Tape<double>& tape) {
    Tensor<double> out = fn(tape, handles);
    if (!weights.defined()) {
      weights = Tensor<double>(out.shape(), 1.0);
      if (out.numel() > 1) {
        double norm = 0.0;
        for (double& w : weights.mutable_data()) {
          w = rng.normal();
          norm += w * w;
        }
        norm = std::sqrt(norm);
        for (double& w : weights.mutable_data()) w /= norm;
      }
    }
    return ops::sum(tape, ops::mul(tape, out, weights));
  };

  std::vector<std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = objective(tape);
    tape.backward(loss);
    for (const auto& h : handles) {
      if (h.has_grad()) {
        analytic.emplace_back(h.grad().begin(), h.grad().end());
      } else {
        analytic.emplace_back(static_cast<std::size_t>(h.numel()), 0.0);
      }
    }
  }

  std::vector<std::pair<std::size_t, std::int64_t>> probes;
  for (std::size_t t = 0; t < handles.size(); ++t) {
    for (std::int64_t i = 0; i < handles[t].numel(); ++i) probes.emplace_back(t, i);
  }
  if (options.max_probes > 0 && probes.size() > options.max_probes) {
    // Partial Fisher-Yates with the checker's own stream.
    CounterRng pick = rng.split(0x5052);
    for (std::size_t i = 0; i < options.max_probes; ++i) {
      const auto j = static_cast<std::size_t>(
          pick.uniform_int(static_cast<std::int64_t>(i), static_cast<std::int64_t>(probes.size() - 1)));
      std::swap(probes[i], probes[j]);
    }
    probes.resize(options.max_probes);
  }

  auto evaluate = [&] {
    Tape<double> tape(Tape<double>::Mode::kInference);
    return objective(tape).item();
  };

  GradCheckReport report;
  report.op_name = std::move(op_name);
  report.tolerance = options.tolerance;
  report.probes = probes.size();
  const double h = options.step;
  for (const auto& [t, i] : probes) {
    auto data = handles[t].mutable_data();
    const double saved = data[static_cast<std::size_t>(i)];
    auto at = [&](double offset) {
      data[static_cast<std::size_t>(i)] = saved + offset;
      return evaluate();
    };
    // Five-point central stencil.
    const double numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
    data[static_cast<std::size_t>(i)] = saved;
    const double a = analytic[t][static_cast<std::size_t>(i)] + options.analytic_bias;
    const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
    const double rel = std::abs(a - numeric) / denom;
    report.max_rel_error = std::isnan(rel) ? INFINITY : std::max(report.max_rel_error, rel);
  }
  report.passed = report.max_rel_error <= report.tolerance;

  for (std::size_t t = 0; t < handles.size(); ++t) {
    handles[t].zero_grad();
    handles[t].set_requires_grad(had_grad_flag[t]);
  }
  return report;
}

}  // namespace nnformer
