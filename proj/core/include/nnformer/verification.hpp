#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nnformer/config.hpp"
#include "nnformer/gradcheck.hpp"
#include "nnformer/model.hpp"
#include "nnformer/tape.hpp"

// Self-checks shared by the command-line tool and the acceptance suite.
namespace nnformer::verify {

inline constexpr double kOpTolerance = 1e-4;
inline constexpr double kModelTolerance = 1e-3;
inline constexpr std::size_t kModelProbes = 1500;

struct SuiteOptions {
  std::uint64_t seed = 0;
  // Forwarded to every gradcheck; a nonzero value must make the suite fail.
  double analytic_bias = 0.0;
  bool include_model = true;
};

// Tensor ops, attention operators, losses and (optionally) the end-to-end
// micro model, each on inputs drawn from `seed`.
std::vector<GradCheckReport> gradcheck_suite(const SuiteOptions& options);
bool all_passed(const std::vector<GradCheckReport>& reports);
std::string format_gradcheck_table(const std::vector<GradCheckReport>& reports);

std::string format_stage_table(const std::vector<net::StageShape>& stages);

struct ComplexityRow {
  std::string scope;  // e.g. "decoder1/skip"
  std::string kind;   // lv, gv or skip
  Extent3 padded{};
  std::int64_t channels = 0;
  Extent3 volume{};
  std::uint64_t analytic = 0;
  std::uint64_t measured = 0;
};

struct ComplexityReport {
  std::vector<ComplexityRow> rows;
  MacReport profile;

  bool matches() const;
};

// One profiled inference forward of a freshly initialized model against the
// closed-form cost of every attention layer.
ComplexityReport complexity_report(const ModelConfig& config);
std::string format_complexity(const ComplexityReport& report);

}  // namespace nnformer::verify
