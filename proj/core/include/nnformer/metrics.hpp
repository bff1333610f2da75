#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "nnformer/tensor.hpp"

namespace nnformer::metrics {

using Spacing = std::array<double, 3>;

// Integer label grid (H, W, D), row-major, with voxel spacing in mm.
struct SegmentationMask {
  Extent3 extents{};
  std::vector<std::int32_t> labels;
  Spacing spacing{1.0, 1.0, 1.0};

  // Throws DataError on labels outside [0, num_classes) and UsageError on a
  // size mismatch or non-positive spacing.
  void validate(std::int64_t num_classes) const;
};

struct BinaryMask {
  Extent3 extents{};
  std::vector<std::uint8_t> voxels;

  std::int64_t count() const;
};

BinaryMask binarize(const SegmentationMask& mask, std::int32_t cls);

// 2|A and B| / (|A| + |B|); 1 when both are empty.
double dsc(const BinaryMask& a, const BinaryMask& b);

// Foreground voxels with a background 6-neighbour or on the grid boundary.
std::vector<Extent3> surface_voxels(const BinaryMask& mask);

// Distance from every surface voxel of `from` to the nearest surface voxel
// of `to`, in mm.
std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to, const Spacing& spacing);

// Nearest-rank 95th percentile of the pooled directed distances a->b and
// b->a. Empty when either mask is empty.
std::optional<double> hd95(const BinaryMask& a, const BinaryMask& b, const Spacing& spacing);

// Nearest-rank percentile: the ceil(q * n)-th smallest value.
double nearest_rank(std::vector<double> values, double q);

enum class ClassFlag { kOk, kEmptyBoth, kEmptyPrediction, kEmptyReference };
std::string_view to_string(ClassFlag flag);

struct ClassMetrics {
  std::int32_t cls = 0;
  double dsc = 0.0;
  std::optional<double> hd95;
  ClassFlag flag = ClassFlag::kOk;
};

// Foreground classes 1..K-1. The DSC mean skips classes absent from both
// masks; the HD95 mean skips every flagged class.
struct MetricReport {
  std::vector<ClassMetrics> classes;
  std::optional<double> mean_dsc;
  std::optional<double> mean_hd95;
};

MetricReport evaluate(const SegmentationMask& pred, const SegmentationMask& gt, std::int64_t num_classes);

// Per-class means over several reports of the same class layout. A class is
// flagged only when every report flags it for the same reason.
MetricReport average_reports(const std::vector<MetricReport>& reports);

// Columns: class, dsc, hd95, flag, then an `avg` row.
std::string format_report(const MetricReport& report);

// probs: [K, H, W, D] or [1, K, H, W, D]. Ties go to the lowest class.
SegmentationMask argmax_mask(const Tensor<float>& probs, const Spacing& spacing = {1.0, 1.0, 1.0});

// Argmax of the voxelwise mean of two probability maps.
SegmentationMask nn_avg(const Tensor<float>& probs_a, const Tensor<float>& probs_b,
                        const Spacing& spacing = {1.0, 1.0, 1.0});

}  // namespace nnformer::metrics
