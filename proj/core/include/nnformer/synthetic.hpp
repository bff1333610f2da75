#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "nnformer/losses.hpp"
#include "nnformer/metrics.hpp"
#include "nnformer/rng.hpp"
#include "nnformer/tensor.hpp"

namespace nnformer::train {

struct SyntheticParams {
  Extent3 crop{32, 32, 16};
  std::int64_t num_classes = 3;
  std::int64_t in_channels = 1;
  // Ellipsoid semi-axes per axis, as fractions of the extent.
  double radius_min = 0.2;
  double radius_max = 0.35;
  // Mean intensity of class k is k * intensity_step (background 0); channel
  // c scales the step by 1 + c / 2.
  double intensity_step = 1.0;
  double noise_sigma = 0.4;
  // Placement attempts per class before the class is left out.
  std::int64_t max_attempts = 64;
  metrics::Spacing spacing{1.0, 1.0, 1.0};

  void validate() const;
};

struct SyntheticScan {
  std::uint64_t seed = 0;
  Extent3 extents{};
  std::int64_t channels = 1;
  std::vector<float> volume;  // [C, H, W, D]
  std::vector<std::int32_t> label;  // [H, W, D]

  metrics::SegmentationMask mask(const metrics::Spacing& spacing) const;
};

// Background 0 plus one axis-aligned ellipsoid per foreground class, placed
// in class order and rejected on overlap with an earlier class; a class that
// finds no room within max_attempts is absent. Deterministic in (seed, params).
SyntheticScan gen_synthetic(std::uint64_t seed, const SyntheticParams& params);

struct AugmentParams {
  double flip_prob = 0.5;
  double noise_sigma = 0.1;
};

// Mirrors volume and label together along each axis with probability
// flip_prob, then adds gaussian noise to the volume.
SyntheticScan augment(const SyntheticScan& scan, CounterRng& rng, const AugmentParams& params = {});

// Reverses one spatial axis (0, 1 or 2) of volume and label.
SyntheticScan mirror(const SyntheticScan& scan, int axis);

// Stacks scans into an [N, C, H, W, D] batch and its labels.
Tensor<float> stack_volumes(const std::vector<SyntheticScan>& scans);
LabelBatch stack_labels(const std::vector<SyntheticScan>& scans);

}  // namespace nnformer::train
