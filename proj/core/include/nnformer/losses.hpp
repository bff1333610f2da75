#pragma once

#include <cstdint>
#include <vector>

#include "nnformer/model.hpp"
#include "nnformer/tape.hpp"
#include "nnformer/tensor.hpp"

namespace nnformer::train {

// Integer labels for a batch of volumes, laid out [N, H, W, D].
struct LabelBatch {
  std::int64_t batch = 1;
  Extent3 extents{};
  std::vector<std::int32_t> values;
};

// Mean over voxels of -log softmax(logits)[label]. logits: [N, K, H, W, D].
// Throws DataError on a label outside [0, K).
template <typename T>
Tensor<T> ce_loss(Tape<T>& tape, const Tensor<T>& logits, const LabelBatch& labels);

// 1 - mean over classes 1..K-1 of (2 sum(p g) + eps) / (sum(p) + sum(g) + eps),
// sums taken over the whole batch. With K == 1 class 0 is used.
template <typename T>
Tensor<T> dice_loss(Tape<T>& tape, const Tensor<T>& logits, const LabelBatch& labels, double eps = 1e-5);

// Nearest-neighbour resampling: output index i reads input floor(i * in / out).
LabelBatch downsample_labels(const LabelBatch& labels, Extent3 target);

struct DeepSupervisionWeights {
  double full = 4.0 / 7.0;
  double mid = 2.0 / 7.0;
  double low = 1.0 / 7.0;

  // Halving per resolution level, normalised to sum to 1.
  static DeepSupervisionWeights standard();
  // Auxiliary outputs switched off.
  static DeepSupervisionWeights full_resolution_only() { return {1.0, 0.0, 0.0}; }
};

// Sum over the three outputs of weight * (ce + dice) against labels resampled
// to each output's extents. Terms with zero weight are skipped.
template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const net::ModelOutput<T>& outputs, const LabelBatch& labels,
                     const DeepSupervisionWeights& weights = DeepSupervisionWeights::standard());

}  // namespace nnformer::train
