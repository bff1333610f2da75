#pragma once

#include <cstdint>
#include <vector>

#include "nnformer/mlp.hpp"
#include "nnformer/rng.hpp"
#include "nnformer/tape.hpp"
#include "nnformer/tensor.hpp"

// Local, shifted-local, global and skip attention over 3D token grids.
//
// Public entry points take feature maps in (N, C, H, W, D) order. The `_cl`
// variants take channels-last (N, H, W, D, C) maps and are what the network
// blocks call between convolutions.
namespace nnformer::attention {

// Logit added to token pairs that must not attend to each other.
inline constexpr double kMaskedLogit = -1e9;

struct PartitionSpec {
  Extent3 volume{4, 4, 4};
  Extent3 shift{0, 0, 0};

  std::int64_t tokens() const { return volume[0] * volume[1] * volume[2]; }
  bool shifted() const { return shift != Extent3{0, 0, 0}; }
  // Throws ConfigError unless volume > 0 and 0 <= shift < volume.
  void validate() const;

  // Half-volume displacement on every axis where the volume does not already
  // span the (padded) grid.
  static PartitionSpec shifted_for(Extent3 volume, Extent3 grid);
};

// Extents rounded up to multiples of the volume size.
Extent3 padded_extents(Extent3 extents, const PartitionSpec& spec);
std::int64_t volume_count(Extent3 padded, const PartitionSpec& spec);

// index_map[i * N_T + j] addresses the bias-table entry for the 3D offset
// between tokens i and j of one volume (raster order within the volume).
std::vector<std::int64_t> relative_index_map(Extent3 volume);
std::int64_t bias_table_size(Extent3 volume);

template <typename T>
struct RelPosBias {
  Extent3 volume{1, 1, 1};
  Tensor<T> table;  // [heads, (2S_H-1)(2S_W-1)(2S_D-1)]
  std::vector<std::int64_t> index_map;

  std::int64_t heads() const { return table.dim(0); }
  // [heads, N_T, N_T], differentiable w.r.t. the table.
  Tensor<T> expand(Tape<T>& tape) const;
};

// Table drawn from truncated-normal(0.02) when `rng` is given, zeros otherwise.
template <typename T>
RelPosBias<T> build_bias(Extent3 volume, std::int64_t heads, CounterRng* rng);

template <typename T>
struct AttentionParams {
  Tensor<T> w_q, w_k, w_v, w_o;  // [C, C]
  Tensor<T> b_q, b_k, b_v, b_o;  // [C]
  std::int64_t heads = 1;
  RelPosBias<T> bias;

  std::int64_t channels() const { return w_q.dim(0); }
  std::int64_t head_dim() const { return channels() / heads; }
};

template <typename T>
AttentionParams<T> init_attention(std::int64_t channels, std::int64_t heads, Extent3 volume, CounterRng& rng);

// Keys and values come from one C -> 2C projection of the encoder features;
// the decoder features serve as queries unprojected.
template <typename T>
struct SkipAttentionParams {
  Tensor<T> w_kv;  // [C, 2C]
  Tensor<T> b_kv;  // [2C]
  Tensor<T> w_o;   // [C, C]
  Tensor<T> b_o;   // [C]
  std::int64_t heads = 1;
  RelPosBias<T> bias;

  std::int64_t channels() const { return w_o.dim(0); }
};

template <typename T>
SkipAttentionParams<T> init_skip_attention(std::int64_t channels, std::int64_t heads, Extent3 volume,
                                           CounterRng& rng);

// Region mask of a shifted partition: entry [v][i][j] is 0 when tokens i and
// j of volume v came from the same contiguous pre-shift region, kMaskedLogit
// otherwise. Shape [N_LV, N_T, N_T]; `padded` must be a multiple of the
// volume.
template <typename T>
Tensor<T> build_shift_mask(Extent3 padded, const PartitionSpec& spec);

// [N, C, H, W, D] -> [N * N_LV, N_T, C]; extents must already be multiples
// of the volume (std::logic_error otherwise). Shift is ignored.
template <typename T>
Tensor<T> partition_volumes(Tape<T>& tape, const Tensor<T>& x, const PartitionSpec& spec);

// Inverse of partition_volumes: rebuilds the padded grid of `original`
// rounded up to volume multiples and keeps the `original` corner.
template <typename T>
Tensor<T> reverse_volumes(Tape<T>& tape, const Tensor<T>& tokens, const PartitionSpec& spec, Extent3 original);

// Multi-head self-attention inside each local volume. spec.shift must be
// zero; `mask` ([N_LV, N_T, N_T]) is added to the logits when given.
template <typename T>
Tensor<T> lv_msa(Tape<T>& tape, const Tensor<T>& x, const AttentionParams<T>& params, const PartitionSpec& spec,
                 const Tensor<T>* mask = nullptr);

// Shifted variant: roll by -shift, masked local attention, roll back.
template <typename T>
Tensor<T> slv_msa(Tape<T>& tape, const Tensor<T>& x, const AttentionParams<T>& params, const PartitionSpec& spec);

// Dense attention over the whole grid.
template <typename T>
Tensor<T> gv_msa(Tape<T>& tape, const Tensor<T>& x, const AttentionParams<T>& params);

// Decoder features query the encoder features of the same stage.
template <typename T>
Tensor<T> skip_attention(Tape<T>& tape, const Tensor<T>& encoder_out, const Tensor<T>& decoder_up,
                         const SkipAttentionParams<T>& params, const PartitionSpec& spec);

// Channels-last kernels behind the functions above. `spec` may be shifted;
// padding and the shift are folded into one gather.
template <typename T>
Tensor<T> volume_attention_cl(Tape<T>& tape, const Tensor<T>& x, const AttentionParams<T>& params,
                              const PartitionSpec& spec, const Tensor<T>* mask = nullptr);
template <typename T>
Tensor<T> skip_attention_cl(Tape<T>& tape, const Tensor<T>& encoder_out, const Tensor<T>& decoder_up,
                            const SkipAttentionParams<T>& params, const PartitionSpec& spec);

// One pre-norm layer: x + Attn(Norm(x)), then x + MLP(Norm(x)).
template <typename T>
struct TransformerLayer {
  Tensor<T> norm1_gamma, norm1_beta;
  AttentionParams<T> attn;
  Tensor<T> norm2_gamma, norm2_beta;
  net::MlpParams<T> mlp;
};

template <typename T>
TransformerLayer<T> init_transformer_layer(std::int64_t channels, std::int64_t heads, Extent3 volume,
                                           double mlp_ratio, CounterRng& rng);

// Layer 0 attends within `spec`'s volumes, layer 1 (when present) within the
// shifted volumes. A block with a single layer is the unshifted ablation.
template <typename T>
struct TransformerBlock {
  std::vector<TransformerLayer<T>> layers;
};

template <typename T>
Tensor<T> transformer_block(Tape<T>& tape, const Tensor<T>& x, const TransformerBlock<T>& block,
                            const PartitionSpec& spec);
template <typename T>
Tensor<T> transformer_block_cl(Tape<T>& tape, const Tensor<T>& x, const TransformerBlock<T>& block,
                               const PartitionSpec& spec);

}  // namespace nnformer::attention
