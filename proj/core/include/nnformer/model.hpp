#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nnformer/attention.hpp"
#include "nnformer/config.hpp"
#include "nnformer/rng.hpp"
#include "nnformer/tape.hpp"
#include "nnformer/tensor.hpp"

namespace nnformer::net {

template <typename T>
struct ConvParams {
  Tensor<T> weight;  // conv: [Cout, Cin, k...], deconv: [Cin, Cout, k...]
  Tensor<T> bias;
};

template <typename T>
struct NormParams {
  Tensor<T> gamma;
  Tensor<T> beta;
};

// Four k=3 convolutions: in -> C/2 (first stride), C/2 -> C/2, C/2 -> C
// (second stride), C -> C, with GELU and LayerNorm between them.
template <typename T>
struct EmbedParams {
  std::array<ConvParams<T>, 4> conv;
  std::array<NormParams<T>, 3> norm;
};

// k=3 strided convolution doubling the channels, then LayerNorm.
template <typename T>
struct DownParams {
  ConvParams<T> conv;
  NormParams<T> norm;
  Extent3 stride{2, 2, 2};
};

// LayerNorm, then a deconvolution with kernel equal to stride.
template <typename T>
struct UpParams {
  NormParams<T> norm;
  ConvParams<T> deconv;
  Extent3 stride{2, 2, 2};
};

// x_up + SkipAttn(Norm(x_up), Norm(enc)), then + MLP(Norm(.)).
template <typename T>
struct SkipLayerParams {
  NormParams<T> norm_q;
  NormParams<T> norm_kv;
  attention::SkipAttentionParams<T> attn;
  NormParams<T> norm_mlp;
  MlpParams<T> mlp;
};

// PyTorch-style default: weights and biases uniform in +-1/sqrt(fan_in).
template <typename T>
ConvParams<T> init_conv(std::int64_t cin, std::int64_t cout, Extent3 kernel, CounterRng& rng);
template <typename T>
ConvParams<T> init_deconv(std::int64_t cin, std::int64_t cout, Extent3 kernel, CounterRng& rng);
template <typename T>
NormParams<T> init_norm(std::int64_t channels);

// LayerNorm over the channel axis of an [N, C, H, W, D] map.
template <typename T>
Tensor<T> channel_norm(Tape<T>& tape, const Tensor<T>& x, const NormParams<T>& p);

// x: [N, in, H, W, D] -> [N, C, H/r, W/r, D/r] (ceil), r = product of strides.
template <typename T>
Tensor<T> embed_volume(Tape<T>& tape, const Tensor<T>& x, const EmbedParams<T>& p,
                       const std::array<Extent3, 2>& strides);
template <typename T>
Tensor<T> downsample(Tape<T>& tape, const Tensor<T>& x, const DownParams<T>& p);
// Output cropped to `target` extents.
template <typename T>
Tensor<T> upsample(Tape<T>& tape, const Tensor<T>& x, const UpParams<T>& p, Extent3 target);
// Deconvolution back to crop resolution with num_classes channels.
template <typename T>
Tensor<T> expand_to_logits(Tape<T>& tape, const Tensor<T>& x, const UpParams<T>& p, Extent3 crop);

enum class StageRole { kEncoder, kBottleneck, kDecoder };
std::string_view to_string(StageRole role);

struct StageShape {
  std::string name;
  int level = 0;  // 0..3, resolution level
  Extent3 extents{};
  std::int64_t channels = 0;
  StageRole role = StageRole::kEncoder;
  bool global = false;
  // Attention partition used by the stage's transformer layers.
  Extent3 volume{};
  Extent3 padded{};
  std::int64_t heads = 1;
};

// Stage-by-stage plan: encoder0, encoder1, bottleneck0 (level 2),
// bottleneck1 (level 3), bottleneck2 (level 2), decoder1, decoder0.
std::vector<StageShape> plan_stages(const ModelConfig& config);
// Extents at resolution levels 0..3.
std::array<Extent3, 4> level_extents(const ModelConfig& config);
Extent3 stage_volume(const ModelConfig& config, int level, Extent3 extents);

template <typename T>
struct ModelOutput {
  Tensor<T> logits_full;  // crop resolution
  Tensor<T> logits_mid;   // level 0
  Tensor<T> logits_low;   // level 1
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::vector<StageShape>& stages() const { return stages_; }

  // Every trainable tensor in a fixed order, sharing storage with the model.
  std::vector<NamedTensor<T>> parameters() const;
  std::int64_t parameter_count() const;

  // x: [N, in_channels, crop]. Throws UsageError on any other shape.
  ModelOutput<T> forward(Tape<T>& tape, const Tensor<T>& x) const;

 private:
  void visit(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const;

  ModelConfig config_;
  std::vector<StageShape> stages_;
  EmbedParams<T> embed_;
  std::array<attention::TransformerBlock<T>, 7> blocks_;
  std::array<DownParams<T>, 3> down_;
  std::array<UpParams<T>, 3> up_;  // level 3->2, 2->1, 1->0
  std::array<SkipLayerParams<T>, 2> skip_;  // decoder levels 1, 0
  std::array<ConvParams<T>, 2> ds_heads_;  // decoder levels 1, 0
  UpParams<T> expand_;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace nnformer::net
