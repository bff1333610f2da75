#include "nnformer/model.hpp"

#include <algorithm>
#include <cmath>

#include "nnformer/errors.hpp"
#include "nnformer/ops.hpp"

namespace nnformer::net {

using attention::PartitionSpec;
using nnformer::to_string;

namespace {

template <typename T>
Tensor<T> uniform_param(Shape shape, double bound, CounterRng& rng) {
  Tensor<T> t(std::move(shape));
  for (T& v : t.mutable_data()) v = static_cast<T>(rng.uniform(-bound, bound));
  t.set_requires_grad(true);
  return t;
}

Extent3 apply_stride(Extent3 e, Extent3 s) {
  for (int a = 0; a < 3; ++a) e[a] = ops::conv_out_extent(e[a], 3, s[a], 1);
  return e;
}

template <typename T>
Tensor<T> cl(Tape<T>& tape, const Tensor<T>& x) {
  return ops::to_channels_last(tape, x);
}

template <typename T>
Tensor<T> cf(Tape<T>& tape, const Tensor<T>& x) {
  return ops::to_channels_first(tape, x);
}

}  // namespace

template <typename T>
ConvParams<T> init_conv(std::int64_t cin, std::int64_t cout, Extent3 kernel, CounterRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kernel[0] * kernel[1] * kernel[2]));
  return {uniform_param<T>({cout, cin, kernel[0], kernel[1], kernel[2]}, bound, rng),
          uniform_param<T>({cout}, bound, rng)};
}

template <typename T>
ConvParams<T> init_deconv(std::int64_t cin, std::int64_t cout, Extent3 kernel, CounterRng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cout * kernel[0] * kernel[1] * kernel[2]));
  return {uniform_param<T>({cin, cout, kernel[0], kernel[1], kernel[2]}, bound, rng),
          uniform_param<T>({cout}, bound, rng)};
}

template <typename T>
NormParams<T> init_norm(std::int64_t channels) {
  NormParams<T> p{Tensor<T>(Shape{channels}, T(1)), Tensor<T>(Shape{channels})};
  p.gamma.set_requires_grad(true);
  p.beta.set_requires_grad(true);
  return p;
}

template <typename T>
Tensor<T> channel_norm(Tape<T>& tape, const Tensor<T>& x, const NormParams<T>& p) {
  return cf(tape, ops::layer_norm(tape, cl(tape, x), p.gamma, p.beta));
}

template <typename T>
Tensor<T> embed_volume(Tape<T>& tape, const Tensor<T>& x, const EmbedParams<T>& p,
                       const std::array<Extent3, 2>& strides) {
  const std::array<Extent3, 4> stride{strides[0], Extent3{1, 1, 1}, strides[1], Extent3{1, 1, 1}};
  Tensor<T> h = x;
  for (std::size_t i = 0; i < 4; ++i) {
    h = ops::conv3d(tape, h, p.conv[i].weight, p.conv[i].bias, {.stride = stride[i], .padding = {1, 1, 1}});
    if (i < 3) h = channel_norm(tape, ops::gelu(tape, h), p.norm[i]);
  }
  return h;
}

template <typename T>
Tensor<T> downsample(Tape<T>& tape, const Tensor<T>& x, const DownParams<T>& p) {
  for (int a = 0; a < 3; ++a) {
    if (p.stride[a] == 2 && x.dim(2 + a) == 1) {
      throw ConfigError("downsample: stride " + to_string(p.stride) + " over-down-samples extent " +
                        to_string(Extent3{x.dim(2), x.dim(3), x.dim(4)}));
    }
  }
  const auto y = ops::conv3d(tape, x, p.conv.weight, p.conv.bias, {.stride = p.stride, .padding = {1, 1, 1}});
  return channel_norm(tape, y, p.norm);
}

template <typename T>
Tensor<T> upsample(Tape<T>& tape, const Tensor<T>& x, const UpParams<T>& p, Extent3 target) {
  const auto y = ops::deconv3d(tape, channel_norm(tape, x, p.norm), p.deconv.weight, p.deconv.bias, p.stride);
  for (int a = 0; a < 3; ++a) {
    if (y.dim(2 + a) < target[a] || y.dim(2 + a) - target[a] >= p.stride[a]) {
      throw std::logic_error("upsample: " + to_string(y.shape()) + " cannot mirror " + to_string(target));
    }
  }
  return ops::crop(tape, y, target);
}

template <typename T>
Tensor<T> expand_to_logits(Tape<T>& tape, const Tensor<T>& x, const UpParams<T>& p, Extent3 crop) {
  const auto y = ops::deconv3d(tape, channel_norm(tape, x, p.norm), p.deconv.weight, p.deconv.bias, p.stride);
  return ops::crop(tape, y, crop);
}

std::string_view to_string(StageRole role) {
  switch (role) {
    case StageRole::kEncoder:
      return "encoder";
    case StageRole::kBottleneck:
      return "bottleneck";
    case StageRole::kDecoder:
      return "decoder";
  }
  return "?";
}

std::array<Extent3, 4> level_extents(const ModelConfig& config) {
  std::array<Extent3, 4> e{};
  e[0] = apply_stride(apply_stride(config.crop_size, config.embed_strides[0]), config.embed_strides[1]);
  for (std::size_t i = 0; i < 3; ++i) e[i + 1] = apply_stride(e[i], config.down_strides[i]);
  return e;
}

Extent3 stage_volume(const ModelConfig& config, int level, Extent3 extents) {
  if (level >= 2) return extents;
  Extent3 v{};
  for (int a = 0; a < 3; ++a) v[a] = std::min(config.volume_size[a], extents[a]);
  return v;
}

std::vector<StageShape> plan_stages(const ModelConfig& config) {
  config.validate();
  const auto e = level_extents(config);
  auto stage = [&](std::string name, int level, StageRole role) {
    StageShape s;
    s.name = std::move(name);
    s.level = level;
    s.extents = e[static_cast<std::size_t>(level)];
    s.channels = config.stage_channels[static_cast<std::size_t>(level)];
    s.role = role;
    s.global = level >= 2;
    s.volume = stage_volume(config, level, s.extents);
    s.padded = attention::padded_extents(s.extents, PartitionSpec{s.volume, {0, 0, 0}});
    s.heads = config.stage_heads[static_cast<std::size_t>(level)];
    return s;
  };
  return {stage("encoder0", 0, StageRole::kEncoder),       stage("encoder1", 1, StageRole::kEncoder),
          stage("bottleneck0", 2, StageRole::kBottleneck), stage("bottleneck1", 3, StageRole::kBottleneck),
          stage("bottleneck2", 2, StageRole::kBottleneck), stage("decoder1", 1, StageRole::kDecoder),
          stage("decoder0", 0, StageRole::kDecoder)};
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  stages_ = plan_stages(config_);
  CounterRng rng(seed);
  const std::int64_t c = config_.embed_dim;
  const auto& ch = config_.stage_channels;
  const Extent3 k3{3, 3, 3};

  embed_.conv[0] = init_conv<T>(config_.in_channels, c / 2, k3, rng);
  embed_.conv[1] = init_conv<T>(c / 2, c / 2, k3, rng);
  embed_.conv[2] = init_conv<T>(c / 2, c, k3, rng);
  embed_.conv[3] = init_conv<T>(c, c, k3, rng);
  embed_.norm = {init_norm<T>(c / 2), init_norm<T>(c / 2), init_norm<T>(c)};

  for (std::size_t i = 0; i < stages_.size(); ++i) {
    const auto& s = stages_[i];
    const auto layers = config_.blocks[static_cast<std::size_t>(s.level)];
    for (std::int64_t l = 0; l < layers; ++l) {
      blocks_[i].layers.push_back(
          attention::init_transformer_layer<T>(s.channels, s.heads, s.volume, config_.mlp_ratio, rng));
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    down_[i] = {init_conv<T>(ch[i], ch[i + 1], k3, rng), init_norm<T>(ch[i + 1]), config_.down_strides[i]};
  }
  for (std::size_t i = 0; i < 3; ++i) {
    // up_[0] undoes down_[2], up_[2] undoes down_[0].
    const std::size_t level = 3 - i;
    const Extent3 s = config_.down_strides[level - 1];
    up_[i] = {init_norm<T>(ch[level]), init_deconv<T>(ch[level], ch[level - 1], s, rng), s};
  }
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& s = stages_[5 + i];
    skip_[i].norm_q = init_norm<T>(s.channels);
    skip_[i].norm_kv = init_norm<T>(s.channels);
    skip_[i].attn = attention::init_skip_attention<T>(s.channels, s.heads, s.volume, rng);
    skip_[i].norm_mlp = init_norm<T>(s.channels);
    skip_[i].mlp = init_mlp<T>(s.channels, config_.mlp_ratio, rng);
    ds_heads_[i] = init_conv<T>(s.channels, config_.num_classes, {1, 1, 1}, rng);
  }
  const Extent3 r = config_.embed_reduction();
  expand_ = {init_norm<T>(c), init_deconv<T>(c, config_.num_classes, r, rng), r};
}

template <typename T>
void Model<T>::visit(const std::function<void(const std::string&, const Tensor<T>&)>& fn) const {
  auto conv = [&](const std::string& prefix, const ConvParams<T>& p) {
    fn(prefix + ".weight", p.weight);
    fn(prefix + ".bias", p.bias);
  };
  auto norm = [&](const std::string& prefix, const NormParams<T>& p) {
    fn(prefix + ".gamma", p.gamma);
    fn(prefix + ".beta", p.beta);
  };
  auto mlp_params = [&](const std::string& prefix, const MlpParams<T>& p) {
    fn(prefix + ".w1", p.w1);
    fn(prefix + ".b1", p.b1);
    fn(prefix + ".w2", p.w2);
    fn(prefix + ".b2", p.b2);
  };
  for (std::size_t i = 0; i < 4; ++i) conv("embed.conv" + std::to_string(i), embed_.conv[i]);
  for (std::size_t i = 0; i < 3; ++i) norm("embed.norm" + std::to_string(i), embed_.norm[i]);
  for (std::size_t b = 0; b < stages_.size(); ++b) {
    for (std::size_t l = 0; l < blocks_[b].layers.size(); ++l) {
      const auto& layer = blocks_[b].layers[l];
      const std::string p = stages_[b].name + ".layer" + std::to_string(l);
      norm(p + ".norm1", {layer.norm1_gamma, layer.norm1_beta});
      fn(p + ".attn.w_q", layer.attn.w_q);
      fn(p + ".attn.b_q", layer.attn.b_q);
      fn(p + ".attn.w_k", layer.attn.w_k);
      fn(p + ".attn.b_k", layer.attn.b_k);
      fn(p + ".attn.w_v", layer.attn.w_v);
      fn(p + ".attn.b_v", layer.attn.b_v);
      fn(p + ".attn.w_o", layer.attn.w_o);
      fn(p + ".attn.b_o", layer.attn.b_o);
      fn(p + ".attn.bias_table", layer.attn.bias.table);
      norm(p + ".norm2", {layer.norm2_gamma, layer.norm2_beta});
      mlp_params(p + ".mlp", layer.mlp);
    }
  }
  for (std::size_t i = 0; i < 3; ++i) {
    conv("down" + std::to_string(i) + ".conv", down_[i].conv);
    norm("down" + std::to_string(i) + ".norm", down_[i].norm);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    norm("up" + std::to_string(3 - i) + ".norm", up_[i].norm);
    conv("up" + std::to_string(3 - i) + ".deconv", up_[i].deconv);
  }
  for (std::size_t i = 0; i < 2; ++i) {
    const std::string p = "skip" + std::to_string(1 - i);
    norm(p + ".norm_q", skip_[i].norm_q);
    norm(p + ".norm_kv", skip_[i].norm_kv);
    fn(p + ".attn.w_kv", skip_[i].attn.w_kv);
    fn(p + ".attn.b_kv", skip_[i].attn.b_kv);
    fn(p + ".attn.w_o", skip_[i].attn.w_o);
    fn(p + ".attn.b_o", skip_[i].attn.b_o);
    fn(p + ".attn.bias_table", skip_[i].attn.bias.table);
    norm(p + ".norm_mlp", skip_[i].norm_mlp);
    mlp_params(p + ".mlp", skip_[i].mlp);
    conv("ds_head" + std::to_string(1 - i), ds_heads_[i]);
  }
  norm("expand.norm", expand_.norm);
  conv("expand.deconv", expand_.deconv);
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::parameters() const {
  std::vector<NamedTensor<T>> out;
  visit([&out](const std::string& name, const Tensor<T>& t) { out.push_back({name, t}); });
  return out;
}

template <typename T>
std::int64_t Model<T>::parameter_count() const {
  std::int64_t n = 0;
  visit([&n](const std::string&, const Tensor<T>& t) { n += t.numel(); });
  return n;
}

template <typename T>
ModelOutput<T> Model<T>::forward(Tape<T>& tape, const Tensor<T>& x) const {
  const Shape expect{x.rank() > 0 ? x.dim(0) : 0, config_.in_channels, config_.crop_size[0], config_.crop_size[1],
                     config_.crop_size[2]};
  if (x.rank() != 5 || x.shape() != expect || x.dim(0) < 1) {
    throw UsageError("forward: input " + to_string(x.shape()) + " does not match [N, " +
                     std::to_string(config_.in_channels) + ", " + to_string(config_.crop_size) + "]");
  }
  auto block = [&](std::size_t i, const Tensor<T>& h_cl) {
    const auto guard = tape.scope(stages_[i].name);
    return attention::transformer_block_cl(tape, h_cl, blocks_[i], PartitionSpec{stages_[i].volume, {0, 0, 0}});
  };
  auto skip = [&](std::size_t i, const Tensor<T>& up_cl, const Tensor<T>& enc_cl) {
    const auto& s = stages_[5 + i];
    const auto& p = skip_[i];
    const auto guard = tape.scope(s.name + "/skip");
    const auto q = ops::layer_norm(tape, up_cl, p.norm_q.gamma, p.norm_q.beta);
    const auto kv = ops::layer_norm(tape, enc_cl, p.norm_kv.gamma, p.norm_kv.beta);
    auto h = ops::add(tape, ops::add(tape, up_cl, enc_cl),
                      attention::skip_attention_cl(tape, kv, q, p.attn, PartitionSpec{s.volume, {0, 0, 0}}));
    const auto n = ops::layer_norm(tape, h, p.norm_mlp.gamma, p.norm_mlp.beta);
    return ops::add(tape, h, mlp(tape, n, p.mlp));
  };
  auto head = [&](std::size_t i, const Tensor<T>& h) {
    const auto guard = tape.scope("ds_head" + std::to_string(1 - i));
    return ops::conv3d(tape, h, ds_heads_[i].weight, ds_heads_[i].bias);
  };

  Tensor<T> e;
  {
    const auto guard = tape.scope("embed");
    e = embed_volume(tape, x, embed_, config_.embed_strides);
  }
  const auto enc0 = block(0, cl(tape, e));
  Tensor<T> h;
  {
    const auto guard = tape.scope("down0");
    h = downsample(tape, cf(tape, enc0), down_[0]);
  }
  const auto enc1 = block(1, cl(tape, h));
  {
    const auto guard = tape.scope("down1");
    h = downsample(tape, cf(tape, enc1), down_[1]);
  }
  const auto g0 = block(2, cl(tape, h));
  {
    const auto guard = tape.scope("down2");
    h = downsample(tape, cf(tape, g0), down_[2]);
  }
  const auto g1 = block(3, cl(tape, h));
  {
    const auto guard = tape.scope("up3");
    h = upsample(tape, cf(tape, g1), up_[0], stages_[2].extents);
  }
  const auto g2 = block(4, cl(tape, h));
  {
    const auto guard = tape.scope("up2");
    h = upsample(tape, cf(tape, g2), up_[1], stages_[1].extents);
  }
  const auto dec1 = block(5, skip(0, cl(tape, h), enc1));
  ModelOutput<T> out;
  const auto dec1_cf = cf(tape, dec1);
  out.logits_low = head(0, dec1_cf);
  {
    const auto guard = tape.scope("up1");
    h = upsample(tape, dec1_cf, up_[2], stages_[0].extents);
  }
  const auto dec0 = block(6, skip(1, cl(tape, h), enc0));
  const auto dec0_cf = cf(tape, dec0);
  out.logits_mid = head(1, dec0_cf);
  {
    const auto guard = tape.scope("expand");
    out.logits_full = expand_to_logits(tape, dec0_cf, expand_, config_.crop_size);
  }
  return out;
}

#define NNFORMER_INSTANTIATE_MODEL(T)                                                                           \
  template ConvParams<T> init_conv<T>(std::int64_t, std::int64_t, Extent3, CounterRng&);                        \
  template ConvParams<T> init_deconv<T>(std::int64_t, std::int64_t, Extent3, CounterRng&);                      \
  template NormParams<T> init_norm<T>(std::int64_t);                                                            \
  template Tensor<T> channel_norm<T>(Tape<T>&, const Tensor<T>&, const NormParams<T>&);                         \
  template Tensor<T> embed_volume<T>(Tape<T>&, const Tensor<T>&, const EmbedParams<T>&,                         \
                                     const std::array<Extent3, 2>&);                                            \
  template Tensor<T> downsample<T>(Tape<T>&, const Tensor<T>&, const DownParams<T>&);                           \
  template Tensor<T> upsample<T>(Tape<T>&, const Tensor<T>&, const UpParams<T>&, Extent3);                      \
  template Tensor<T> expand_to_logits<T>(Tape<T>&, const Tensor<T>&, const UpParams<T>&, Extent3);              \
  template class Model<T>;

NNFORMER_INSTANTIATE_MODEL(float)
NNFORMER_INSTANTIATE_MODEL(double)

}  // namespace nnformer::net
