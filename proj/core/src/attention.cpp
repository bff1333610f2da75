#include "nnformer/attention.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "nnformer/errors.hpp"
#include "nnformer/ops.hpp"

namespace nnformer::attention {

void PartitionSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (volume[a] < 1 || shift[a] < 0 || shift[a] >= volume[a]) {
      throw ConfigError("partition: volume " + to_string(volume) + " with shift " + to_string(shift) +
                        " is invalid");
    }
  }
}

PartitionSpec PartitionSpec::shifted_for(Extent3 volume, Extent3 grid) {
  PartitionSpec spec{volume, {0, 0, 0}};
  for (int a = 0; a < 3; ++a) {
    if (volume[a] < grid[a]) spec.shift[a] = volume[a] / 2;
  }
  return spec;
}

Extent3 padded_extents(Extent3 extents, const PartitionSpec& spec) {
  Extent3 p{};
  for (int a = 0; a < 3; ++a) p[a] = (extents[a] + spec.volume[a] - 1) / spec.volume[a] * spec.volume[a];
  return p;
}

std::int64_t volume_count(Extent3 padded, const PartitionSpec& spec) {
  return (padded[0] / spec.volume[0]) * (padded[1] / spec.volume[1]) * (padded[2] / spec.volume[2]);
}

std::int64_t bias_table_size(Extent3 volume) {
  return (2 * volume[0] - 1) * (2 * volume[1] - 1) * (2 * volume[2] - 1);
}

std::vector<std::int64_t> relative_index_map(Extent3 volume) {
  const std::int64_t nt = volume[0] * volume[1] * volume[2];
  const std::int64_t sw = 2 * volume[1] - 1, sd = 2 * volume[2] - 1;
  std::vector<std::int64_t> map(static_cast<std::size_t>(nt * nt));
  auto coord = [&](std::int64_t t) {
    return Extent3{t / (volume[1] * volume[2]), (t / volume[2]) % volume[1], t % volume[2]};
  };
  for (std::int64_t i = 0; i < nt; ++i) {
    const Extent3 ci = coord(i);
    for (std::int64_t j = 0; j < nt; ++j) {
      const Extent3 cj = coord(j);
      const std::int64_t dh = ci[0] - cj[0] + volume[0] - 1;
      const std::int64_t dw = ci[1] - cj[1] + volume[1] - 1;
      const std::int64_t dd = ci[2] - cj[2] + volume[2] - 1;
      map[static_cast<std::size_t>(i * nt + j)] = (dh * sw + dw) * sd + dd;
    }
  }
  return map;
}

template <typename T>
Tensor<T> RelPosBias<T>::expand(Tape<T>& tape) const {
  const std::int64_t h = heads();
  const std::int64_t m = table.dim(1);
  const auto pairs = static_cast<std::int64_t>(index_map.size());
  const auto nt = static_cast<std::int64_t>(std::llround(std::sqrt(static_cast<double>(pairs))));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(h * pairs));
  for (std::int64_t k = 0; k < h; ++k) {
    for (std::int64_t p = 0; p < pairs; ++p) {
      idx[static_cast<std::size_t>(k * pairs + p)] = k * m + index_map[static_cast<std::size_t>(p)];
    }
  }
  return ops::gather_rows(tape, table, 1, idx, Shape{h, nt, nt});
}

template <typename T>
RelPosBias<T> build_bias(Extent3 volume, std::int64_t heads, CounterRng* rng) {
  PartitionSpec{volume, {0, 0, 0}}.validate();
  if (heads < 1) throw ConfigError("bias: heads must be positive");
  RelPosBias<T> b;
  b.volume = volume;
  b.table = rng ? net::trunc_normal<T>({heads, bias_table_size(volume)}, *rng)
                : Tensor<T>(Shape{heads, bias_table_size(volume)});
  b.table.set_requires_grad(true);
  b.index_map = relative_index_map(volume);
  return b;
}

namespace {

template <typename T>
Tensor<T> zeros_param(std::int64_t n) {
  Tensor<T> t(Shape{n});
  t.set_requires_grad(true);
  return t;
}

void check_heads(std::int64_t channels, std::int64_t heads) {
  if (channels < 1 || heads < 1 || channels % heads != 0) {
    throw ConfigError("attention: " + std::to_string(channels) + " channels do not split into " +
                      std::to_string(heads) + " heads");
  }
}

Extent3 spatial_cl(const Shape& s) { return {s[1], s[2], s[3]}; }

// Row of the channels-last grid feeding token t of volume v for sample n, or
// -1 for padding. Volume coordinates live in the shifted frame.
struct Layout {
  std::int64_t batch;
  Extent3 extents;
  Extent3 padded;
  PartitionSpec spec;
  std::int64_t nlv;
  std::int64_t nt;

  Layout(std::int64_t n, Extent3 e, const PartitionSpec& s)
      : batch(n), extents(e), padded(padded_extents(e, s)), spec(s), nlv(volume_count(padded, s)), nt(s.tokens()) {}

  Extent3 grid_of_volumes() const {
    return {padded[0] / spec.volume[0], padded[1] / spec.volume[1], padded[2] / spec.volume[2]};
  }

  // Shifted-frame coordinate of token t in volume v.
  Extent3 frame_coord(std::int64_t v, std::int64_t t) const {
    const Extent3 g = grid_of_volumes();
    const Extent3 vc{v / (g[1] * g[2]), (v / g[2]) % g[1], v % g[2]};
    const Extent3& s = spec.volume;
    const Extent3 tc{t / (s[1] * s[2]), (t / s[2]) % s[1], t % s[2]};
    return {vc[0] * s[0] + tc[0], vc[1] * s[1] + tc[1], vc[2] * s[2] + tc[2]};
  }

  // Source voxel of a shifted-frame coordinate, or -1 when it is padding.
  std::int64_t source_voxel(Extent3 q) const {
    Extent3 o{};
    for (int a = 0; a < 3; ++a) {
      o[a] = (q[a] + spec.shift[a]) % padded[a];
      if (o[a] >= extents[a]) return -1;
    }
    return (o[0] * extents[1] + o[1]) * extents[2] + o[2];
  }

  std::vector<std::int64_t> gather_index() const {
    const std::int64_t voxels = extents[0] * extents[1] * extents[2];
    std::vector<std::int64_t> per_sample(static_cast<std::size_t>(nlv * nt));
    for (std::int64_t v = 0; v < nlv; ++v) {
      for (std::int64_t t = 0; t < nt; ++t) {
        per_sample[static_cast<std::size_t>(v * nt + t)] = source_voxel(frame_coord(v, t));
      }
    }
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(batch) * per_sample.size());
    for (std::int64_t n = 0; n < batch; ++n) {
      for (auto r : per_sample) idx.push_back(r < 0 ? -1 : n * voxels + r);
    }
    return idx;
  }

  std::vector<std::int64_t> scatter_index() const {
    const Extent3 g = grid_of_volumes();
    const Extent3& s = spec.volume;
    std::vector<std::int64_t> idx;
    idx.reserve(static_cast<std::size_t>(batch * extents[0] * extents[1] * extents[2]));
    for (std::int64_t n = 0; n < batch; ++n) {
      for (std::int64_t h = 0; h < extents[0]; ++h) {
        for (std::int64_t w = 0; w < extents[1]; ++w) {
          for (std::int64_t d = 0; d < extents[2]; ++d) {
            const Extent3 p{h, w, d};
            Extent3 q{};
            for (int a = 0; a < 3; ++a) q[a] = (p[a] - spec.shift[a] + padded[a]) % padded[a];
            const std::int64_t v = ((q[0] / s[0]) * g[1] + q[1] / s[1]) * g[2] + q[2] / s[2];
            const std::int64_t t = ((q[0] % s[0]) * s[1] + q[1] % s[1]) * s[2] + q[2] % s[2];
            idx.push_back((n * nlv + v) * nt + t);
          }
        }
      }
    }
    return idx;
  }

  bool has_padding() const { return padded != extents; }

  // Region mask of the shift plus a key mask for padding tokens.
  template <typename T>
  Tensor<T> mask(const Tensor<T>* user) const {
    Tensor<T> m = spec.shifted() ? build_shift_mask<T>(padded, spec) : Tensor<T>(Shape{nlv, nt, nt});
    if (user) {
      if (user->shape() != m.shape()) {
        throw DimensionError("attention: mask " + to_string(user->shape()) + " does not match " +
                             to_string(m.shape()));
      }
      auto md = m.mutable_data();
      auto ud = user->data();
      for (std::size_t i = 0; i < md.size(); ++i) {
        if (md[i] == T(0)) md[i] = ud[i];
      }
    }
    if (has_padding()) {
      auto md = m.mutable_data();
      for (std::int64_t v = 0; v < nlv; ++v) {
        for (std::int64_t j = 0; j < nt; ++j) {
          if (source_voxel(frame_coord(v, j)) >= 0) continue;
          for (std::int64_t i = 0; i < nt; ++i) md[static_cast<std::size_t>((v * nt + i) * nt + j)] = T(kMaskedLogit);
        }
      }
    }
    return m;
  }
};

// softmax(q k^T / sqrt(d_k) + B [+ mask]) v with heads merged back. q, k, v:
// [B, N_T, C].
template <typename T>
Tensor<T> scaled_attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::int64_t heads, const RelPosBias<T>& bias, const Tensor<T>* mask) {
  const std::int64_t dk = q.dim(2) / heads;
  const auto qh = ops::split_heads(tape, q, heads);
  const auto kh = ops::split_heads(tape, k, heads);
  const auto vh = ops::split_heads(tape, v, heads);
  auto logits = ops::matmul(tape, qh, kh, {.transpose_b = true, .mac_class = MacClass::kAttention});
  logits = ops::scale(tape, logits, static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk))));
  logits = ops::add_trailing(tape, logits, bias.expand(tape));
  if (mask) logits = ops::add_mask(tape, logits, *mask);
  const auto weights = ops::softmax(tape, logits);
  const auto out = ops::matmul(tape, weights, vh, {.transpose_b = false, .mac_class = MacClass::kAttention});
  return ops::merge_heads(tape, out);
}

template <typename T>
void check_channels_last(const char* what, const Tensor<T>& x, std::int64_t channels) {
  if (x.rank() != 5) throw DimensionError(std::string(what) + ": expected a rank-5 map, got " + to_string(x.shape()));
  if (x.dim(4) != channels) {
    throw ConfigError(std::string(what) + ": input has " + std::to_string(x.dim(4)) + " channels, parameters expect " +
                      std::to_string(channels));
  }
}

void check_bias_volume(const char* what, Extent3 bias_volume, const PartitionSpec& spec) {
  if (bias_volume != spec.volume) {
    throw ConfigError(std::string(what) + ": bias sized for volume " + to_string(bias_volume) + ", partition uses " +
                      to_string(spec.volume));
  }
}

}  // namespace

template <typename T>
AttentionParams<T> init_attention(std::int64_t channels, std::int64_t heads, Extent3 volume, CounterRng& rng) {
  check_heads(channels, heads);
  AttentionParams<T> p;
  p.w_q = net::trunc_normal<T>({channels, channels}, rng);
  p.w_k = net::trunc_normal<T>({channels, channels}, rng);
  p.w_v = net::trunc_normal<T>({channels, channels}, rng);
  p.w_o = net::trunc_normal<T>({channels, channels}, rng);
  p.b_q = zeros_param<T>(channels);
  p.b_k = zeros_param<T>(channels);
  p.b_v = zeros_param<T>(channels);
  p.b_o = zeros_param<T>(channels);
  p.heads = heads;
  p.bias = build_bias<T>(volume, heads, &rng);
  return p;
}

template <typename T>
SkipAttentionParams<T> init_skip_attention(std::int64_t channels, std::int64_t heads, Extent3 volume,
                                           CounterRng& rng) {
  check_heads(channels, heads);
  SkipAttentionParams<T> p;
  p.w_kv = net::trunc_normal<T>({channels, 2 * channels}, rng);
  p.b_kv = zeros_param<T>(2 * channels);
  p.w_o = net::trunc_normal<T>({channels, channels}, rng);
  p.b_o = zeros_param<T>(channels);
  p.heads = heads;
  p.bias = build_bias<T>(volume, heads, &rng);
  return p;
}

template <typename T>
Tensor<T> build_shift_mask(Extent3 padded, const PartitionSpec& spec) {
  spec.validate();
  for (int a = 0; a < 3; ++a) {
    if (padded[a] % spec.volume[a] != 0) throw std::logic_error("shift mask: grid is not a volume multiple");
  }
  const Layout layout(1, padded, spec);
  auto region = [&](Extent3 q) {
    std::int64_t label = 0;
    for (int a = 0; a < 3; ++a) {
      std::int64_t r = 0;
      if (spec.shift[a] != 0) {
        if (q[a] >= padded[a] - spec.shift[a]) {
          r = 2;
        } else if (q[a] >= padded[a] - spec.volume[a]) {
          r = 1;
        }
      }
      label = label * 3 + r;
    }
    return label;
  };
  const std::int64_t nlv = layout.nlv, nt = layout.nt;
  Tensor<T> mask(Shape{nlv, nt, nt});
  auto md = mask.mutable_data();
  std::vector<std::int64_t> labels(static_cast<std::size_t>(nt));
  for (std::int64_t v = 0; v < nlv; ++v) {
    for (std::int64_t t = 0; t < nt; ++t) labels[static_cast<std::size_t>(t)] = region(layout.frame_coord(v, t));
    for (std::int64_t i = 0; i < nt; ++i) {
      for (std::int64_t j = 0; j < nt; ++j) {
        if (labels[static_cast<std::size_t>(i)] != labels[static_cast<std::size_t>(j)]) {
          md[static_cast<std::size_t>((v * nt + i) * nt + j)] = T(kMaskedLogit);
        }
      }
    }
  }
  return mask;
}

template <typename T>
Tensor<T> partition_volumes(Tape<T>& tape, const Tensor<T>& x, const PartitionSpec& spec) {
  if (x.rank() != 5) throw DimensionError("partition_volumes: expected [N,C,H,W,D], got " + to_string(x.shape()));
  spec.validate();
  const Extent3 e{x.dim(2), x.dim(3), x.dim(4)};
  for (int a = 0; a < 3; ++a) {
    if (e[a] % spec.volume[a] != 0) {
      throw std::logic_error("partition_volumes: extents " + to_string(e) + " not padded to " +
                             to_string(spec.volume));
    }
  }
  const Layout layout(x.dim(0), e, PartitionSpec{spec.volume, {0, 0, 0}});
  const auto cl = ops::to_channels_last(tape, x);
  const std::int64_t c = x.dim(1);
  return ops::gather_rows(tape, cl, c, layout.gather_index(), Shape{layout.batch * layout.nlv, layout.nt, c});
}

template <typename T>
Tensor<T> reverse_volumes(Tape<T>& tape, const Tensor<T>& tokens, const PartitionSpec& spec, Extent3 original) {
  spec.validate();
  if (tokens.rank() != 3) throw DimensionError("reverse_volumes: expected [B,N_T,C], got " + to_string(tokens.shape()));
  const PartitionSpec plain{spec.volume, {0, 0, 0}};
  const Extent3 padded = padded_extents(original, plain);
  const std::int64_t nlv = volume_count(padded, plain);
  if (tokens.dim(1) != plain.tokens() || tokens.dim(0) % nlv != 0) {
    throw DimensionError("reverse_volumes: " + to_string(tokens.shape()) + " does not tile " + to_string(original) +
                         " with volume " + to_string(spec.volume));
  }
  const Layout layout(tokens.dim(0) / nlv, original, plain);
  const std::int64_t c = tokens.dim(2);
  const auto cl = ops::gather_rows(tape, tokens, c, layout.scatter_index(),
                                   Shape{layout.batch, original[0], original[1], original[2], c});
  return ops::to_channels_first(tape, cl);
}

template <typename T>
Tensor<T> volume_attention_cl(Tape<T>& tape, const Tensor<T>& x, const AttentionParams<T>& params,
                              const PartitionSpec& spec, const Tensor<T>* mask) {
  spec.validate();
  check_channels_last("attention", x, params.channels());
  check_heads(params.channels(), params.heads);
  check_bias_volume("attention", params.bias.volume, spec);
  const std::int64_t c = params.channels();
  const Layout layout(x.dim(0), spatial_cl(x.shape()), spec);
  const auto tokens =
      ops::gather_rows(tape, x, c, layout.gather_index(), Shape{layout.batch * layout.nlv, layout.nt, c});
  const auto q = ops::linear(tape, tokens, params.w_q, params.b_q, MacClass::kProjection);
  const auto k = ops::linear(tape, tokens, params.w_k, params.b_k, MacClass::kProjection);
  const auto v = ops::linear(tape, tokens, params.w_v, params.b_v, MacClass::kProjection);
  const bool masked = mask || spec.shifted() || layout.has_padding();
  const Tensor<T> m = masked ? layout.template mask<T>(mask) : Tensor<T>();
  const auto attended = scaled_attention(tape, q, k, v, params.heads, params.bias, masked ? &m : nullptr);
  const auto out = ops::linear(tape, attended, params.w_o, params.b_o, MacClass::kProjection);
  return ops::gather_rows(tape, out, c, layout.scatter_index(), x.shape());
}

template <typename T>
Tensor<T> skip_attention_cl(Tape<T>& tape, const Tensor<T>& encoder_out, const Tensor<T>& decoder_up,
                            const SkipAttentionParams<T>& params, const PartitionSpec& spec) {
  spec.validate();
  check_channels_last("skip attention", decoder_up, params.channels());
  check_channels_last("skip attention", encoder_out, params.channels());
  if (encoder_out.shape() != decoder_up.shape()) {
    throw ConfigError("skip attention: encoder features " + to_string(encoder_out.shape()) +
                      " do not match decoder features " + to_string(decoder_up.shape()));
  }
  check_heads(params.channels(), params.heads);
  const PartitionSpec plain{spec.volume, {0, 0, 0}};
  check_bias_volume("skip attention", params.bias.volume, plain);
  const std::int64_t c = params.channels();
  const Layout layout(decoder_up.dim(0), spatial_cl(decoder_up.shape()), plain);
  const auto idx = layout.gather_index();
  const Shape token_shape{layout.batch * layout.nlv, layout.nt, c};
  const auto q = ops::gather_rows(tape, decoder_up, c, idx, token_shape);
  const auto enc = ops::gather_rows(tape, encoder_out, c, idx, token_shape);
  const auto kv = ops::linear(tape, enc, params.w_kv, params.b_kv, MacClass::kProjection);
  const auto k = ops::slice_last(tape, kv, 0, c);
  const auto v = ops::slice_last(tape, kv, c, 2 * c);
  const Tensor<T> m = layout.has_padding() ? layout.template mask<T>(nullptr) : Tensor<T>();
  const auto attended = scaled_attention(tape, q, k, v, params.heads, params.bias, m.defined() ? &m : nullptr);
  const auto out = ops::linear(tape, attended, params.w_o, params.b_o, MacClass::kProjection);
  return ops::gather_rows(tape, out, c, layout.scatter_index(), decoder_up.shape());
}

template <typename T>
Tensor<T> lv_msa(Tape<T>& tape, const Tensor<T>& x, const AttentionParams<T>& params, const PartitionSpec& spec,
                 const Tensor<T>* mask) {
  if (spec.shifted()) throw ConfigError("lv_msa: shift must be zero, got " + to_string(spec.shift));
  const auto cl = ops::to_channels_last(tape, x);
  return ops::to_channels_first(tape, volume_attention_cl(tape, cl, params, spec, mask));
}

template <typename T>
Tensor<T> slv_msa(Tape<T>& tape, const Tensor<T>& x, const AttentionParams<T>& params, const PartitionSpec& spec) {
  const auto cl = ops::to_channels_last(tape, x);
  return ops::to_channels_first(tape, volume_attention_cl(tape, cl, params, spec));
}

template <typename T>
Tensor<T> gv_msa(Tape<T>& tape, const Tensor<T>& x, const AttentionParams<T>& params) {
  if (x.rank() != 5) throw DimensionError("gv_msa: expected [N,C,H,W,D], got " + to_string(x.shape()));
  const PartitionSpec whole{{x.dim(2), x.dim(3), x.dim(4)}, {0, 0, 0}};
  const auto cl = ops::to_channels_last(tape, x);
  return ops::to_channels_first(tape, volume_attention_cl(tape, cl, params, whole));
}

template <typename T>
Tensor<T> skip_attention(Tape<T>& tape, const Tensor<T>& encoder_out, const Tensor<T>& decoder_up,
                         const SkipAttentionParams<T>& params, const PartitionSpec& spec) {
  if (encoder_out.rank() != 5 || decoder_up.rank() != 5) {
    throw DimensionError("skip attention: expected [N,C,H,W,D] maps");
  }
  const auto enc = ops::to_channels_last(tape, encoder_out);
  const auto dec = ops::to_channels_last(tape, decoder_up);
  return ops::to_channels_first(tape, skip_attention_cl(tape, enc, dec, params, spec));
}

template <typename T>
TransformerLayer<T> init_transformer_layer(std::int64_t channels, std::int64_t heads, Extent3 volume,
                                           double mlp_ratio, CounterRng& rng) {
  TransformerLayer<T> layer;
  layer.norm1_gamma = Tensor<T>(Shape{channels}, T(1));
  layer.norm1_gamma.set_requires_grad(true);
  layer.norm1_beta = zeros_param<T>(channels);
  layer.attn = init_attention<T>(channels, heads, volume, rng);
  layer.norm2_gamma = Tensor<T>(Shape{channels}, T(1));
  layer.norm2_gamma.set_requires_grad(true);
  layer.norm2_beta = zeros_param<T>(channels);
  layer.mlp = net::init_mlp<T>(channels, mlp_ratio, rng);
  return layer;
}

template <typename T>
Tensor<T> transformer_block_cl(Tape<T>& tape, const Tensor<T>& x, const TransformerBlock<T>& block,
                               const PartitionSpec& spec) {
  if (x.rank() != 5) throw DimensionError("transformer block: expected a rank-5 map, got " + to_string(x.shape()));
  const PartitionSpec plain{spec.volume, {0, 0, 0}};
  const PartitionSpec shifted = PartitionSpec::shifted_for(spec.volume, padded_extents(spatial_cl(x.shape()), plain));
  Tensor<T> h = x;
  for (std::size_t i = 0; i < block.layers.size(); ++i) {
    const auto& layer = block.layers[i];
    const auto guard = tape.scope("layer" + std::to_string(i));
    const auto n1 = ops::layer_norm(tape, h, layer.norm1_gamma, layer.norm1_beta);
    h = ops::add(tape, h, volume_attention_cl(tape, n1, layer.attn, i % 2 == 0 ? plain : shifted));
    const auto n2 = ops::layer_norm(tape, h, layer.norm2_gamma, layer.norm2_beta);
    h = ops::add(tape, h, net::mlp(tape, n2, layer.mlp));
  }
  return h;
}

template <typename T>
Tensor<T> transformer_block(Tape<T>& tape, const Tensor<T>& x, const TransformerBlock<T>& block,
                            const PartitionSpec& spec) {
  const auto cl = ops::to_channels_last(tape, x);
  return ops::to_channels_first(tape, transformer_block_cl(tape, cl, block, spec));
}

#define NNFORMER_INSTANTIATE_ATTENTION(T)                                                                          \
  template struct RelPosBias<T>;                                                                                   \
  template RelPosBias<T> build_bias<T>(Extent3, std::int64_t, CounterRng*);                                       \
  template AttentionParams<T> init_attention<T>(std::int64_t, std::int64_t, Extent3, CounterRng&);                \
  template SkipAttentionParams<T> init_skip_attention<T>(std::int64_t, std::int64_t, Extent3, CounterRng&);       \
  template Tensor<T> build_shift_mask<T>(Extent3, const PartitionSpec&);                                          \
  template Tensor<T> partition_volumes<T>(Tape<T>&, const Tensor<T>&, const PartitionSpec&);                      \
  template Tensor<T> reverse_volumes<T>(Tape<T>&, const Tensor<T>&, const PartitionSpec&, Extent3);               \
  template Tensor<T> volume_attention_cl<T>(Tape<T>&, const Tensor<T>&, const AttentionParams<T>&,                \
                                            const PartitionSpec&, const Tensor<T>*);                               \
  template Tensor<T> skip_attention_cl<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&,                           \
                                          const SkipAttentionParams<T>&, const PartitionSpec&);                    \
  template Tensor<T> lv_msa<T>(Tape<T>&, const Tensor<T>&, const AttentionParams<T>&, const PartitionSpec&,       \
                               const Tensor<T>*);                                                                  \
  template Tensor<T> slv_msa<T>(Tape<T>&, const Tensor<T>&, const AttentionParams<T>&, const PartitionSpec&);     \
  template Tensor<T> gv_msa<T>(Tape<T>&, const Tensor<T>&, const AttentionParams<T>&);                            \
  template Tensor<T> skip_attention<T>(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const SkipAttentionParams<T>&, \
                                       const PartitionSpec&);                                                      \
  template TransformerLayer<T> init_transformer_layer<T>(std::int64_t, std::int64_t, Extent3, double, CounterRng&); \
  template Tensor<T> transformer_block_cl<T>(Tape<T>&, const Tensor<T>&, const TransformerBlock<T>&,              \
                                             const PartitionSpec&);                                                \
  template Tensor<T> transformer_block<T>(Tape<T>&, const Tensor<T>&, const TransformerBlock<T>&,                 \
                                          const PartitionSpec&);

NNFORMER_INSTANTIATE_ATTENTION(float)
NNFORMER_INSTANTIATE_ATTENTION(double)

}  // namespace nnformer::attention
