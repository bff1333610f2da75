#pragma once

#include <cstdint>
#include <span>

#include "nnformer/tape.hpp"
#include "nnformer/tensor.hpp"

// Differentiable primitives. Every op takes the tape that records it; the
// output requires a gradient iff the tape is recording and some input does.
namespace nnformer::ops {

struct MatmulOptions {
  bool transpose_b = false;
  MacClass mac_class = MacClass::kProjection;
};

// a: [..., m, k], b: [..., k, n] (or [..., n, k] with transpose_b). Leading
// batch extents must be equal, or b may be a plain matrix shared by every
// batch element.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, MatmulOptions opts = {});

// x: [..., in] times w: [in, out] plus optional bias [out].
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 MacClass mac_class);

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

// b's shape must equal the trailing axes of a; b is broadcast over the rest.
template <typename T>
Tensor<T> add_trailing(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a);

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape);

struct Conv3dOptions {
  Extent3 stride{1, 1, 1};
  Extent3 padding{0, 0, 0};
};

// Cross-correlation. x: [N, Cin, H, W, D], w: [Cout, Cin, kh, kw, kd],
// bias: [Cout] or undefined.
template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 Conv3dOptions opts = {});

// Transposed convolution, the adjoint of conv3d without padding.
// x: [N, Cin, H, W, D], w: [Cin, Cout, kh, kw, kd]; output extent per axis
// is (in - 1) * stride + kernel. Requires kernel >= stride on every axis.
template <typename T>
Tensor<T> deconv3d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                   Extent3 stride);

// Normalizes over the last axis.
template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5));

// Exact form x * Phi(x).
template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x);

// Along the last axis, max-subtracted.
template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x);

// Toroidal roll of the three spatial axes of [N, C, H, W, D]: element at
// position p moves to (p + offset) mod extent. Negative offsets allowed.
template <typename T>
Tensor<T> cyclic_shift(Tape<T>& tape, const Tensor<T>& x, Extent3 offsets);

// [N, C, H, W, D] <-> [N, H, W, D, C].
template <typename T>
Tensor<T> to_channels_last(Tape<T>& tape, const Tensor<T>& x);
template <typename T>
Tensor<T> to_channels_first(Tape<T>& tape, const Tensor<T>& x);

// Treats x as rows of `row_width` values. Output row r copies input row
// index[r], or is zero when index[r] < 0. The output has `out_shape`, whose
// element count must be index.size() * row_width.
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, std::int64_t row_width,
                      std::span<const std::int64_t> index, Shape out_shape);

// Keeps the leading corner [0, extents) of the spatial axes of [N,C,H,W,D].
template <typename T>
Tensor<T> crop(Tape<T>& tape, const Tensor<T>& x, Extent3 extents);

// logits: [B, heads, n, n]; mask: [V, n, n] constant with B a multiple of V.
// Batch b receives mask[b mod V].
template <typename T>
Tensor<T> add_mask(Tape<T>& tape, const Tensor<T>& logits, const Tensor<T>& mask);

// Columns [begin, end) of the last axis.
template <typename T>
Tensor<T> slice_last(Tape<T>& tape, const Tensor<T>& x, std::int64_t begin, std::int64_t end);

// [B, n, heads * d] -> [B, heads, n, d] and back.
template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::int64_t heads);
template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x);

// Output extent of a strided convolution along one axis.
constexpr std::int64_t conv_out_extent(std::int64_t in, std::int64_t kernel, std::int64_t stride,
                                       std::int64_t pad) {
  const std::int64_t span = in + 2 * pad - kernel;
  return span < 0 ? 0 : span / stride + 1;
}

}  // namespace nnformer::ops
