#include "nnformer/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "nnformer/errors.hpp"

namespace nnformer::ops {
namespace {

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

template <typename T>
void require_same_shape(std::string_view op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes " + to_string(a.shape()) + " and " + to_string(b.shape()) +
                         " differ");
  }
}

template <typename T>
void require_rank(std::string_view op, const Tensor<T>& x, std::int64_t rank) {
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         to_string(x.shape()));
  }
}

template <typename T>
void accumulate(std::span<T> dst, std::span<const T> src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

// C (m x n) += op(A) * op(B) where op(A) is m x k and op(B) is k x n.
template <typename T>
void gemm(const T* a, const T* b, T* c, std::int64_t m, std::int64_t k, std::int64_t n, bool trans_a,
          bool trans_b) {
  if (!trans_a && !trans_b) {
    for (std::int64_t i = 0; i < m; ++i) {
      T* crow = c + i * n;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = a[i * k + p];
        const T* brow = b + p * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else if (!trans_a && trans_b) {
    for (std::int64_t i = 0; i < m; ++i) {
      const T* arow = a + i * k;
      for (std::int64_t j = 0; j < n; ++j) {
        const T* brow = b + j * k;
        T s = 0;
        for (std::int64_t p = 0; p < k; ++p) s += arow[p] * brow[p];
        c[i * n + j] += s;
      }
    }
  } else if (trans_a && !trans_b) {
    for (std::int64_t p = 0; p < k; ++p) {
      const T* arow = a + p * m;
      const T* brow = b + p * n;
      for (std::int64_t i = 0; i < m; ++i) {
        const T av = arow[i];
        T* crow = c + i * n;
        for (std::int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  } else {
    for (std::int64_t i = 0; i < m; ++i) {
      for (std::int64_t j = 0; j < n; ++j) {
        T s = 0;
        for (std::int64_t p = 0; p < k; ++p) s += a[p * m + i] * b[j * k + p];
        c[i * n + j] += s;
      }
    }
  }
}

// Geometry shared by the convolution kernels. "in" is the correlation
// input and "out" its output.
struct ConvGeometry {
  std::int64_t batch = 0;
  std::int64_t c_in = 0;
  std::int64_t c_out = 0;
  Extent3 in{};
  Extent3 out{};
  Extent3 kernel{};
  Extent3 stride{};
  Extent3 pad{};

  std::int64_t in_volume() const { return in[0] * in[1] * in[2]; }
  std::int64_t out_volume() const { return out[0] * out[1] * out[2]; }
  std::int64_t taps() const { return kernel[0] * kernel[1] * kernel[2]; }
};

// Range [lo, hi) of output indices o with 0 <= o*s - p + k < n.
inline void valid_range(std::int64_t n, std::int64_t out, std::int64_t s, std::int64_t p, std::int64_t k,
                        std::int64_t& lo, std::int64_t& hi) {
  const std::int64_t off = k - p;
  // o*s + off >= 0  ->  o >= ceil(-off / s)
  lo = off >= 0 ? 0 : (-off + s - 1) / s;
  // o*s + off <= n - 1  ->  o <= floor((n - 1 - off) / s)
  const std::int64_t top = n - 1 - off;
  hi = top < 0 ? 0 : std::min(out, top / s + 1);
  if (lo > hi) lo = hi;
}

// The three correlation kernels below iterate over the same index set
// {(o, k) : i = o*s - p + k in range}; `Visit` receives matching row
// pointers for the innermost axis.
template <typename Visit>
void for_each_tap_row(const ConvGeometry& g, Visit&& visit) {
  for (std::int64_t k0 = 0; k0 < g.kernel[0]; ++k0) {
    std::int64_t lo0, hi0;
    valid_range(g.in[0], g.out[0], g.stride[0], g.pad[0], k0, lo0, hi0);
    for (std::int64_t k1 = 0; k1 < g.kernel[1]; ++k1) {
      std::int64_t lo1, hi1;
      valid_range(g.in[1], g.out[1], g.stride[1], g.pad[1], k1, lo1, hi1);
      for (std::int64_t k2 = 0; k2 < g.kernel[2]; ++k2) {
        std::int64_t lo2, hi2;
        valid_range(g.in[2], g.out[2], g.stride[2], g.pad[2], k2, lo2, hi2);
        if (lo2 >= hi2) continue;
        const std::int64_t tap = (k0 * g.kernel[1] + k1) * g.kernel[2] + k2;
        for (std::int64_t o0 = lo0; o0 < hi0; ++o0) {
          const std::int64_t i0 = o0 * g.stride[0] - g.pad[0] + k0;
          for (std::int64_t o1 = lo1; o1 < hi1; ++o1) {
            const std::int64_t i1 = o1 * g.stride[1] - g.pad[1] + k1;
            const std::int64_t out_row = (o0 * g.out[1] + o1) * g.out[2];
            const std::int64_t in_row = (i0 * g.in[1] + i1) * g.in[2] - g.pad[2] + k2;
            visit(tap, out_row, in_row, lo2, hi2);
          }
        }
      }
    }
  }
}

// y[n, co, o] += sum_{ci, k} w[co, ci, k] * x[n, ci, o*s - p + k]
template <typename T>
void correlate(const ConvGeometry& g, const T* x, const T* w, T* y) {
  const std::int64_t s2 = g.stride[2];
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t co = 0; co < g.c_out; ++co) {
      T* yp = y + (n * g.c_out + co) * g.out_volume();
      for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
        const T* xp = x + (n * g.c_in + ci) * g.in_volume();
        const T* wp = w + (co * g.c_in + ci) * g.taps();
        for_each_tap_row(g, [&](std::int64_t tap, std::int64_t out_row, std::int64_t in_row, std::int64_t lo,
                                std::int64_t hi) {
          const T wv = wp[tap];
          T* yr = yp + out_row;
          const T* xr = xp + in_row;
          if (s2 == 1) {
            for (std::int64_t o = lo; o < hi; ++o) yr[o] += wv * xr[o];
          } else {
            for (std::int64_t o = lo; o < hi; ++o) yr[o] += wv * xr[o * s2];
          }
        });
      }
    }
  }
}

// x_grad[n, ci, o*s - p + k] += w[co, ci, k] * y_grad[n, co, o]
template <typename T>
void correlate_adjoint_input(const ConvGeometry& g, const T* gy, const T* w, T* gx) {
  const std::int64_t s2 = g.stride[2];
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
      T* gxp = gx + (n * g.c_in + ci) * g.in_volume();
      for (std::int64_t co = 0; co < g.c_out; ++co) {
        const T* gyp = gy + (n * g.c_out + co) * g.out_volume();
        const T* wp = w + (co * g.c_in + ci) * g.taps();
        for_each_tap_row(g, [&](std::int64_t tap, std::int64_t out_row, std::int64_t in_row, std::int64_t lo,
                                std::int64_t hi) {
          const T wv = wp[tap];
          const T* gyr = gyp + out_row;
          T* gxr = gxp + in_row;
          if (s2 == 1) {
            for (std::int64_t o = lo; o < hi; ++o) gxr[o] += wv * gyr[o];
          } else {
            for (std::int64_t o = lo; o < hi; ++o) gxr[o * s2] += wv * gyr[o];
          }
        });
      }
    }
  }
}

// w_grad[co, ci, k] += sum_{n, o} y_grad[n, co, o] * x[n, ci, o*s - p + k]
template <typename T>
void correlate_adjoint_weight(const ConvGeometry& g, const T* x, const T* gy, T* gw) {
  const std::int64_t s2 = g.stride[2];
  for (std::int64_t co = 0; co < g.c_out; ++co) {
    for (std::int64_t ci = 0; ci < g.c_in; ++ci) {
      T* gwp = gw + (co * g.c_in + ci) * g.taps();
      for (std::int64_t n = 0; n < g.batch; ++n) {
        const T* xp = x + (n * g.c_in + ci) * g.in_volume();
        const T* gyp = gy + (n * g.c_out + co) * g.out_volume();
        for_each_tap_row(g, [&](std::int64_t tap, std::int64_t out_row, std::int64_t in_row, std::int64_t lo,
                                std::int64_t hi) {
          const T* gyr = gyp + out_row;
          const T* xr = xp + in_row;
          T s = 0;
          if (s2 == 1) {
            for (std::int64_t o = lo; o < hi; ++o) s += gyr[o] * xr[o];
          } else {
            for (std::int64_t o = lo; o < hi; ++o) s += gyr[o] * xr[o * s2];
          }
          gwp[tap] += s;
        });
      }
    }
  }
}

template <typename T>
void add_channel_bias(T* y, const T* bias, std::int64_t batch, std::int64_t channels, std::int64_t volume) {
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      T* p = y + (n * channels + c) * volume;
      std::fill(p, p + volume, bias[c]);
    }
  }
}

template <typename T>
void channel_bias_grad(const T* gy, T* gb, std::int64_t batch, std::int64_t channels, std::int64_t volume) {
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      const T* p = gy + (n * channels + c) * volume;
      T s = 0;
      for (std::int64_t v = 0; v < volume; ++v) s += p[v];
      gb[c] += s;
    }
  }
}

template <typename T>
Extent3 spatial(const Tensor<T>& x) {
  return {x.dim(2), x.dim(3), x.dim(4)};
}

}  // namespace

template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b, MatmulOptions opts) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands need rank >= 2, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
  }
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const std::int64_t m = as[as.size() - 2];
  const std::int64_t k = as[as.size() - 1];
  const std::int64_t bk = opts.transpose_b ? bs[bs.size() - 1] : bs[bs.size() - 2];
  const std::int64_t n = opts.transpose_b ? bs[bs.size() - 2] : bs[bs.size() - 1];
  const Shape a_batch(as.begin(), as.end() - 2);
  const Shape b_batch(bs.begin(), bs.end() - 2);
  const bool shared_b = b_batch.empty();
  if (k != bk || (!shared_b && a_batch != b_batch)) {
    throw DimensionError("matmul: cannot multiply " + to_string(as) + " by " + to_string(bs) +
                         (opts.transpose_b ? " (transposed)" : ""));
  }
  const std::int64_t batch = numel(a_batch);
  Shape out_shape = a_batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<T> out(out_shape);
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  T* cp = out.mutable_data().data();
  const std::int64_t b_stride = shared_b ? 0 : k * n;
  for (std::int64_t i = 0; i < batch; ++i) {
    gemm(ap + i * m * k, bp + i * b_stride, cp + i * m * n, m, k, n, false, opts.transpose_b);
  }
  tape.count(opts.mac_class, static_cast<std::uint64_t>(batch * m * k * n));

  if (tape.needs_grad(a, b)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.storage(), sb = b.storage(), so = out.storage();
    const bool tb = opts.transpose_b;
    tape.push("matmul", so, [sa, sb, so, batch, m, k, n, b_stride, tb] {
      const T* g = so->grad.data();
      if (sa->requires_grad) {
        T* ga = sa->grad_buffer().data();
        // dA = dC * op(B)^T
        for (std::int64_t i = 0; i < batch; ++i) {
          gemm(g + i * m * n, sb->data.data() + i * b_stride, ga + i * m * k, m, n, k, false, !tb);
        }
      }
      if (sb->requires_grad) {
        T* gb = sb->grad_buffer().data();
        for (std::int64_t i = 0; i < batch; ++i) {
          if (tb) {
            // dB (n x k) = dC^T * A
            gemm(g + i * m * n, sa->data.data() + i * m * k, gb + i * b_stride, n, m, k, true, false);
          } else {
            // dB (k x n) = A^T * dC
            gemm(sa->data.data() + i * m * k, g + i * m * n, gb + i * b_stride, k, m, n, true, false);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, MacClass mac_class) {
  if (w.rank() != 2) throw DimensionError("linear: weight must be a matrix, got " + to_string(w.shape()));
  Tensor<T> y;
  if (x.rank() == 1) {
    y = matmul(tape, reshape(tape, x, Shape{1, x.dim(0)}), w, {false, mac_class});
    y = reshape(tape, y, Shape{w.dim(1)});
  } else {
    y = matmul(tape, x, w, {false, mac_class});
  }
  return bias.defined() ? add_trailing(tape, y, bias) : y;
}

template <typename T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  Tensor<T> out(a.shape());
  auto y = out.mutable_data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  if (tape.needs_grad(a, b)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.storage(), sb = b.storage(), so = out.storage();
    tape.push("add", so, [sa, sb, so] {
      std::span<const T> g = so->grad;
      if (sa->requires_grad) accumulate(sa->grad_buffer(), g);
      if (sb->requires_grad) accumulate(sb->grad_buffer(), g);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_trailing(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (bs.size() > as.size() || !std::equal(bs.begin(), bs.end(), as.end() - static_cast<std::ptrdiff_t>(bs.size()))) {
    throw DimensionError("add_trailing: " + to_string(bs) + " is not a trailing shape of " + to_string(as));
  }
  const std::int64_t inner = b.numel();
  const std::int64_t outer = a.numel() / inner;
  Tensor<T> out(as);
  auto y = out.mutable_data();
  auto av = a.data();
  auto bv = b.data();
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t i = 0; i < inner; ++i) y[o * inner + i] = av[o * inner + i] + bv[i];
  }
  if (tape.needs_grad(a, b)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.storage(), sb = b.storage(), so = out.storage();
    tape.push("add_trailing", so, [sa, sb, so, outer, inner] {
      std::span<const T> g = so->grad;
      if (sa->requires_grad) accumulate(sa->grad_buffer(), g);
      if (sb->requires_grad) {
        auto gb = sb->grad_buffer();
        for (std::int64_t o = 0; o < outer; ++o) {
          for (std::int64_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  Tensor<T> out(a.shape());
  auto y = out.mutable_data();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  if (tape.needs_grad(a, b)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.storage(), sb = b.storage(), so = out.storage();
    tape.push("mul", so, [sa, sb, so] {
      const auto& g = so->grad;
      if (sa->requires_grad) {
        auto ga = sa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sb->data[i];
      }
      if (sb->requires_grad) {
        auto gb = sb->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * sa->data[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, T factor) {
  Tensor<T> out(a.shape());
  auto y = out.mutable_data();
  auto av = a.data();
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * factor;
  if (tape.needs_grad(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.storage(), so = out.storage();
    tape.push("scale", so, [sa, so, factor] {
      auto ga = sa->grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += so->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  T s = 0;
  for (T v : a.data()) s += v;
  Tensor<T> out = Tensor<T>::scalar(s);
  if (tape.needs_grad(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.storage(), so = out.storage();
    tape.push("sum", so, [sa, so] {
      const T g = so->grad[0];
      for (T& v : sa->grad_buffer()) v += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + to_string(a.shape()) + " cannot become " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (tape.needs_grad(a)) {
    out.set_requires_grad(true);
    StoragePtr<T> sa = a.storage(), so = out.storage();
    tape.push("reshape", so, [sa, so] { accumulate(sa->grad_buffer(), std::span<const T>(so->grad)); });
  }
  return out;
}

template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Conv3dOptions opts) {
  require_rank("conv3d input", x, 5);
  require_rank("conv3d weight", w, 5);
  if (w.dim(1) != x.dim(1)) {
    throw DimensionError("conv3d: weight " + to_string(w.shape()) + " expects " + std::to_string(w.dim(1)) +
                         " input channels, input is " + to_string(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(0))) {
    throw DimensionError("conv3d: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(w.shape()));
  }
  ConvGeometry g;
  g.batch = x.dim(0);
  g.c_in = x.dim(1);
  g.c_out = w.dim(0);
  g.in = spatial(x);
  g.kernel = {w.dim(2), w.dim(3), w.dim(4)};
  g.stride = opts.stride;
  g.pad = opts.padding;
  static constexpr const char* kAxis[] = {"H", "W", "D"};
  for (int a = 0; a < 3; ++a) {
    if (g.stride[a] < 1 || g.pad[a] < 0) {
      throw ConfigError(std::string("conv3d: invalid stride/padding on axis ") + kAxis[a]);
    }
    g.out[a] = conv_out_extent(g.in[a], g.kernel[a], g.stride[a], g.pad[a]);
    if (g.out[a] < 1) {
      throw ConfigError(std::string("conv3d: non-positive output extent on axis ") + kAxis[a] + " (input " +
                        std::to_string(g.in[a]) + ", kernel " + std::to_string(g.kernel[a]) + ", stride " +
                        std::to_string(g.stride[a]) + ", padding " + std::to_string(g.pad[a]) + ")");
    }
  }
  Tensor<T> out(Shape{g.batch, g.c_out, g.out[0], g.out[1], g.out[2]});
  T* y = out.mutable_data().data();
  if (bias.defined()) add_channel_bias(y, bias.data().data(), g.batch, g.c_out, g.out_volume());
  correlate(g, x.data().data(), w.data().data(), y);
  tape.count(MacClass::kConvolution,
             static_cast<std::uint64_t>(g.batch * g.c_out * g.out_volume() * g.c_in * g.taps()));

  if (tape.needs_grad(x, w, bias)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), sw = w.storage(), so = out.storage();
    StoragePtr<T> sb = bias.defined() ? bias.storage() : nullptr;
    tape.push("conv3d", so, [sx, sw, sb, so, g] {
      const T* gy = so->grad.data();
      if (sx->requires_grad) correlate_adjoint_input(g, gy, sw->data.data(), sx->grad_buffer().data());
      if (sw->requires_grad) correlate_adjoint_weight(g, sx->data.data(), gy, sw->grad_buffer().data());
      if (sb && sb->requires_grad) channel_bias_grad(gy, sb->grad_buffer().data(), g.batch, g.c_out, g.out_volume());
    });
  }
  return out;
}

template <typename T>
Tensor<T> deconv3d(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, Extent3 stride) {
  require_rank("deconv3d input", x, 5);
  require_rank("deconv3d weight", w, 5);
  if (w.dim(0) != x.dim(1)) {
    throw DimensionError("deconv3d: weight " + to_string(w.shape()) + " expects " + std::to_string(w.dim(0)) +
                         " input channels, input is " + to_string(x.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != w.dim(1))) {
    throw DimensionError("deconv3d: bias " + to_string(bias.shape()) + " does not match weight " +
                         to_string(w.shape()));
  }
  // Viewed as the adjoint of a correlation whose output is x and whose
  // input is the deconvolution result.
  ConvGeometry g;
  g.batch = x.dim(0);
  g.c_out = x.dim(1);
  g.c_in = w.dim(1);
  g.out = spatial(x);
  g.kernel = {w.dim(2), w.dim(3), w.dim(4)};
  g.stride = stride;
  g.pad = {0, 0, 0};
  static constexpr const char* kAxis[] = {"H", "W", "D"};
  for (int a = 0; a < 3; ++a) {
    if (stride[a] < 1) throw ConfigError(std::string("deconv3d: stride must be positive on axis ") + kAxis[a]);
    if (g.kernel[a] < stride[a]) {
      throw ConfigError(std::string("deconv3d: kernel ") + std::to_string(g.kernel[a]) + " smaller than stride " +
                        std::to_string(stride[a]) + " on axis " + kAxis[a] + " leaves voxels unwritten");
    }
    g.in[a] = (g.out[a] - 1) * stride[a] + g.kernel[a];
  }
  Tensor<T> out(Shape{g.batch, g.c_in, g.in[0], g.in[1], g.in[2]});
  T* y = out.mutable_data().data();
  if (bias.defined()) add_channel_bias(y, bias.data().data(), g.batch, g.c_in, g.in_volume());
  correlate_adjoint_input(g, x.data().data(), w.data().data(), y);
  tape.count(MacClass::kConvolution,
             static_cast<std::uint64_t>(g.batch * g.c_out * g.out_volume() * g.c_in * g.taps()));

  if (tape.needs_grad(x, w, bias)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), sw = w.storage(), so = out.storage();
    StoragePtr<T> sb = bias.defined() ? bias.storage() : nullptr;
    tape.push("deconv3d", so, [sx, sw, sb, so, g] {
      const T* gy = so->grad.data();
      if (sx->requires_grad) correlate(g, gy, sw->data.data(), sx->grad_buffer().data());
      if (sw->requires_grad) correlate_adjoint_weight(g, gy, sx->data.data(), sw->grad_buffer().data());
      if (sb && sb->requires_grad) channel_bias_grad(gy, sb->grad_buffer().data(), g.batch, g.c_in, g.in_volume());
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (!(eps > T(0))) throw UsageError("layer_norm: eps must be positive");
  const std::int64_t c = x.dim(-1);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("layer_norm: gamma/beta " + to_string(gamma.shape()) + "/" + to_string(beta.shape()) +
                         " do not match channel axis of " + to_string(x.shape()));
  }
  const std::int64_t rows = x.numel() / c;
  Tensor<T> out(x.shape());
  std::vector<T> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  const T* xp = x.data().data();
  const T* gp = gamma.data().data();
  const T* bp = beta.data().data();
  T* yp = out.mutable_data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * c;
    T mean = 0;
    for (std::int64_t i = 0; i < c; ++i) mean += xr[i];
    mean /= static_cast<T>(c);
    T var = 0;
    for (std::int64_t i = 0; i < c; ++i) var += (xr[i] - mean) * (xr[i] - mean);
    var /= static_cast<T>(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = rs;
    for (std::int64_t i = 0; i < c; ++i) {
      const T h = (xr[i] - mean) * rs;
      xhat[static_cast<std::size_t>(r * c + i)] = h;
      yp[r * c + i] = h * gp[i] + bp[i];
    }
  }
  if (tape.needs_grad(x, gamma, beta)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), sg = gamma.storage(), sbeta = beta.storage(), so = out.storage();
    tape.push("layer_norm", so,
              [sx, sg, sbeta, so, rows, c, xhat = std::move(xhat), rstd = std::move(rstd)] {
                const T* gy = so->grad.data();
                if (sg->requires_grad) {
                  T* gg = sg->grad_buffer().data();
                  for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t i = 0; i < c; ++i) gg[i] += gy[r * c + i] * xhat[static_cast<std::size_t>(r * c + i)];
                  }
                }
                if (sbeta->requires_grad) {
                  T* gb = sbeta->grad_buffer().data();
                  for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t i = 0; i < c; ++i) gb[i] += gy[r * c + i];
                  }
                }
                if (sx->requires_grad) {
                  T* gx = sx->grad_buffer().data();
                  const T* gamma_p = sg->data.data();
                  const T inv_c = T(1) / static_cast<T>(c);
                  for (std::int64_t r = 0; r < rows; ++r) {
                    T mean_g = 0;
                    T mean_gh = 0;
                    for (std::int64_t i = 0; i < c; ++i) {
                      const T gi = gy[r * c + i] * gamma_p[i];
                      mean_g += gi;
                      mean_gh += gi * xhat[static_cast<std::size_t>(r * c + i)];
                    }
                    mean_g *= inv_c;
                    mean_gh *= inv_c;
                    const T rs = rstd[static_cast<std::size_t>(r)];
                    for (std::int64_t i = 0; i < c; ++i) {
                      const T gi = gy[r * c + i] * gamma_p[i];
                      gx[r * c + i] += rs * (gi - mean_g - xhat[static_cast<std::size_t>(r * c + i)] * mean_gh);
                    }
                  }
                }
              });
  }
  return out;
}

template <typename T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto y = out.mutable_data();
  auto xv = x.data();
  const T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] * T(0.5) * (T(1) + std::erf(xv[i] * inv_sqrt2));
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("gelu", so, [sx, so, inv_sqrt2] {
      auto gx = sx->grad_buffer();
      const T inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<T>;
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const T v = sx->data[i];
        const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
        const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
        gx[i] += so->grad[i] * (cdf + v * pdf);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(Tape<T>& tape, const Tensor<T>& x) {
  const std::int64_t n = x.dim(-1);
  const std::int64_t rows = x.numel() / n;
  Tensor<T> out(x.shape());
  const T* xp = x.data().data();
  T* yp = out.mutable_data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* xr = xp + r * n;
    T* yr = yp + r * n;
    const T mx = *std::max_element(xr, xr + n);
    T total = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      total += yr[i];
    }
    const T inv = T(1) / total;
    for (std::int64_t i = 0; i < n; ++i) yr[i] *= inv;
  }
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("softmax", so, [sx, so, rows, n] {
      T* gx = sx->grad_buffer().data();
      const T* y = so->data.data();
      const T* gy = so->grad.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        T dot = 0;
        for (std::int64_t i = 0; i < n; ++i) dot += y[r * n + i] * gy[r * n + i];
        for (std::int64_t i = 0; i < n; ++i) gx[r * n + i] += y[r * n + i] * (gy[r * n + i] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> cyclic_shift(Tape<T>& tape, const Tensor<T>& x, Extent3 offsets) {
  require_rank("cyclic_shift", x, 5);
  const Extent3 e = spatial(x);
  const std::int64_t planes = x.dim(0) * x.dim(1);
  const std::int64_t vol = e[0] * e[1] * e[2];
  Extent3 o{};
  for (int a = 0; a < 3; ++a) o[a] = ((offsets[a] % e[a]) + e[a]) % e[a];
  // dst[(p + o) mod e] = src[p]
  auto roll = [e, o, planes, vol](const T* src, T* dst, bool adjoint) {
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      const T* s = src + pl * vol;
      T* d = dst + pl * vol;
      for (std::int64_t h = 0; h < e[0]; ++h) {
        const std::int64_t hh = (h + o[0]) % e[0];
        for (std::int64_t w = 0; w < e[1]; ++w) {
          const std::int64_t ww = (w + o[1]) % e[1];
          for (std::int64_t z = 0; z < e[2]; ++z) {
            const std::int64_t zz = (z + o[2]) % e[2];
            const std::int64_t from = (h * e[1] + w) * e[2] + z;
            const std::int64_t to = (hh * e[1] + ww) * e[2] + zz;
            if (adjoint) {
              d[from] += s[to];
            } else {
              d[to] = s[from];
            }
          }
        }
      }
    }
  };
  Tensor<T> out(x.shape());
  roll(x.data().data(), out.mutable_data().data(), false);
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("cyclic_shift", so, [sx, so, roll] { roll(so->grad.data(), sx->grad_buffer().data(), true); });
  }
  return out;
}

namespace {

// Moves axis 1 of a 5-D tensor to the end (forward) or back (inverse).
template <typename T>
void permute_channels(const T* src, T* dst, std::int64_t batch, std::int64_t channels, std::int64_t vol,
                      bool to_last, bool accumulate_dst) {
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t c = 0; c < channels; ++c) {
      for (std::int64_t v = 0; v < vol; ++v) {
        const std::int64_t first = (n * channels + c) * vol + v;
        const std::int64_t last = (n * vol + v) * channels + c;
        const std::int64_t from = to_last ? first : last;
        const std::int64_t to = to_last ? last : first;
        if (accumulate_dst) {
          dst[to] += src[from];
        } else {
          dst[to] = src[from];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> to_channels_last(Tape<T>& tape, const Tensor<T>& x) {
  require_rank("to_channels_last", x, 5);
  const std::int64_t n = x.dim(0), c = x.dim(1);
  const std::int64_t vol = x.dim(2) * x.dim(3) * x.dim(4);
  Tensor<T> out(Shape{n, x.dim(2), x.dim(3), x.dim(4), c});
  permute_channels(x.data().data(), out.mutable_data().data(), n, c, vol, true, false);
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("to_channels_last", so, [sx, so, n, c, vol] {
      permute_channels(so->grad.data(), sx->grad_buffer().data(), n, c, vol, false, true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> to_channels_first(Tape<T>& tape, const Tensor<T>& x) {
  require_rank("to_channels_first", x, 5);
  const std::int64_t n = x.dim(0), c = x.dim(4);
  const std::int64_t vol = x.dim(1) * x.dim(2) * x.dim(3);
  Tensor<T> out(Shape{n, c, x.dim(1), x.dim(2), x.dim(3)});
  permute_channels(x.data().data(), out.mutable_data().data(), n, c, vol, false, false);
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("to_channels_first", so, [sx, so, n, c, vol] {
      permute_channels(so->grad.data(), sx->grad_buffer().data(), n, c, vol, true, true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, std::int64_t row_width, std::span<const std::int64_t> index,
                      Shape out_shape) {
  if (row_width < 1 || x.numel() % row_width != 0) {
    throw DimensionError("gather_rows: row width " + std::to_string(row_width) + " does not divide " +
                         to_string(x.shape()));
  }
  const auto rows = static_cast<std::int64_t>(index.size());
  if (numel(out_shape) != rows * row_width) {
    throw DimensionError("gather_rows: output shape " + to_string(out_shape) + " does not hold " +
                         std::to_string(rows) + " rows of " + std::to_string(row_width));
  }
  const std::int64_t in_rows = x.numel() / row_width;
  for (auto i : index) {
    if (i >= in_rows) throw std::logic_error("gather_rows: index out of range");
  }
  Tensor<T> out(std::move(out_shape));
  const T* xp = x.data().data();
  T* yp = out.mutable_data().data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t src = index[static_cast<std::size_t>(r)];
    if (src < 0) continue;
    std::copy_n(xp + src * row_width, row_width, yp + r * row_width);
  }
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    std::vector<std::int64_t> idx(index.begin(), index.end());
    tape.push("gather_rows", so, [sx, so, row_width, idx = std::move(idx)] {
      T* gx = sx->grad_buffer().data();
      const T* gy = so->grad.data();
      for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0) continue;
        T* dst = gx + idx[r] * row_width;
        const T* src = gy + static_cast<std::int64_t>(r) * row_width;
        for (std::int64_t j = 0; j < row_width; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> crop(Tape<T>& tape, const Tensor<T>& x, Extent3 extents) {
  require_rank("crop", x, 5);
  const Extent3 e = spatial(x);
  for (int a = 0; a < 3; ++a) {
    if (extents[a] < 1 || extents[a] > e[a]) {
      throw DimensionError("crop: target " + to_string(extents) + " does not fit inside " + to_string(e));
    }
  }
  if (extents == e) return x;
  const std::int64_t planes = x.dim(0) * x.dim(1);
  Tensor<T> out(Shape{x.dim(0), x.dim(1), extents[0], extents[1], extents[2]});
  auto copy = [e, extents, planes](const T* src, T* dst, bool adjoint) {
    for (std::int64_t pl = 0; pl < planes; ++pl) {
      for (std::int64_t h = 0; h < extents[0]; ++h) {
        for (std::int64_t w = 0; w < extents[1]; ++w) {
          const std::int64_t big = ((pl * e[0] + h) * e[1] + w) * e[2];
          const std::int64_t small = ((pl * extents[0] + h) * extents[1] + w) * extents[2];
          for (std::int64_t z = 0; z < extents[2]; ++z) {
            if (adjoint) {
              dst[big + z] += src[small + z];
            } else {
              dst[small + z] = src[big + z];
            }
          }
        }
      }
    }
  };
  copy(x.data().data(), out.mutable_data().data(), false);
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("crop", so, [sx, so, copy] { copy(so->grad.data(), sx->grad_buffer().data(), true); });
  }
  return out;
}

template <typename T>
Tensor<T> add_mask(Tape<T>& tape, const Tensor<T>& logits, const Tensor<T>& mask) {
  require_rank("add_mask logits", logits, 4);
  require_rank("add_mask mask", mask, 3);
  const std::int64_t batch = logits.dim(0), heads = logits.dim(1), n = logits.dim(2);
  const std::int64_t volumes = mask.dim(0);
  if (logits.dim(3) != n || mask.dim(1) != n || mask.dim(2) != n || batch % volumes != 0) {
    throw DimensionError("add_mask: mask " + to_string(mask.shape()) + " incompatible with logits " +
                         to_string(logits.shape()));
  }
  Tensor<T> out(logits.shape());
  const T* lp = logits.data().data();
  const T* mp = mask.data().data();
  T* yp = out.mutable_data().data();
  const std::int64_t nn = n * n;
  for (std::int64_t b = 0; b < batch; ++b) {
    const T* m = mp + (b % volumes) * nn;
    for (std::int64_t h = 0; h < heads; ++h) {
      const std::int64_t base = (b * heads + h) * nn;
      for (std::int64_t i = 0; i < nn; ++i) yp[base + i] = lp[base + i] + m[i];
    }
  }
  if (tape.needs_grad(logits)) {
    out.set_requires_grad(true);
    StoragePtr<T> sl = logits.storage(), so = out.storage();
    tape.push("add_mask", so, [sl, so] { accumulate(sl->grad_buffer(), std::span<const T>(so->grad)); });
  }
  return out;
}

template <typename T>
Tensor<T> slice_last(Tape<T>& tape, const Tensor<T>& x, std::int64_t begin, std::int64_t end) {
  const std::int64_t c = x.dim(-1);
  if (begin < 0 || end > c || begin >= end) {
    throw DimensionError("slice_last: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") outside last axis of " + to_string(x.shape()));
  }
  Shape shape = x.shape();
  shape.back() = end - begin;
  const std::int64_t rows = x.numel() / c;
  const std::int64_t width = end - begin;
  Tensor<T> out(std::move(shape));
  const T* xp = x.data().data();
  T* yp = out.mutable_data().data();
  for (std::int64_t r = 0; r < rows; ++r) std::copy_n(xp + r * c + begin, width, yp + r * width);
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("slice_last", so, [sx, so, rows, c, begin, width] {
      T* gx = sx->grad_buffer().data();
      const T* gy = so->grad.data();
      for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t j = 0; j < width; ++j) gx[r * c + begin + j] += gy[r * width + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> split_heads(Tape<T>& tape, const Tensor<T>& x, std::int64_t heads) {
  require_rank("split_heads", x, 3);
  const std::int64_t batch = x.dim(0), n = x.dim(1), c = x.dim(2);
  if (heads < 1 || c % heads != 0) {
    throw ConfigError("split_heads: " + std::to_string(c) + " channels do not split into " + std::to_string(heads) +
                      " heads");
  }
  const std::int64_t d = c / heads;
  Tensor<T> out(Shape{batch, heads, n, d});
  auto move = [batch, n, heads, d](const T* src, T* dst, bool adjoint) {
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t t = 0; t < n; ++t) {
        for (std::int64_t h = 0; h < heads; ++h) {
          const std::int64_t packed = ((b * n + t) * heads + h) * d;
          const std::int64_t split = ((b * heads + h) * n + t) * d;
          for (std::int64_t j = 0; j < d; ++j) {
            if (adjoint) {
              dst[packed + j] += src[split + j];
            } else {
              dst[split + j] = src[packed + j];
            }
          }
        }
      }
    }
  };
  move(x.data().data(), out.mutable_data().data(), false);
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("split_heads", so, [sx, so, move] { move(so->grad.data(), sx->grad_buffer().data(), true); });
  }
  return out;
}

template <typename T>
Tensor<T> merge_heads(Tape<T>& tape, const Tensor<T>& x) {
  require_rank("merge_heads", x, 4);
  const std::int64_t batch = x.dim(0), heads = x.dim(1), n = x.dim(2), d = x.dim(3);
  Tensor<T> out(Shape{batch, n, heads * d});
  auto move = [batch, n, heads, d](const T* src, T* dst, bool adjoint) {
    for (std::int64_t b = 0; b < batch; ++b) {
      for (std::int64_t h = 0; h < heads; ++h) {
        for (std::int64_t t = 0; t < n; ++t) {
          const std::int64_t split = ((b * heads + h) * n + t) * d;
          const std::int64_t packed = ((b * n + t) * heads + h) * d;
          for (std::int64_t j = 0; j < d; ++j) {
            if (adjoint) {
              dst[split + j] += src[packed + j];
            } else {
              dst[packed + j] = src[split + j];
            }
          }
        }
      }
    }
  };
  move(x.data().data(), out.mutable_data().data(), false);
  if (tape.needs_grad(x)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = x.storage(), so = out.storage();
    tape.push("merge_heads", so, [sx, so, move] { move(so->grad.data(), sx->grad_buffer().data(), true); });
  }
  return out;
}

#define NNFORMER_INSTANTIATE_OPS(T)                                                                          \
  template Tensor<T> matmul(Tape<T>&, const Tensor<T>&, const Tensor<T>&, MatmulOptions);                    \
  template Tensor<T> linear(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, MacClass);       \
  template Tensor<T> add(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_trailing(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> scale(Tape<T>&, const Tensor<T>&, T);                                                   \
  template Tensor<T> sum(Tape<T>&, const Tensor<T>&);                                                        \
  template Tensor<T> reshape(Tape<T>&, const Tensor<T>&, Shape);                                             \
  template Tensor<T> conv3d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Conv3dOptions);  \
  template Tensor<T> deconv3d(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Extent3);      \
  template Tensor<T> layer_norm(Tape<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);          \
  template Tensor<T> gelu(Tape<T>&, const Tensor<T>&);                                                       \
  template Tensor<T> softmax(Tape<T>&, const Tensor<T>&);                                                    \
  template Tensor<T> cyclic_shift(Tape<T>&, const Tensor<T>&, Extent3);                                      \
  template Tensor<T> to_channels_last(Tape<T>&, const Tensor<T>&);                                           \
  template Tensor<T> to_channels_first(Tape<T>&, const Tensor<T>&);                                          \
  template Tensor<T> gather_rows(Tape<T>&, const Tensor<T>&, std::int64_t, std::span<const std::int64_t>,    \
                                 Shape);                                                                     \
  template Tensor<T> crop(Tape<T>&, const Tensor<T>&, Extent3);                                              \
  template Tensor<T> add_mask(Tape<T>&, const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> slice_last(Tape<T>&, const Tensor<T>&, std::int64_t, std::int64_t);                     \
  template Tensor<T> split_heads(Tape<T>&, const Tensor<T>&, std::int64_t);                                  \
  template Tensor<T> merge_heads(Tape<T>&, const Tensor<T>&);

NNFORMER_INSTANTIATE_OPS(float)
NNFORMER_INSTANTIATE_OPS(double)

}  // namespace nnformer::ops
