#include "nnformer/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "nnformer/errors.hpp"
#include "nnformer/ops.hpp"

namespace nnformer::train {
namespace {

template <typename T>
using StoragePtr = std::shared_ptr<TensorStorage<T>>;

struct Layout {
  std::int64_t batch = 0;
  std::int64_t classes = 0;
  std::int64_t voxels = 0;
};

template <typename T>
Layout check_inputs(std::string_view op, const Tensor<T>& logits, const LabelBatch& labels) {
  if (logits.rank() != 5) {
    throw DimensionError(std::string(op) + ": logits must be [N, K, H, W, D], got " + to_string(logits.shape()));
  }
  const Shape& s = logits.shape();
  if (s[0] != labels.batch || Extent3{s[2], s[3], s[4]} != labels.extents ||
      static_cast<std::int64_t>(labels.values.size()) != s[0] * s[2] * s[3] * s[4]) {
    throw DimensionError(std::string(op) + ": logits " + to_string(s) + " do not match labels of batch " +
                         std::to_string(labels.batch) + " and extents " + to_string(labels.extents));
  }
  const Layout l{s[0], s[1], s[2] * s[3] * s[4]};
  for (std::int32_t v : labels.values) {
    if (v < 0 || v >= l.classes) {
      throw DataError(std::string(op) + ": label " + std::to_string(v) + " outside [0, " +
                      std::to_string(l.classes) + ")");
    }
  }
  return l;
}

// Channel softmax of an [N, K, V] block, same layout.
template <typename T>
std::vector<T> channel_softmax(const Tensor<T>& logits, const Layout& l) {
  std::vector<T> p(static_cast<std::size_t>(logits.numel()));
  const auto x = logits.data();
  for (std::int64_t n = 0; n < l.batch; ++n) {
    const std::int64_t base = n * l.classes * l.voxels;
    for (std::int64_t v = 0; v < l.voxels; ++v) {
      T m = x[base + v];
      for (std::int64_t k = 1; k < l.classes; ++k) m = std::max(m, x[base + k * l.voxels + v]);
      T z = 0;
      for (std::int64_t k = 0; k < l.classes; ++k) {
        const T e = std::exp(x[base + k * l.voxels + v] - m);
        p[base + k * l.voxels + v] = e;
        z += e;
      }
      for (std::int64_t k = 0; k < l.classes; ++k) p[base + k * l.voxels + v] /= z;
    }
  }
  return p;
}

}  // namespace

template <typename T>
Tensor<T> ce_loss(Tape<T>& tape, const Tensor<T>& logits, const LabelBatch& labels) {
  const Layout l = check_inputs("ce_loss", logits, labels);
  std::vector<T> p = channel_softmax(logits, l);
  const auto x = logits.data();
  double total = 0.0;
  for (std::int64_t n = 0; n < l.batch; ++n) {
    const std::int64_t base = n * l.classes * l.voxels;
    for (std::int64_t v = 0; v < l.voxels; ++v) {
      T m = x[base + v];
      for (std::int64_t k = 1; k < l.classes; ++k) m = std::max(m, x[base + k * l.voxels + v]);
      T z = 0;
      for (std::int64_t k = 0; k < l.classes; ++k) z += std::exp(x[base + k * l.voxels + v] - m);
      const std::int32_t y = labels.values[n * l.voxels + v];
      total += static_cast<double>(m + std::log(z) - x[base + y * l.voxels + v]);
    }
  }
  const double count = static_cast<double>(l.batch * l.voxels);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / count));
  if (tape.needs_grad(logits)) {
    out.set_requires_grad(true);
    StoragePtr<T> sx = logits.storage(), so = out.storage();
    tape.push("ce_loss", so,
              [sx, so, l, count, p = std::move(p), y = labels.values] {
                const T g = so->grad[0] / static_cast<T>(count);
                auto gx = sx->grad_buffer();
                for (std::int64_t n = 0; n < l.batch; ++n) {
                  const std::int64_t base = n * l.classes * l.voxels;
                  for (std::int64_t v = 0; v < l.voxels; ++v) {
                    const std::int32_t t = y[n * l.voxels + v];
                    for (std::int64_t k = 0; k < l.classes; ++k) {
                      const std::int64_t i = base + k * l.voxels + v;
                      gx[i] += g * (p[i] - (k == t ? T(1) : T(0)));
                    }
                  }
                }
              });
  }
  return out;
}

template <typename T>
Tensor<T> dice_loss(Tape<T>& tape, const Tensor<T>& logits, const LabelBatch& labels, double eps) {
  if (!(eps > 0.0)) throw UsageError("dice_loss: eps must be positive");
  const Layout l = check_inputs("dice_loss", logits, labels);
  const std::vector<T> p = channel_softmax(logits, l);
  const std::int64_t first = l.classes > 1 ? 1 : 0;
  const auto nfg = static_cast<double>(l.classes - first);
  // Per class: intersection, prediction mass, reference mass.
  std::vector<double> inter(l.classes, 0.0), pmass(l.classes, 0.0), gmass(l.classes, 0.0);
  for (std::int64_t n = 0; n < l.batch; ++n) {
    const std::int64_t base = n * l.classes * l.voxels;
    for (std::int64_t v = 0; v < l.voxels; ++v) {
      const std::int32_t y = labels.values[n * l.voxels + v];
      gmass[y] += 1.0;
      inter[y] += static_cast<double>(p[base + y * l.voxels + v]);
      for (std::int64_t k = 0; k < l.classes; ++k) pmass[k] += static_cast<double>(p[base + k * l.voxels + v]);
    }
  }
  double mean = 0.0;
  for (std::int64_t k = first; k < l.classes; ++k) {
    mean += (2.0 * inter[k] + eps) / (pmass[k] + gmass[k] + eps);
  }
  mean /= nfg;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(1.0 - mean));
  if (tape.needs_grad(logits)) {
    out.set_requires_grad(true);
    // d loss / d p_k(v) = -(2 g_k(v) S_k - (2 I_k + eps)) / (nfg S_k^2), S_k = P_k + G_k + eps.
    std::vector<double> a(l.classes, 0.0), b(l.classes, 0.0);
    for (std::int64_t k = first; k < l.classes; ++k) {
      const double s = pmass[k] + gmass[k] + eps;
      a[k] = -2.0 / (nfg * s);
      b[k] = (2.0 * inter[k] + eps) / (nfg * s * s);
    }
    StoragePtr<T> sx = logits.storage(), so = out.storage();
    tape.push("dice_loss", so, [sx, so, l, a = std::move(a), b = std::move(b), p, y = labels.values] {
      const double g = static_cast<double>(so->grad[0]);
      auto gx = sx->grad_buffer();
      std::vector<double> dp(l.classes);
      for (std::int64_t n = 0; n < l.batch; ++n) {
        const std::int64_t base = n * l.classes * l.voxels;
        for (std::int64_t v = 0; v < l.voxels; ++v) {
          const std::int32_t t = y[n * l.voxels + v];
          double dot = 0.0;
          for (std::int64_t k = 0; k < l.classes; ++k) {
            dp[k] = b[k] + (k == t ? a[k] : 0.0);
            dot += dp[k] * static_cast<double>(p[base + k * l.voxels + v]);
          }
          for (std::int64_t k = 0; k < l.classes; ++k) {
            const std::int64_t i = base + k * l.voxels + v;
            gx[i] += static_cast<T>(g * static_cast<double>(p[i]) * (dp[k] - dot));
          }
        }
      }
    });
  }
  return out;
}

LabelBatch downsample_labels(const LabelBatch& labels, Extent3 target) {
  for (std::size_t a = 0; a < 3; ++a) {
    if (target[a] <= 0 || target[a] > labels.extents[a]) {
      throw UsageError("downsample_labels: cannot resample " + to_string(labels.extents) + " to " +
                       to_string(target));
    }
  }
  if (target == labels.extents) return labels;
  const Extent3& in = labels.extents;
  LabelBatch out{labels.batch, target, {}};
  out.values.resize(static_cast<std::size_t>(labels.batch * target[0] * target[1] * target[2]));
  std::size_t o = 0;
  for (std::int64_t n = 0; n < labels.batch; ++n) {
    for (std::int64_t i = 0; i < target[0]; ++i) {
      const std::int64_t si = i * in[0] / target[0];
      for (std::int64_t j = 0; j < target[1]; ++j) {
        const std::int64_t sj = j * in[1] / target[1];
        for (std::int64_t k = 0; k < target[2]; ++k) {
          const std::int64_t sk = k * in[2] / target[2];
          out.values[o++] = labels.values[((n * in[0] + si) * in[1] + sj) * in[2] + sk];
        }
      }
    }
  }
  return out;
}

DeepSupervisionWeights DeepSupervisionWeights::standard() {
  const double full = 1.0 / (1.0 + 0.5 + 0.25);
  return {full, full / 2.0, full / 4.0};
}

template <typename T>
Tensor<T> total_loss(Tape<T>& tape, const net::ModelOutput<T>& outputs, const LabelBatch& labels,
                     const DeepSupervisionWeights& weights) {
  const std::array<std::pair<const Tensor<T>*, double>, 3> terms{{
      {&outputs.logits_full, weights.full},
      {&outputs.logits_mid, weights.mid},
      {&outputs.logits_low, weights.low},
  }};
  Tensor<T> total;
  for (const auto& [logits, alpha] : terms) {
    if (alpha == 0.0) continue;
    const Shape& s = logits->shape();
    const LabelBatch target = downsample_labels(labels, Extent3{s[2], s[3], s[4]});
    Tensor<T> term = ops::add(tape, ce_loss(tape, *logits, target), dice_loss(tape, *logits, target));
    term = ops::scale(tape, term, static_cast<T>(alpha));
    total = total.defined() ? ops::add(tape, total, term) : term;
  }
  if (!total.defined()) throw UsageError("total_loss: every deep-supervision weight is zero");
  return total;
}

#define NNFORMER_INSTANTIATE_LOSSES(T)                                                         \
  template Tensor<T> ce_loss(Tape<T>&, const Tensor<T>&, const LabelBatch&);                   \
  template Tensor<T> dice_loss(Tape<T>&, const Tensor<T>&, const LabelBatch&, double);         \
  template Tensor<T> total_loss(Tape<T>&, const net::ModelOutput<T>&, const LabelBatch&,       \
                                const DeepSupervisionWeights&);

NNFORMER_INSTANTIATE_LOSSES(float)
NNFORMER_INSTANTIATE_LOSSES(double)

}  // namespace nnformer::train
