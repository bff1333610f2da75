#include "nnformer/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "nnformer/errors.hpp"

namespace nnformer::train {
namespace {

std::int64_t voxels(const Extent3& e) { return e[0] * e[1] * e[2]; }

}  // namespace

void SyntheticParams::validate() const {
  for (std::int64_t e : crop) {
    if (e <= 0) throw ConfigError("synthetic: crop extents must be positive");
  }
  if (num_classes < 1) throw ConfigError("synthetic: num_classes must be at least 1");
  if (in_channels < 1) throw ConfigError("synthetic: in_channels must be at least 1");
  if (!(radius_min > 0.0 && radius_min <= radius_max && radius_max < 0.5)) {
    throw ConfigError("synthetic: radii must satisfy 0 < radius_min <= radius_max < 0.5");
  }
  if (!(noise_sigma >= 0.0)) throw ConfigError("synthetic: noise_sigma must be non-negative");
  if (max_attempts < 1) throw ConfigError("synthetic: max_attempts must be positive");
}

metrics::SegmentationMask SyntheticScan::mask(const metrics::Spacing& spacing) const {
  return {extents, label, spacing};
}

SyntheticScan gen_synthetic(std::uint64_t seed, const SyntheticParams& params) {
  params.validate();
  const Extent3& e = params.crop;
  const std::int64_t n = voxels(e);
  SyntheticScan scan;
  scan.seed = seed;
  scan.extents = e;
  scan.channels = params.in_channels;
  scan.label.assign(static_cast<std::size_t>(n), 0);

  CounterRng shapes = CounterRng(seed).split(0);
  std::vector<std::int64_t> cells;
  for (std::int32_t cls = 1; cls < params.num_classes; ++cls) {
    for (std::int64_t attempt = 0; attempt < params.max_attempts; ++attempt) {
      std::array<double, 3> radius{}, centre{};
      for (std::size_t a = 0; a < 3; ++a) {
        const double ext = static_cast<double>(e[a]);
        radius[a] = std::max(0.5, shapes.uniform(params.radius_min, params.radius_max) * ext);
        centre[a] = shapes.uniform(radius[a] - 0.5, ext - 0.5 - radius[a]);
      }
      cells.clear();
      bool clash = false;
      for (std::int64_t x = 0; x < e[0] && !clash; ++x) {
        for (std::int64_t y = 0; y < e[1] && !clash; ++y) {
          for (std::int64_t z = 0; z < e[2]; ++z) {
            const double dx = (static_cast<double>(x) - centre[0]) / radius[0];
            const double dy = (static_cast<double>(y) - centre[1]) / radius[1];
            const double dz = (static_cast<double>(z) - centre[2]) / radius[2];
            if (dx * dx + dy * dy + dz * dz > 1.0) continue;
            const std::int64_t i = (x * e[1] + y) * e[2] + z;
            if (scan.label[i] != 0) {
              clash = true;
              break;
            }
            cells.push_back(i);
          }
        }
      }
      if (clash || cells.empty()) continue;
      for (std::int64_t i : cells) scan.label[i] = cls;
      break;
    }
  }

  CounterRng noise = CounterRng(seed).split(1);
  scan.volume.resize(static_cast<std::size_t>(n * params.in_channels));
  for (std::int64_t c = 0; c < params.in_channels; ++c) {
    const double step = params.intensity_step * (1.0 + 0.5 * static_cast<double>(c));
    for (std::int64_t i = 0; i < n; ++i) {
      double v = step * static_cast<double>(scan.label[i]);
      if (params.noise_sigma > 0.0) v += params.noise_sigma * noise.normal();
      scan.volume[c * n + i] = static_cast<float>(v);
    }
  }
  return scan;
}

SyntheticScan mirror(const SyntheticScan& scan, int axis) {
  if (axis < 0 || axis > 2) throw UsageError("mirror: axis must be 0, 1 or 2");
  const Extent3& e = scan.extents;
  const std::int64_t n = voxels(e);
  SyntheticScan out = scan;
  for (std::int64_t x = 0; x < e[0]; ++x) {
    for (std::int64_t y = 0; y < e[1]; ++y) {
      for (std::int64_t z = 0; z < e[2]; ++z) {
        Extent3 src{x, y, z};
        src[axis] = e[axis] - 1 - src[axis];
        const std::int64_t i = (x * e[1] + y) * e[2] + z;
        const std::int64_t j = (src[0] * e[1] + src[1]) * e[2] + src[2];
        out.label[i] = scan.label[j];
        for (std::int64_t c = 0; c < scan.channels; ++c) out.volume[c * n + i] = scan.volume[c * n + j];
      }
    }
  }
  return out;
}

SyntheticScan augment(const SyntheticScan& scan, CounterRng& rng, const AugmentParams& params) {
  SyntheticScan out = scan;
  for (int axis = 0; axis < 3; ++axis) {
    if (rng.bernoulli(params.flip_prob)) out = mirror(out, axis);
  }
  if (params.noise_sigma > 0.0) {
    for (float& v : out.volume) v += static_cast<float>(params.noise_sigma * rng.normal());
  }
  return out;
}

Tensor<float> stack_volumes(const std::vector<SyntheticScan>& scans) {
  if (scans.empty()) throw UsageError("stack_volumes: no scans");
  const SyntheticScan& first = scans.front();
  Shape shape{static_cast<std::int64_t>(scans.size()), first.channels, first.extents[0], first.extents[1],
              first.extents[2]};
  std::vector<float> data;
  data.reserve(static_cast<std::size_t>(numel(shape)));
  for (const auto& s : scans) {
    if (s.extents != first.extents || s.channels != first.channels) {
      throw UsageError("stack_volumes: scans differ in shape");
    }
    data.insert(data.end(), s.volume.begin(), s.volume.end());
  }
  return Tensor<float>(std::move(shape), std::move(data));
}

LabelBatch stack_labels(const std::vector<SyntheticScan>& scans) {
  if (scans.empty()) throw UsageError("stack_labels: no scans");
  LabelBatch out{static_cast<std::int64_t>(scans.size()), scans.front().extents, {}};
  for (const auto& s : scans) {
    if (s.extents != out.extents) throw UsageError("stack_labels: scans differ in shape");
    out.values.insert(out.values.end(), s.label.begin(), s.label.end());
  }
  return out;
}

}  // namespace nnformer::train
