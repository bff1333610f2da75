#include "nnformer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "nnformer/errors.hpp"

namespace nnformer::metrics {

using nnformer::to_string;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::int64_t voxel_count(const Extent3& e) { return e[0] * e[1] * e[2]; }

void require_same_extents(std::string_view op, const Extent3& a, const Extent3& b) {
  if (a != b) {
    throw UsageError(std::string(op) + ": extents " + to_string(a) + " and " + to_string(b) + " differ");
  }
}

// Squared distance from every voxel to the nearest site, built one axis at a
// time: pass a computes min over q of (f[q] + ((p - q) * s_a)^2) along every
// line of axis a. Floating-point addition is monotone, so the three passes
// give exactly min over sites of (dx^2 + dy^2) + dz^2.
std::vector<double> squared_distance_field(const Extent3& e, const std::vector<std::uint8_t>& is_site,
                                           const Spacing& spacing) {
  const std::int64_t n = voxel_count(e);
  std::vector<double> dist(static_cast<std::size_t>(n), kInf);
  for (std::int64_t i = 0; i < n; ++i) {
    if (is_site[i]) dist[i] = 0.0;
  }
  const std::array<std::int64_t, 3> stride{e[1] * e[2], e[2], 1};
  for (int axis = 0; axis < 3; ++axis) {
    const std::int64_t len = e[axis];
    std::vector<double> term(static_cast<std::size_t>(len));
    for (std::int64_t k = 0; k < len; ++k) {
      const double d = static_cast<double>(k) * spacing[axis];
      term[k] = d * d;
    }
    std::vector<double> f(static_cast<std::size_t>(len));
    const int a0 = axis == 0 ? 1 : 0;
    const int a1 = axis == 2 ? 1 : 2;
    for (std::int64_t i0 = 0; i0 < e[a0]; ++i0) {
      for (std::int64_t i1 = 0; i1 < e[a1]; ++i1) {
        const std::int64_t base = i0 * stride[a0] + i1 * stride[a1];
        for (std::int64_t p = 0; p < len; ++p) f[p] = dist[base + p * stride[axis]];
        for (std::int64_t p = 0; p < len; ++p) {
          double best = f[p];
          for (std::int64_t k = 1; k < len && term[k] < best; ++k) {
            if (p - k >= 0) best = std::min(best, f[p - k] + term[k]);
            if (p + k < len) best = std::min(best, f[p + k] + term[k]);
          }
          dist[base + p * stride[axis]] = best;
        }
      }
    }
  }
  return dist;
}

std::string format_value(std::optional<double> v) {
  if (!v) return "nan";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

Extent3 probs_extents(const Tensor<float>& probs, std::int64_t& classes) {
  const Shape& s = probs.shape();
  if (s.size() == 4) {
    classes = s[0];
    return {s[1], s[2], s[3]};
  }
  if (s.size() == 5 && s[0] == 1) {
    classes = s[1];
    return {s[2], s[3], s[4]};
  }
  throw UsageError("probability map must be [K, H, W, D] or [1, K, H, W, D], got " + to_string(s));
}

}  // namespace

void SegmentationMask::validate(std::int64_t num_classes) const {
  if (static_cast<std::int64_t>(labels.size()) != voxel_count(extents)) {
    throw UsageError("segmentation mask holds " + std::to_string(labels.size()) + " labels for extents " +
                     to_string(extents));
  }
  for (double s : spacing) {
    if (!(s > 0.0)) throw UsageError("segmentation mask spacing must be positive");
  }
  for (std::int32_t l : labels) {
    if (l < 0 || l >= num_classes) {
      throw DataError("label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

std::int64_t BinaryMask::count() const { return std::count(voxels.begin(), voxels.end(), std::uint8_t{1}); }

BinaryMask binarize(const SegmentationMask& mask, std::int32_t cls) {
  BinaryMask out{mask.extents, std::vector<std::uint8_t>(mask.labels.size())};
  for (std::size_t i = 0; i < mask.labels.size(); ++i) out.voxels[i] = mask.labels[i] == cls ? 1 : 0;
  return out;
}

double dsc(const BinaryMask& a, const BinaryMask& b) {
  require_same_extents("dsc", a.extents, b.extents);
  std::int64_t na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.voxels.size(); ++i) {
    na += a.voxels[i];
    nb += b.voxels[i];
    both += a.voxels[i] & b.voxels[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

std::vector<Extent3> surface_voxels(const BinaryMask& mask) {
  const Extent3& e = mask.extents;
  std::vector<Extent3> out;
  auto at = [&](std::int64_t x, std::int64_t y, std::int64_t z) { return mask.voxels[(x * e[1] + y) * e[2] + z]; };
  for (std::int64_t x = 0; x < e[0]; ++x) {
    for (std::int64_t y = 0; y < e[1]; ++y) {
      for (std::int64_t z = 0; z < e[2]; ++z) {
        if (!at(x, y, z)) continue;
        const bool edge = x == 0 || y == 0 || z == 0 || x == e[0] - 1 || y == e[1] - 1 || z == e[2] - 1;
        if (edge || !at(x - 1, y, z) || !at(x + 1, y, z) || !at(x, y - 1, z) || !at(x, y + 1, z) ||
            !at(x, y, z - 1) || !at(x, y, z + 1)) {
          out.push_back({x, y, z});
        }
      }
    }
  }
  return out;
}

std::vector<double> directed_surface_distances(const BinaryMask& from, const BinaryMask& to, const Spacing& spacing) {
  require_same_extents("surface distance", from.extents, to.extents);
  const Extent3& e = to.extents;
  const auto src = surface_voxels(from);
  const auto dst = surface_voxels(to);
  if (src.empty() || dst.empty()) return {};
  std::vector<std::uint8_t> is_site(static_cast<std::size_t>(voxel_count(e)), 0);
  for (const auto& p : dst) is_site[(p[0] * e[1] + p[1]) * e[2] + p[2]] = 1;
  const auto field = squared_distance_field(e, is_site, spacing);
  std::vector<double> out;
  out.reserve(src.size());
  for (const auto& p : src) out.push_back(std::sqrt(field[(p[0] * e[1] + p[1]) * e[2] + p[2]]));
  return out;
}

double nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw UsageError("nearest_rank of an empty list");
  std::sort(values.begin(), values.end());
  auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

std::optional<double> hd95(const BinaryMask& a, const BinaryMask& b, const Spacing& spacing) {
  require_same_extents("hd95", a.extents, b.extents);
  if (a.count() == 0 || b.count() == 0) return std::nullopt;
  auto pooled = directed_surface_distances(a, b, spacing);
  const auto back = directed_surface_distances(b, a, spacing);
  pooled.insert(pooled.end(), back.begin(), back.end());
  return nearest_rank(std::move(pooled), 0.95);
}

std::string_view to_string(ClassFlag flag) {
  switch (flag) {
    case ClassFlag::kOk: return "ok";
    case ClassFlag::kEmptyBoth: return "empty_both";
    case ClassFlag::kEmptyPrediction: return "empty_pred";
    case ClassFlag::kEmptyReference: return "empty_ref";
  }
  return "?";
}

namespace {

MetricReport finish(std::vector<ClassMetrics> classes) {
  MetricReport r;
  r.classes = std::move(classes);
  double dsum = 0.0, hsum = 0.0;
  int dn = 0, hn = 0;
  for (const auto& c : r.classes) {
    if (c.flag != ClassFlag::kEmptyBoth) {
      dsum += c.dsc;
      ++dn;
    }
    if (c.flag == ClassFlag::kOk && c.hd95) {
      hsum += *c.hd95;
      ++hn;
    }
  }
  if (dn > 0) r.mean_dsc = dsum / dn;
  if (hn > 0) r.mean_hd95 = hsum / hn;
  return r;
}

}  // namespace

MetricReport evaluate(const SegmentationMask& pred, const SegmentationMask& gt, std::int64_t num_classes) {
  require_same_extents("evaluate", pred.extents, gt.extents);
  if (pred.spacing != gt.spacing) throw UsageError("evaluate: prediction and reference spacing differ");
  pred.validate(num_classes);
  gt.validate(num_classes);
  std::vector<ClassMetrics> classes;
  for (std::int32_t k = 1; k < num_classes; ++k) {
    const BinaryMask a = binarize(pred, k);
    const BinaryMask b = binarize(gt, k);
    ClassMetrics m;
    m.cls = k;
    m.dsc = dsc(a, b);
    const bool ea = a.count() == 0, eb = b.count() == 0;
    if (ea && eb) {
      m.flag = ClassFlag::kEmptyBoth;
    } else if (ea) {
      m.flag = ClassFlag::kEmptyPrediction;
    } else if (eb) {
      m.flag = ClassFlag::kEmptyReference;
    } else {
      m.hd95 = hd95(a, b, gt.spacing);
    }
    classes.push_back(m);
  }
  return finish(std::move(classes));
}

MetricReport average_reports(const std::vector<MetricReport>& reports) {
  if (reports.empty()) throw UsageError("average_reports: no reports");
  const std::size_t k = reports.front().classes.size();
  std::vector<ClassMetrics> classes(k);
  for (std::size_t c = 0; c < k; ++c) {
    double dsum = 0.0, hsum = 0.0;
    int dn = 0, hn = 0;
    ClassFlag partial = ClassFlag::kEmptyBoth;
    for (const auto& r : reports) {
      if (r.classes.size() != k) throw UsageError("average_reports: class layouts differ");
      const ClassMetrics& m = r.classes[c];
      if (m.flag != ClassFlag::kEmptyBoth) {
        dsum += m.dsc;
        ++dn;
        if (partial == ClassFlag::kEmptyBoth) partial = m.flag;
      }
      if (m.hd95) {
        hsum += *m.hd95;
        ++hn;
      }
    }
    classes[c].cls = reports.front().classes[c].cls;
    classes[c].dsc = dn > 0 ? dsum / dn : 1.0;
    if (hn > 0) {
      classes[c].hd95 = hsum / hn;
      classes[c].flag = ClassFlag::kOk;
    } else {
      classes[c].flag = partial;
    }
  }
  return finish(std::move(classes));
}

std::string format_report(const MetricReport& report) {
  std::string out = "class\tdsc\thd95\tflag\n";
  for (const auto& c : report.classes) {
    out += std::to_string(c.cls) + "\t" + format_value(c.dsc) + "\t" + format_value(c.hd95) + "\t" +
           std::string(to_string(c.flag)) + "\n";
  }
  out += "avg\t" + format_value(report.mean_dsc) + "\t" + format_value(report.mean_hd95) + "\t-\n";
  return out;
}

SegmentationMask argmax_mask(const Tensor<float>& probs, const Spacing& spacing) {
  std::int64_t k = 0;
  const Extent3 e = probs_extents(probs, k);
  const std::int64_t n = voxel_count(e);
  SegmentationMask out{e, std::vector<std::int32_t>(static_cast<std::size_t>(n), 0), spacing};
  const auto p = probs.data();
  for (std::int64_t i = 0; i < n; ++i) {
    std::int32_t best = 0;
    for (std::int64_t c = 1; c < k; ++c) {
      if (p[c * n + i] > p[best * n + i]) best = static_cast<std::int32_t>(c);
    }
    out.labels[i] = best;
  }
  return out;
}

SegmentationMask nn_avg(const Tensor<float>& probs_a, const Tensor<float>& probs_b, const Spacing& spacing) {
  if (probs_a.shape() != probs_b.shape()) {
    throw UsageError("nn_avg: probability maps " + to_string(probs_a.shape()) + " and " +
                     to_string(probs_b.shape()) + " differ");
  }
  Tensor<float> mean(probs_a.shape());
  auto m = mean.mutable_data();
  const auto a = probs_a.data();
  const auto b = probs_b.data();
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = (a[i] + b[i]) / 2.0f;
  return argmax_mask(mean, spacing);
}

}  // namespace nnformer::metrics
