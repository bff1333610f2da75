#include <cmath>

#include "doctest.h"
#include "metric_oracle.hpp"
#include "nnformer/errors.hpp"
#include "nnformer/metrics.hpp"

using namespace nnformer;
using namespace nnformer::metrics;
using nnformer::testing::oracle_dsc;
using nnformer::testing::oracle_hd95;
using nnformer::testing::random_mask;
using nnformer::testing::to_oracle;

namespace {

BinaryMask empty_mask(Extent3 e) { return {e, std::vector<std::uint8_t>(static_cast<std::size_t>(e[0] * e[1] * e[2]))}; }

BinaryMask with_voxels(Extent3 e, std::initializer_list<Extent3> on) {
  BinaryMask m = empty_mask(e);
  for (const auto& p : on) m.voxels[(p[0] * e[1] + p[1]) * e[2] + p[2]] = 1;
  return m;
}

SegmentationMask labels(Extent3 e, std::vector<std::int32_t> v, Spacing s = {1, 1, 1}) { return {e, std::move(v), s}; }

}  // namespace

TEST_CASE("dsc examples and conventions") {
  const Extent3 e{4, 4, 2};
  const auto a = with_voxels(e, {{0, 0, 0}, {0, 1, 0}, {1, 0, 0}, {1, 1, 0}, {0, 0, 1}, {0, 1, 1}, {1, 0, 1}, {1, 1, 1}});
  const auto b = with_voxels(e, {{0, 0, 0}, {0, 1, 0}, {1, 0, 0}, {1, 1, 0}, {3, 3, 0}, {3, 2, 0}, {2, 3, 0}, {2, 2, 0}});
  const auto c = with_voxels(e, {{3, 3, 1}});
  CHECK(a.count() == 8);
  CHECK(dsc(a, a) == 1.0);
  CHECK(dsc(a, c) == 0.0);
  CHECK(dsc(a, b) == 0.5);
  CHECK(dsc(a, b) == dsc(b, a));
  CHECK(dsc(empty_mask(e), empty_mask(e)) == 1.0);
  CHECK(dsc(empty_mask(e), a) == 0.0);
  CHECK_THROWS_AS(dsc(a, empty_mask({4, 4, 3})), UsageError);
}

TEST_CASE("hd95 examples") {
  const Extent3 e{5, 3, 3};
  const auto p = with_voxels(e, {{1, 1, 1}});
  const auto q = with_voxels(e, {{2, 1, 1}});
  CHECK(*hd95(p, p, {1, 1, 1}) == 0.0);
  CHECK(*hd95(p, q, {1, 1, 1}) == 1.0);
  CHECK(*hd95(p, q, {2, 1, 1}) == 2.0);
  CHECK_FALSE(hd95(p, empty_mask(e), {1, 1, 1}).has_value());
  CHECK_FALSE(hd95(empty_mask(e), empty_mask(e), {1, 1, 1}).has_value());

  // Interior voxels are not surface: a full 3x3x3 cube has 26 surface voxels.
  BinaryMask cube = empty_mask({5, 5, 5});
  for (std::int64_t x = 1; x < 4; ++x)
    for (std::int64_t y = 1; y < 4; ++y)
      for (std::int64_t z = 1; z < 4; ++z) cube.voxels[(x * 5 + y) * 5 + z] = 1;
  CHECK(surface_voxels(cube).size() == 26);
  // Grid-boundary voxels always count as surface.
  BinaryMask full{{2, 2, 2}, std::vector<std::uint8_t>(8, 1)};
  CHECK(surface_voxels(full).size() == 8);
}

TEST_CASE("nearest-rank percentile") {
  CHECK(nearest_rank({5, 1, 3, 2, 4}, 0.95) == 5);
  std::vector<double> v;
  for (int i = 1; i <= 100; ++i) v.push_back(i);
  CHECK(nearest_rank(v, 0.95) == 95);
  v.push_back(101);
  CHECK(nearest_rank(v, 0.95) == 96);
  CHECK_THROWS_AS(nearest_rank({}, 0.95), UsageError);
}

TEST_CASE("dsc and hd95 match the exhaustive oracle on random masks") {
  CounterRng rng(2024);
  int defined = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Extent3 e{rng.uniform_int(1, 12), rng.uniform_int(1, 12), rng.uniform_int(1, 8)};
    const Spacing s{rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0), rng.uniform(0.3, 3.0)};
    const auto a = random_mask(e, rng);
    const auto b = random_mask(e, rng);
    CHECK(dsc(a, b) == oracle_dsc(to_oracle(a), to_oracle(b)));
    const auto got = hd95(a, b, s);
    const auto want = oracle_hd95(to_oracle(a), to_oracle(b), s);
    REQUIRE(got.has_value() == want.has_value());
    if (got) {
      ++defined;
      CHECK(*got == *want);
      CHECK(*hd95(b, a, s) == *got);
    }
  }
  CHECK(defined > 50);
}

TEST_CASE("hd95 scales with uniform spacing") {
  CounterRng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Extent3 e{8, 9, 5};
    const auto a = random_mask(e, rng);
    const auto b = random_mask(e, rng);
    const auto base = hd95(a, b, {1.0, 1.0, 1.0});
    if (!base) continue;
    CHECK(*hd95(a, b, {2.0, 2.0, 2.0}) == doctest::Approx(2.0 * *base).epsilon(1e-12));
  }
}

TEST_CASE("evaluate reports per class with flags") {
  const Extent3 e{3, 3, 2};
  std::vector<std::int32_t> gt(18, 0);
  gt[0] = gt[1] = gt[3] = 1;
  gt[10] = gt[11] = 2;
  const SegmentationMask ref = labels(e, gt);

  // Perfect prediction; class 3 absent from both.
  const MetricReport same = evaluate(ref, ref, 4);
  REQUIRE(same.classes.size() == 3);
  CHECK(same.classes[0].dsc == 1.0);
  CHECK(*same.classes[0].hd95 == 0.0);
  CHECK(same.classes[2].flag == ClassFlag::kEmptyBoth);
  CHECK_FALSE(same.classes[2].hd95.has_value());
  CHECK(*same.mean_dsc == 1.0);
  CHECK(*same.mean_hd95 == 0.0);

  // Class 2 missed entirely: DSC 0 counted, HD95 undefined and excluded.
  std::vector<std::int32_t> p = gt;
  p[10] = p[11] = 0;
  p[4] = 1;
  const MetricReport miss = evaluate(labels(e, p), ref, 3);
  CHECK(miss.classes[1].flag == ClassFlag::kEmptyPrediction);
  CHECK(miss.classes[1].dsc == 0.0);
  const auto a1 = binarize(labels(e, p), 1);
  const auto b1 = binarize(ref, 1);
  CHECK(miss.classes[0].dsc == oracle_dsc(to_oracle(a1), to_oracle(b1)));
  CHECK(*miss.classes[0].hd95 == *oracle_hd95(to_oracle(a1), to_oracle(b1), {1, 1, 1}));
  CHECK(*miss.mean_dsc == doctest::Approx((miss.classes[0].dsc + 0.0) / 2.0));
  CHECK(*miss.mean_hd95 == *miss.classes[0].hd95);

  CHECK_THROWS_AS(evaluate(labels(e, p, {1, 1, 2}), ref, 3), UsageError);
  std::vector<std::int32_t> bad = gt;
  bad[5] = 7;
  CHECK_THROWS_AS(evaluate(labels(e, bad), ref, 3), DataError);
}

TEST_CASE("report text layout") {
  const Extent3 e{2, 2, 1};
  const SegmentationMask m = labels(e, {0, 1, 1, 0});
  const std::string text = format_report(evaluate(m, m, 3));
  CHECK(text ==
        "class\tdsc\thd95\tflag\n"
        "1\t1.000000\t0.000000\tok\n"
        "2\t1.000000\tnan\tempty_both\n"
        "avg\t1.000000\t0.000000\t-\n");
}

TEST_CASE("average of reports") {
  const Extent3 e{2, 2, 1};
  const SegmentationMask ref = labels(e, {0, 1, 1, 2});
  const MetricReport perfect = evaluate(ref, ref, 3);
  const MetricReport half = evaluate(labels(e, {0, 1, 0, 0}), ref, 3);
  const MetricReport avg = average_reports({perfect, half});
  CHECK(avg.classes[0].dsc == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
  CHECK(avg.classes[1].dsc == doctest::Approx(0.5));
  CHECK(avg.classes[1].flag == ClassFlag::kOk);
  CHECK(*avg.classes[1].hd95 == 0.0);
}

TEST_CASE("nn_avg ensembling") {
  // probs [K=2, 2, 1, 1]: two voxels.
  const Tensor<float> a(Shape{2, 2, 1, 1}, {0.9f, 0.4f, 0.1f, 0.6f});
  const Tensor<float> b(Shape{2, 2, 1, 1}, {0.3f, 0.45f, 0.7f, 0.55f});
  // Voxel 0: class 0 at 0.6 vs 0.4. Voxel 1: 0.425 vs 0.575.
  const auto avg = nn_avg(a, b);
  CHECK(avg.labels == std::vector<std::int32_t>{0, 1});
  CHECK(argmax_mask(a).labels == std::vector<std::int32_t>{0, 1});
  CHECK(argmax_mask(b).labels == std::vector<std::int32_t>{1, 1});

  CHECK(nn_avg(a, a).labels == argmax_mask(a).labels);

  // A certain model beats a uniform one.
  const Tensor<float> certain(Shape{3, 1, 1, 1}, {0.0f, 0.0f, 1.0f});
  const Tensor<float> uniform(Shape{3, 1, 1, 1}, {1.0f / 3, 1.0f / 3, 1.0f / 3});
  CHECK(nn_avg(certain, uniform).labels[0] == 2);

  // Scaling both maps keeps the argmax.
  CounterRng rng(9);
  Tensor<float> pa(Shape{4, 3, 3, 2}), pb(Shape{4, 3, 3, 2});
  for (auto& v : pa.mutable_data()) v = static_cast<float>(rng.uniform());
  for (auto& v : pb.mutable_data()) v = static_cast<float>(rng.uniform());
  Tensor<float> sa = pa.clone(), sb = pb.clone();
  for (auto& v : sa.mutable_data()) v *= 4.0f;
  for (auto& v : sb.mutable_data()) v *= 4.0f;
  CHECK(nn_avg(pa, pb).labels == nn_avg(sa, sb).labels);

  CHECK_THROWS_AS(nn_avg(a, certain), UsageError);
  CHECK(argmax_mask(Tensor<float>(Shape{1, 2, 2, 1, 1}, {0.2f, 0.7f, 0.8f, 0.3f})).labels ==
        std::vector<std::int32_t>{1, 0});
}
