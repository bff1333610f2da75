#include <cmath>
#include <set>

#include "doctest.h"
#include "nnformer/complexity.hpp"
#include "nnformer/config.hpp"
#include "nnformer/errors.hpp"
#include "nnformer/gradcheck.hpp"
#include "nnformer/model.hpp"
#include "nnformer/ops.hpp"
#include "test_support.hpp"

using namespace nnformer;
using namespace nnformer::net;
using nnformer::testing::bit_equal;
using nnformer::testing::random_tensor;

namespace {

// Same strides and crop as the preset with two embedding channels so the
// full-resolution passes stay cheap.
ModelConfig slim(const std::string& name) {
  ModelConfig c = preset(name);
  c.embed_dim = 2;
  for (std::size_t i = 0; i < 4; ++i) {
    c.stage_channels[i] = 2 << i;
    c.stage_heads[i] = 1;
  }
  return c;
}

std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

}  // namespace

TEST_CASE("presets round-trip through the config format") {
  for (const auto& name : preset_names()) {
    const ModelConfig c = preset(name);
    CHECK_NOTHROW(c.validate());
    CHECK(parse_config(config_to_text(c)) == c);
  }
  CHECK(preset("synapse").embed_reduction() == Extent3{4, 4, 2});
  CHECK(preset("synapse").stage_channels == std::array<std::int64_t, 4>{192, 384, 768, 1536});
  CHECK(preset("acdc").stage_heads == std::array<std::int64_t, 4>{3, 6, 12, 24});
  CHECK(preset("tumor").in_channels == 4);
  CHECK_THROWS_AS(preset("brats"), ConfigError);
}

TEST_CASE("config parsing rejects malformed documents") {
  const std::string good = config_to_text(preset("toy"));
  auto replace = [&](const std::string& from, const std::string& to) {
    std::string s = good;
    s.replace(s.find(from), from.size(), to);
    return s;
  };
  CHECK(parse_config("# comment\n\n" + good).crop_size == Extent3{32, 32, 16});
  CHECK_THROWS_AS(parse_config(replace("num_classes = 3\n", "")), ConfigError);
  CHECK_THROWS_AS(parse_config(good + "dropout = 0.1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config(good + "num_classes = 3\n"), ConfigError);
  CHECK_THROWS_AS(parse_config(replace("crop_size = 32,32,16", "crop_size = 32,32")), ConfigError);
  CHECK_THROWS_AS(parse_config(replace("embed_dim = 16", "embed_dim = sixteen")), ConfigError);
  CHECK_THROWS_AS(parse_config(replace("stage_heads = 1,2,4,8", "stage_heads = 1,2,4,7")), ConfigError);
  CHECK_THROWS_AS(parse_config(replace("stage_channels = 16,32,64,128", "stage_channels = 16,32,64,64")),
                  ConfigError);
  CHECK_THROWS_AS(parse_config(replace("2,2,1 ; 2,2,2", "2,2,1 ; 3,2,2")), ConfigError);
  CHECK_THROWS_AS(parse_config(replace("2,2,1 ; 2,2,2", "2,2,1")), ConfigError);
  CHECK_THROWS_AS(parse_config("crop_size 32,32,16\n"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/model.cfg"), ConfigError);

  ModelConfig deep = preset("toy");
  deep.crop_size = {32, 32, 4};
  try {
    deep.validate();
    FAIL("expected over-down-sampling error");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("down-sampling layer") != std::string::npos);
  }
}

TEST_CASE("stage shapes follow the stride arithmetic") {
  struct Expect {
    const char* name;
    std::array<Extent3, 4> levels;
  };
  const std::vector<Expect> table{
      {"synapse", {Extent3{32, 32, 32}, Extent3{16, 16, 16}, Extent3{8, 8, 8}, Extent3{4, 4, 4}}},
      {"acdc", {Extent3{40, 40, 14}, Extent3{20, 20, 14}, Extent3{10, 10, 7}, Extent3{5, 5, 4}}},
      {"tumor", {Extent3{32, 32, 32}, Extent3{16, 16, 16}, Extent3{8, 8, 8}, Extent3{4, 4, 4}}},
      {"toy", {Extent3{8, 8, 8}, Extent3{4, 4, 4}, Extent3{2, 2, 2}, Extent3{1, 1, 1}}},
  };
  for (const auto& t : table) {
    const ModelConfig c = preset(t.name);
    CHECK(level_extents(c) == t.levels);
    // Closed form: ceil(crop / cumulative stride product).
    Extent3 r = c.embed_reduction();
    for (std::size_t level = 0; level < 4; ++level) {
      if (level > 0) {
        for (int a = 0; a < 3; ++a) r[a] *= c.down_strides[level - 1][a];
      }
      for (int a = 0; a < 3; ++a) CHECK(t.levels[level][a] == ceil_div(c.crop_size[a], r[a]));
    }
    const auto stages = plan_stages(c);
    REQUIRE(stages.size() == 7);
    CHECK(stages[0].extents == stages[6].extents);
    CHECK(stages[1].extents == stages[5].extents);
    CHECK(stages[2].extents == stages[4].extents);
    const std::vector<int> levels{0, 1, 2, 3, 2, 1, 0};
    for (std::size_t i = 0; i < 7; ++i) {
      CHECK(stages[i].level == levels[i]);
      CHECK(stages[i].channels == c.embed_dim << levels[i]);
      CHECK(stages[i].global == (levels[i] >= 2));
    }
  }
  // Volumes clamp to the stage extent; D = 14 pads to 16.
  const auto acdc = plan_stages(preset("acdc"));
  CHECK(acdc[0].volume == Extent3{4, 4, 4});
  CHECK(acdc[0].padded == Extent3{40, 40, 16});
  CHECK(acdc[2].volume == Extent3{10, 10, 7});
  const auto toy = plan_stages(preset("toy"));
  CHECK(toy[1].volume == Extent3{4, 4, 4});
  CHECK(toy[3].volume == Extent3{1, 1, 1});
}

TEST_CASE("embedding, sampling and expanding layers") {
  CounterRng rng(1);
  Tape<float> tape(Tape<float>::Mode::kInference);
  for (const auto& name : {"synapse", "acdc", "tumor"}) {
    const ModelConfig c = slim(name);
    EmbedParams<float> p;
    p.conv[0] = init_conv<float>(c.in_channels, 1, {3, 3, 3}, rng);
    p.conv[1] = init_conv<float>(1, 1, {3, 3, 3}, rng);
    p.conv[2] = init_conv<float>(1, 2, {3, 3, 3}, rng);
    p.conv[3] = init_conv<float>(2, 2, {3, 3, 3}, rng);
    p.norm = {init_norm<float>(1), init_norm<float>(1), init_norm<float>(2)};
    const Tensor<float> x(Shape{1, c.in_channels, c.crop_size[0], c.crop_size[1], c.crop_size[2]}, 0.25f);
    const auto e = embed_volume(tape, x, p, c.embed_strides);
    const Extent3 e0 = level_extents(c)[0];
    CHECK(e.shape() == Shape{1, 2, e0[0], e0[1], e0[2]});

    const UpParams<float> ex{init_norm<float>(2), init_deconv<float>(2, c.num_classes, c.embed_reduction(), rng),
                             c.embed_reduction()};
    const auto logits = expand_to_logits(tape, e, ex, c.crop_size);
    CHECK(logits.shape() == Shape{1, c.num_classes, c.crop_size[0], c.crop_size[1], c.crop_size[2]});
  }
  CHECK(level_extents(preset("synapse"))[0] == Extent3{32, 32, 32});
  CHECK(level_extents(preset("acdc"))[0] == Extent3{40, 40, 14});
  CHECK(level_extents(preset("tumor"))[0] == Extent3{32, 32, 32});

  auto down = [&](Extent3 e, Extent3 s) {
    const DownParams<float> p{init_conv<float>(2, 4, {3, 3, 3}, rng), init_norm<float>(4), s};
    return downsample(tape, Tensor<float>(Shape{1, 2, e[0], e[1], e[2]}, 1.0f), p);
  };
  CHECK(down({32, 32, 32}, {2, 2, 2}).shape() == Shape{1, 4, 16, 16, 16});
  CHECK(down({10, 10, 7}, {2, 2, 1}).shape() == Shape{1, 4, 5, 5, 7});
  CHECK(down({7, 7, 7}, {2, 2, 2}).shape() == Shape{1, 4, 4, 4, 4});
  CHECK_THROWS_AS(down({4, 4, 1}, {2, 2, 2}), ConfigError);

  // Channel 1 mirrors channel 0, so the norm maps channel 0 to its sign; a
  // kernel of ones on channel 0 then copies that sign into a 2x2x2 block.
  Tensor<float> w(Shape{2, 1, 2, 2, 2});
  for (std::int64_t i = 0; i < 8; ++i) w.mutable_data()[i] = 1.0f;
  UpParams<float> up{init_norm<float>(2), {w, Tensor<float>(Shape{1})}, {2, 2, 2}};
  const Tensor<float> src(Shape{1, 2, 2, 1, 2}, {1, -2, 3, -4, -1, 2, -3, 4});
  const auto u = upsample(tape, src, up, {4, 2, 3});
  CHECK(u.shape() == Shape{1, 1, 4, 2, 3});
  CHECK(u.at(0) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(u.at(2) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(u.at((3 * 2 + 1) * 3 + 2) == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(u.at((2 * 2 + 0) * 3 + 1) == doctest::Approx(1.0).epsilon(1e-4));
  CHECK_THROWS_AS(upsample(tape, src, up, {2, 2, 2}), std::logic_error);

  // Mirror of the downsample examples, channels halving.
  const UpParams<float> half{init_norm<float>(8), init_deconv<float>(8, 4, {2, 2, 1}, rng), {2, 2, 1}};
  CHECK(upsample(tape, Tensor<float>(Shape{1, 8, 5, 5, 7}), half, {10, 10, 7}).shape() == Shape{1, 4, 10, 10, 7});
}

TEST_CASE("mlp sub-layer") {
  CounterRng rng(2);
  Tape<double> tape;
  MlpParams<double> p = init_mlp<double>(3, 1.0, rng);
  CHECK(p.w1.shape() == Shape{3, 3});
  CHECK(init_mlp<double>(8, 4.0, rng).w1.shape() == Shape{8, 32});
  const Tensor<double> x = random_tensor(Shape{2, 5, 3}, rng);
  CHECK(mlp(tape, x, p).shape() == x.shape());

  MlpParams<double> zero = p;
  zero.w1 = Tensor<double>(Shape{3, 3});
  zero.w2 = Tensor<double>(Shape{3, 3});
  for (double v : mlp(tape, x, zero).data()) CHECK(v == 0.0);

  // Identity weights leave gelu(x): gelu(1) = 0.841345, gelu(-1) = -0.158655.
  MlpParams<double> id = zero;
  for (std::int64_t i = 0; i < 3; ++i) {
    id.w1.mutable_data()[static_cast<std::size_t>(i * 4)] = 1.0;
    id.w2.mutable_data()[static_cast<std::size_t>(i * 4)] = 1.0;
  }
  const Tensor<double> y = mlp(tape, Tensor<double>(Shape{1, 3}, {1.0, -1.0, 0.0}), id);
  CHECK(y.at(0) == doctest::Approx(0.841345).epsilon(1e-6));
  CHECK(y.at(1) == doctest::Approx(-0.158655).epsilon(1e-5));
  CHECK(y.at(2) == 0.0);
}

TEST_CASE("model forward shapes for every preset") {
  for (const auto& name : {"synapse", "acdc", "tumor"}) {
    const ModelConfig c = slim(name);
    const Model<float> model(c, 3);
    Tape<float> tape(Tape<float>::Mode::kInference);
    const Tensor<float> x(Shape{1, c.in_channels, c.crop_size[0], c.crop_size[1], c.crop_size[2]});
    const auto out = model.forward(tape, x);
    const auto lv = level_extents(c);
    CHECK(out.logits_full.shape() == Shape{1, c.num_classes, c.crop_size[0], c.crop_size[1], c.crop_size[2]});
    CHECK(out.logits_mid.shape() == Shape{1, c.num_classes, lv[0][0], lv[0][1], lv[0][2]});
    CHECK(out.logits_low.shape() == Shape{1, c.num_classes, lv[1][0], lv[1][1], lv[1][2]});
    CHECK(out.logits_full.all_finite());
  }
  const auto syn = level_extents(preset("synapse"));
  CHECK(syn[0] == Extent3{32, 32, 32});
  CHECK(syn[1] == Extent3{16, 16, 16});
}

TEST_CASE("model parameters") {
  const Model<float> toy(preset("toy"), 7);
  CHECK(toy.parameter_count() == 1072458);
  const Model<float> micro(preset("micro"), 7);
  CHECK(micro.parameter_count() == 198966);
  const auto params = toy.parameters();
  std::set<std::string> names;
  std::int64_t total = 0;
  for (const auto& p : params) {
    CHECK(names.insert(p.name).second);
    CHECK(p.tensor.requires_grad());
    total += p.tensor.numel();
  }
  CHECK(total == toy.parameter_count());
  CHECK(names.contains("encoder0.layer1.attn.bias_table"));
  CHECK(names.contains("skip0.attn.w_kv"));
  CHECK(names.contains("expand.deconv.weight"));

  // Single-layer blocks drop exactly the shifted layers.
  ModelConfig one = preset("toy");
  one.blocks = {1, 1, 2, 2};
  CHECK(Model<float>(one, 7).parameter_count() < toy.parameter_count());

  // Same seed, same weights; different seed, different weights.
  const Model<float> again(preset("toy"), 7);
  const Model<float> other(preset("toy"), 8);
  const auto a = again.parameters();
  const auto o = other.parameters();
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < params.size(); ++i) {
    all_equal = all_equal && bit_equal(params[i].tensor, a[i].tensor);
    any_diff = any_diff || !bit_equal(params[i].tensor, o[i].tensor);
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("toy forward is deterministic with finite logits and gradients") {
  const ModelConfig c = preset("toy");
  const Model<float> m1(c, 11), m2(c, 11);
  CounterRng rng(4);
  const Tensor<float> x = random_tensor<float>(Shape{2, 1, 32, 32, 16}, rng);
  Tape<float> t1, t2;
  const auto o1 = m1.forward(t1, x);
  const auto o2 = m2.forward(t2, x);
  CHECK(bit_equal(o1.logits_full, o2.logits_full));
  CHECK(bit_equal(o1.logits_mid, o2.logits_mid));
  CHECK(bit_equal(o1.logits_low, o2.logits_low));
  CHECK(o1.logits_full.all_finite());

  const auto loss = ops::add(t1, ops::add(t1, ops::sum(t1, o1.logits_full), ops::sum(t1, o1.logits_mid)),
                             ops::sum(t1, o1.logits_low));
  t1.backward(loss);
  for (const auto& p : m1.parameters()) {
    REQUIRE_MESSAGE(p.tensor.has_grad(), p.name);
    bool finite = true;
    for (float g : p.tensor.grad()) finite = finite && std::isfinite(g);
    CHECK_MESSAGE(finite, p.name);
  }

  Tape<float> t0(Tape<float>::Mode::kInference);
  const auto z = m1.forward(t0, Tensor<float>(Shape{1, 1, 32, 32, 16}));
  CHECK(z.logits_full.all_finite());
  CHECK_THROWS_AS(m1.forward(t0, Tensor<float>(Shape{1, 1, 32, 32, 8})), UsageError);
  CHECK_THROWS_AS(m1.forward(t0, Tensor<float>(Shape{1, 2, 32, 32, 16})), UsageError);
}

TEST_CASE("profiled MACs decompose into the closed-form stage costs") {
  for (const auto& name : {"toy", "micro"}) {
    const ModelConfig c = preset(name);
    const Model<float> model(c, 5);
    const Tensor<float> x(Shape{1, c.in_channels, c.crop_size[0], c.crop_size[1], c.crop_size[2]}, 0.1f);
    Tape<float> t1(Tape<float>::Mode::kInference), t2(Tape<float>::Mode::kInference);
    (void)model.forward(t1, x);
    (void)model.forward(t2, x);
    const MacReport& r = t1.mac_report();
    CHECK(r == t2.mac_report());

    std::uint64_t analytic = 0;
    for (const auto& s : model.stages()) {
      const Extent3 p = s.padded;
      const std::uint64_t layer = s.global ? attention::omega_gv(p[0], p[1], p[2], s.channels)
                                           : attention::omega_lv(p[0], p[1], p[2], s.channels, s.volume);
      for (std::int64_t l = 0; l < c.blocks[static_cast<std::size_t>(s.level)]; ++l) {
        CHECK(r.attention_macs(s.name + "/layer" + std::to_string(l)) == layer);
        analytic += layer;
      }
      if (s.role == StageRole::kDecoder) {
        const std::uint64_t skip = attention::omega_skip(p[0], p[1], p[2], s.channels, s.volume);
        CHECK(r.attention_macs(s.name + "/skip") == skip);
        analytic += skip;
      }
    }
    CHECK(r.attention_macs() == analytic);
    std::uint64_t by_scope = 0;
    for (const auto& [label, counts] : r.by_scope) {
      for (auto v : counts) by_scope += v;
    }
    CHECK(by_scope == r.total_macs());
  }
}

TEST_CASE("end-to-end gradcheck on the micro config") {
  const Model<double> model(preset("micro"), 21);
  CounterRng rng(22);
  std::vector<Tensor<double>> inputs{random_tensor(Shape{1, 1, 8, 8, 8}, rng)};
  for (const auto& p : model.parameters()) inputs.push_back(p.tensor);
  const auto report = gradcheck(
      "micro_model",
      [&](Tape<double>& tape, std::span<const Tensor<double>> in) {
        const auto out = model.forward(tape, in[0]);
        return ops::add(tape,
                        ops::add(tape, ops::sum(tape, ops::mul(tape, out.logits_full, out.logits_full)),
                                 ops::sum(tape, out.logits_mid)),
                        ops::sum(tape, out.logits_low));
      },
      inputs, {.tolerance = 1e-3, .max_probes = 1500, .seed = 5});
  CHECK_MESSAGE(report.passed, "max rel err " << report.max_rel_error);
  CHECK(report.probes == 1500);
}
