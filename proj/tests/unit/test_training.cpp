#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "nnformer/checkpoint.hpp"
#include "nnformer/errors.hpp"
#include "nnformer/gradcheck.hpp"
#include "nnformer/losses.hpp"
#include "nnformer/ops.hpp"
#include "nnformer/optim.hpp"
#include "nnformer/synthetic.hpp"
#include "nnformer/trainer.hpp"
#include "test_support.hpp"

using namespace nnformer;
using namespace nnformer::train;
using nnformer::testing::bit_equal;
using nnformer::testing::random_tensor;

namespace {

LabelBatch random_labels(std::int64_t batch, Extent3 e, std::int32_t classes, CounterRng& rng) {
  LabelBatch l{batch, e, {}};
  for (std::int64_t i = 0; i < batch * e[0] * e[1] * e[2]; ++i) {
    l.values.push_back(static_cast<std::int32_t>(rng.uniform_int(0, classes - 1)));
  }
  return l;
}

std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("nnformer_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Number of 6-connected components among voxels equal to `cls`.
int components(const SyntheticScan& s, std::int32_t cls) {
  const Extent3& e = s.extents;
  std::vector<std::uint8_t> seen(s.label.size(), 0);
  int count = 0;
  for (std::size_t start = 0; start < s.label.size(); ++start) {
    if (s.label[start] != cls || seen[start]) continue;
    ++count;
    std::deque<std::int64_t> queue{static_cast<std::int64_t>(start)};
    seen[start] = 1;
    while (!queue.empty()) {
      const std::int64_t i = queue.front();
      queue.pop_front();
      const std::int64_t x = i / (e[1] * e[2]), y = (i / e[2]) % e[1], z = i % e[2];
      const std::int64_t nb[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                                     {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[1] < 0 || q[2] < 0 || q[0] >= e[0] || q[1] >= e[1] || q[2] >= e[2]) continue;
        const std::int64_t j = (q[0] * e[1] + q[1]) * e[2] + q[2];
        if (s.label[j] == cls && !seen[j]) {
          seen[j] = 1;
          queue.push_back(j);
        }
      }
    }
  }
  return count;
}

}  // namespace

TEST_CASE("poly learning-rate schedule") {
  OptimizerConfig cfg;
  cfg.max_epoch = 1000;
  CHECK(poly_lr(0, cfg) == 0.01);
  CHECK(poly_lr(1000, cfg) == 0.0);
  CHECK(std::abs(poly_lr(500, cfg) - 5.3589e-3) <= 1e-7);
  CHECK(poly_lr(500, cfg) == 0.01 * std::pow(0.5, 0.9));
  double prev = poly_lr(0, cfg);
  for (std::int64_t e = 1; e <= cfg.max_epoch; ++e) {
    const double lr = poly_lr(e, cfg);
    CHECK(lr <= prev);
    prev = lr;
  }
  CHECK_THROWS_AS(poly_lr(-1, cfg), UsageError);
  CHECK_THROWS_AS(poly_lr(1001, cfg), UsageError);

  const OptimizerConfig defaults;
  CHECK(defaults.momentum == 0.99);
  CHECK(defaults.weight_decay == 3e-5);
  CHECK(defaults.max_epoch == 50);
  CHECK(defaults.iters_per_epoch == 25);
  CHECK(defaults.batch_size == 2);
  OptimizerConfig bad;
  bad.iters_per_epoch = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("deep supervision weights") {
  const auto w = DeepSupervisionWeights::standard();
  CHECK(w.full == 4.0 / 7.0);
  CHECK(w.mid == 2.0 / 7.0);
  CHECK(w.low == 1.0 / 7.0);
  CHECK(w.mid == w.full / 2.0);
  CHECK(w.low == w.full / 4.0);
  CHECK(w.full + w.mid + w.low == doctest::Approx(1.0).epsilon(1e-15));
  const auto a = DeepSupervisionWeights::full_resolution_only();
  CHECK(a.full == 1.0);
  CHECK(a.mid == 0.0);
  CHECK(a.low == 0.0);
}

TEST_CASE("cross-entropy values") {
  Tape<double> tape;
  const Extent3 e{2, 3, 2};
  CounterRng rng(1);
  for (std::int32_t k : {2, 3, 5}) {
    const Tensor<double> uniform(Shape{2, k, 2, 3, 2}, 0.7);
    CHECK(ce_loss(tape, uniform, random_labels(2, e, k, rng)).item() == doctest::Approx(std::log(k)).epsilon(1e-12));
  }
  // Large margin on the true class.
  const LabelBatch labels = random_labels(1, e, 3, rng);
  Tensor<double> sharp(Shape{1, 3, 2, 3, 2}, -20.0);
  for (std::int64_t v = 0; v < 12; ++v) sharp.mutable_data()[labels.values[v] * 12 + v] = 20.0;
  CHECK(ce_loss(tape, sharp, labels).item() < 1e-15);

  LabelBatch bad = labels;
  bad.values[3] = 3;
  CHECK_THROWS_AS(ce_loss(tape, sharp, bad), DataError);
  bad.values[3] = -1;
  CHECK_THROWS_AS(ce_loss(tape, sharp, bad), DataError);
  CHECK_THROWS_AS(ce_loss(tape, Tensor<double>(Shape{1, 3, 2, 3, 3}), labels), DimensionError);
}

TEST_CASE("dice loss values") {
  Tape<double> tape;
  // Two classes with equal logits: p = 0.5 everywhere; the foreground label
  // covers half of the 16 voxels.
  const Extent3 e{4, 2, 2};
  LabelBatch half{1, e, std::vector<std::int32_t>(16, 0)};
  for (int i = 0; i < 8; ++i) half.values[i] = 1;
  const double eps = 1e-5;
  const double expected = 1.0 - (2.0 * 0.25 * 16 + eps) / (0.5 * 16 + 0.5 * 16 + eps);
  const double got = dice_loss(tape, Tensor<double>(Shape{1, 2, 4, 2, 2}), half, eps).item();
  CHECK(got == doctest::Approx(expected).epsilon(1e-12));
  CHECK(got == doctest::Approx(0.5).epsilon(1e-5));

  // Hard prediction equal to the labels, then fully disjoint.
  Tensor<double> exact(Shape{1, 2, 4, 2, 2}), wrong(Shape{1, 2, 4, 2, 2});
  for (std::int64_t v = 0; v < 16; ++v) {
    const int y = half.values[v];
    exact.mutable_data()[y * 16 + v] = 40.0;
    wrong.mutable_data()[(1 - y) * 16 + v] = 40.0;
  }
  CHECK(dice_loss(tape, exact, half).item() == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(dice_loss(tape, wrong, half).item() == doctest::Approx(1.0).epsilon(1e-6));
  CHECK_THROWS_AS(dice_loss(tape, exact, half, 0.0), UsageError);
}

TEST_CASE("ce and dice gradients") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    CounterRng rng(seed);
    const Extent3 e{3, 2, 2};
    const LabelBatch labels = random_labels(2, e, 3, rng);
    std::vector<Tensor<double>> inputs{random_tensor(Shape{2, 3, 3, 2, 2}, rng, -2.0, 2.0)};
    const GradCheckOptions opts{.tolerance = 1e-4, .seed = seed};
    const auto ce = gradcheck(
        "ce_loss", [&](Tape<double>& t, std::span<const Tensor<double>> in) { return ce_loss(t, in[0], labels); },
        inputs, opts);
    const auto dice = gradcheck(
        "dice_loss", [&](Tape<double>& t, std::span<const Tensor<double>> in) { return dice_loss(t, in[0], labels); },
        inputs, opts);
    const auto both = gradcheck(
        "ce+dice",
        [&](Tape<double>& t, std::span<const Tensor<double>> in) {
          return ops::add(t, ce_loss(t, in[0], labels), dice_loss(t, in[0], labels));
        },
        inputs, opts);
    CHECK_MESSAGE(ce.passed, ce.max_rel_error);
    CHECK_MESSAGE(dice.passed, dice.max_rel_error);
    CHECK_MESSAGE(both.passed, both.max_rel_error);
  }
}

TEST_CASE("nearest-neighbour label down-sampling") {
  LabelBatch l{1, {4, 2, 2}, {}};
  for (std::int32_t i = 0; i < 16; ++i) l.values.push_back(i);
  const LabelBatch d = downsample_labels(l, {2, 1, 2});
  // Output (i, j, k) reads input (2i, 0, k).
  CHECK(d.values == std::vector<std::int32_t>{0, 1, 8, 9});
  CHECK(downsample_labels(l, l.extents).values == l.values);
  const LabelBatch odd = downsample_labels(LabelBatch{1, {5, 1, 1}, {0, 1, 2, 3, 4}}, {3, 1, 1});
  CHECK(odd.values == std::vector<std::int32_t>{0, 1, 3});
  CHECK_THROWS_AS(downsample_labels(l, {8, 2, 2}), UsageError);
}

TEST_CASE("deep-supervised total loss") {
  CounterRng rng(4);
  Tape<double> tape;
  const Extent3 e{4, 4, 2};
  const LabelBatch labels = random_labels(1, e, 3, rng);
  const Tensor<double> logits = random_tensor(Shape{1, 3, 4, 4, 2}, rng);
  const double single = ce_loss(tape, logits, labels).item() + dice_loss(tape, logits, labels).item();

  const net::ModelOutput<double> same{logits, logits, logits};
  CHECK(total_loss(tape, same, labels).item() == doctest::Approx(single).epsilon(1e-14));

  net::ModelOutput<double> multi{logits, random_tensor(Shape{1, 3, 2, 2, 1}, rng), random_tensor(Shape{1, 3, 1, 1, 1}, rng)};
  CHECK(total_loss(tape, multi, labels, DeepSupervisionWeights::full_resolution_only()).item() == single);

  const auto w = DeepSupervisionWeights::standard();
  auto term = [&](const Tensor<double>& z) {
    const LabelBatch d = downsample_labels(labels, {z.dim(2), z.dim(3), z.dim(4)});
    return ce_loss(tape, z, d).item() + dice_loss(tape, z, d).item();
  };
  const double want = w.full * term(multi.logits_full) + w.mid * term(multi.logits_mid) + w.low * term(multi.logits_low);
  CHECK(total_loss(tape, multi, labels).item() == doctest::Approx(want).epsilon(1e-14));
  CHECK_THROWS_AS(total_loss(tape, multi, labels, DeepSupervisionWeights{0.0, 0.0, 0.0}), UsageError);
}

TEST_CASE("sgd update rule") {
  OptimizerConfig cfg;
  cfg.momentum = 0.9;
  cfg.weight_decay = 0.1;
  Tensor<double> p(Shape{1}, 1.0);
  p.set_requires_grad(true);
  Sgd<double> sgd({{"p", p}}, cfg);
  p.mutable_grad()[0] = 0.5;
  sgd.step(0.1);
  // v = 0.5 + 0.1 * 1 = 0.6, p = 1 - 0.06.
  CHECK(p.at(0) == doctest::Approx(0.94).epsilon(1e-15));
  sgd.step(0.1);
  // v = 0.9 * 0.6 + 0.5 + 0.1 * 0.94 = 1.134, p = 0.94 - 0.1134.
  CHECK(p.at(0) == doctest::Approx(0.8266).epsilon(1e-15));

  // Zero gradient and zero decay leave parameters alone.
  OptimizerConfig still;
  still.weight_decay = 0.0;
  Tensor<double> q(Shape{3}, 2.0);
  Sgd<double> idle({{"q", q}}, still);
  idle.step(0.5);
  for (double v : q.data()) CHECK(v == 2.0);

  // Momentum 0: two steps equal two plain gradient steps.
  OptimizerConfig plain;
  plain.momentum = 0.0;
  plain.weight_decay = 0.0;
  Tensor<double> r(Shape{2}, std::vector<double>{1.0, -3.0});
  Sgd<double> gd({{"r", r}}, plain);
  r.mutable_grad()[0] = 0.25;
  r.mutable_grad()[1] = -1.0;
  gd.step(0.2);
  gd.step(0.2);
  CHECK(r.at(0) == 1.0 - 0.2 * 0.25 - 0.2 * 0.25);
  CHECK(r.at(1) == -3.0 + 0.2 + 0.2);

  r.mutable_grad()[1] = std::nan("");
  const double before = r.at(0);
  CHECK_THROWS_WITH_AS(gd.step(0.2), doctest::Contains("r"), NumericError);
  CHECK(r.at(0) == before);
}

TEST_CASE("gradient step decreases the loss for small learning rates") {
  const ModelConfig cfg = preset("micro");
  net::Model<double> model(cfg, 11);
  const SyntheticParams data = synthetic_params_for(cfg);
  const SyntheticScan scan = gen_synthetic(3, data);
  Tensor<double> x(Shape{1, 1, 8, 8, 8});
  for (std::size_t i = 0; i < scan.volume.size(); ++i) x.mutable_data()[i] = scan.volume[i];
  const LabelBatch labels = stack_labels({scan});

  auto loss_of = [&](Tape<double>& t) { return total_loss(t, model.forward(t, x), labels); };
  Tape<double> tape;
  const Tensor<double> base = loss_of(tape);
  tape.backward(base);
  std::vector<Tensor<double>> saved;
  for (const auto& p : model.parameters()) saved.push_back(p.tensor.clone());

  OptimizerConfig plain;
  plain.momentum = 0.0;
  plain.weight_decay = 0.0;
  for (double lr : {1e-2, 1e-3, 1e-4}) {
    Sgd<double> sgd(model.parameters(), plain);
    sgd.step(lr);
    Tape<double> after(Tape<double>::Mode::kInference);
    const double value = loss_of(after).item();
    CHECK_MESSAGE(value < base.item(), "lr " << lr);
    const auto params = model.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) {
      Tensor<double> t = params[i].tensor;
      std::copy(saved[i].data().begin(), saved[i].data().end(), t.mutable_data().begin());
    }
  }
}

TEST_CASE("synthetic scans") {
  const SyntheticParams params;
  const SyntheticScan a = gen_synthetic(42, params);
  const SyntheticScan b = gen_synthetic(42, params);
  CHECK(a.volume == b.volume);
  CHECK(a.label == b.label);
  CHECK(gen_synthetic(43, params).label != a.label);
  CHECK(a.extents == Extent3{32, 32, 16});

  // Regression histogram for the reference seed.
  std::vector<std::int64_t> hist(3, 0);
  for (std::int32_t l : a.label) hist.at(static_cast<std::size_t>(l)) += 1;
  CHECK(hist == std::vector<std::int64_t>{14002, 2382, 0});

  int complete = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const SyntheticScan s = gen_synthetic(seed, params);
    bool all = true;
    for (std::int32_t cls = 1; cls < 3; ++cls) {
      const int n = components(s, cls);
      CHECK(n <= 1);
      all = all && n == 1;
    }
    complete += all ? 1 : 0;
  }
  CHECK(complete >= 10);

  SyntheticParams flat = params;
  flat.noise_sigma = 0.0;
  flat.in_channels = 2;
  const SyntheticScan c = gen_synthetic(7, flat);
  const std::int64_t n = 32 * 32 * 16;
  for (std::int64_t i = 0; i < n; ++i) {
    CHECK(c.volume[i] == static_cast<float>(c.label[i]));
    CHECK(c.volume[n + i] == static_cast<float>(1.5 * c.label[i]));
  }

  SyntheticParams bad = params;
  bad.radius_max = 0.6;
  CHECK_THROWS_AS(gen_synthetic(0, bad), ConfigError);
}

TEST_CASE("augmentation") {
  const SyntheticScan s = gen_synthetic(5, SyntheticParams{});
  CounterRng rng(1);
  const SyntheticScan same = augment(s, rng, {.flip_prob = 0.0, .noise_sigma = 0.0});
  CHECK(same.volume == s.volume);
  CHECK(same.label == s.label);

  for (int axis = 0; axis < 3; ++axis) {
    const SyntheticScan m = mirror(s, axis);
    CHECK(m.label != s.label);
    const SyntheticScan back = mirror(m, axis);
    CHECK(back.volume == s.volume);
    CHECK(back.label == s.label);
    for (std::int32_t cls = 0; cls < 3; ++cls) {
      CHECK(std::count(m.label.begin(), m.label.end(), cls) == std::count(s.label.begin(), s.label.end(), cls));
    }
  }
  // Mirroring along H maps voxel (x, y, z) to (H-1-x, y, z).
  const SyntheticScan mh = mirror(s, 0);
  CHECK(mh.label[(31 * 32 + 5) * 16 + 3] == s.label[(0 * 32 + 5) * 16 + 3]);

  // Noise touches the volume only; flips always keep labels consistent.
  CounterRng r1(9), r2(9);
  const SyntheticScan n1 = augment(s, r1);
  const SyntheticScan n2 = augment(s, r2);
  CHECK(n1.volume == n2.volume);
  CHECK(n1.label == n2.label);
  const SyntheticScan noisy = augment(s, r1, {.flip_prob = 0.0, .noise_sigma = 0.1});
  CHECK(noisy.label == s.label);
  CHECK(noisy.volume != s.volume);
  CHECK_THROWS_AS(mirror(s, 3), UsageError);
}

TEST_CASE("checkpoint round trip") {
  const ModelConfig cfg = preset("micro");
  net::Model<float> model(cfg, 5);
  OptimizerConfig oc;
  Sgd<float> sgd(model.parameters(), oc);
  sgd.velocity()[0].tensor.mutable_data()[0] = 0.125f;
  const Checkpoint ckpt = capture(model, &sgd, 99, 7);
  const std::string bytes = serialize(ckpt);
  CHECK(bytes.substr(0, 4) == "NNF1");
  const Checkpoint back = deserialize(bytes);
  CHECK(back == ckpt);
  CHECK(serialize(back) == bytes);

  const auto dir = scratch_dir("ckpt");
  const std::string path = (dir / "a.ckpt").string();
  save_checkpoint(path, ckpt);
  CHECK(read_file(path) == bytes);
  const Checkpoint loaded = load_checkpoint(path);
  save_checkpoint((dir / "b.ckpt").string(), loaded);
  CHECK(read_file(dir / "b.ckpt") == bytes);
  CHECK(loaded.rng_state == 99);
  CHECK(loaded.epoch == 7);

  // Forward after restore into a differently seeded model is bit-identical.
  const Tensor<float> x = random_tensor<float>(Shape{1, 1, 8, 8, 8}, *std::make_unique<CounterRng>(3));
  Tape<float> t1(Tape<float>::Mode::kInference), t2(Tape<float>::Mode::kInference);
  const auto before = model.forward(t1, x);
  net::Model<float> other(cfg, 6);
  Sgd<float> other_sgd(other.parameters(), oc);
  restore(loaded, other, &other_sgd);
  CHECK(other_sgd.velocity()[0].tensor.at(0) == 0.125f);
  const auto after = other.forward(t2, x);
  CHECK(bit_equal(before.logits_full, after.logits_full));
  CHECK(bit_equal(before.logits_mid, after.logits_mid));
  CHECK(bit_equal(model_from_checkpoint(loaded).forward(t2, x).logits_full, before.logits_full));

  // Corruption.
  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize(bad), FormatError);
  CHECK_THROWS_AS(deserialize(bytes.substr(0, 3)), FormatError);
  for (std::size_t cut : {std::size_t{4}, std::size_t{30}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(deserialize(bytes.substr(0, cut)), FormatError);
  }
  CHECK_THROWS_AS(deserialize(bytes + "x"), FormatError);
  CHECK_THROWS_AS(load_checkpoint((dir / "missing.ckpt").string()), FormatError);

  // Another config is rejected with a message naming it.
  net::Model<float> toy(preset("toy"), 5);
  CHECK_THROWS_WITH_AS(restore(loaded, toy), doctest::Contains("micro"), ConfigError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("training loop on the micro preset") {
  const ModelConfig cfg = preset("micro");
  TrainOptions opts;
  opts.optimizer.max_epoch = 3;
  opts.optimizer.iters_per_epoch = 2;
  opts.data = synthetic_params_for(cfg);
  opts.val_scans = 2;
  opts.seed = 17;
  const auto dir = scratch_dir("train");
  opts.out_dir = dir.string();

  net::Model<float> a(cfg, 17);
  const TrainResult ra = train::train(a, opts);
  REQUIRE(ra.log.size() == 3);
  for (const auto& r : ra.log) CHECK(r.lr == poly_lr(r.epoch, opts.optimizer));
  const std::string log_a = read_file(dir / "train_log.tsv");
  CHECK(log_a.rfind("epoch\tlr\ttrain_loss\tval_dsc\n", 0) == 0);
  CHECK(std::filesystem::exists(dir / "final.ckpt"));
  CHECK(std::filesystem::exists(dir / "best.ckpt"));
  CHECK(load_checkpoint((dir / "final.ckpt").string()).epoch == 3);

  net::Model<float> b(cfg, 17);
  train::train(b, opts);
  CHECK(read_file(dir / "train_log.tsv") == log_a);

  // Untrained model: cross-entropy near ln K, total near ln K + dice.
  net::Model<float> fresh(cfg, 17);
  const std::vector<SyntheticScan> batch{gen_synthetic(1, opts.data), gen_synthetic(2, opts.data)};
  Tape<float> tape;
  const auto out = fresh.forward(tape, stack_volumes(batch));
  const LabelBatch labels = stack_labels(batch);
  CHECK(std::abs(ce_loss(tape, out.logits_full, labels).item() - std::log(2.0)) < 0.3);
  const double total = total_loss(tape, out, labels).item();
  CHECK(total > std::log(2.0) + 0.5);
  CHECK(total < std::log(2.0) + 1.2);

  // A poisoned weight aborts the next epoch; the last checkpoint survives.
  net::Model<float> c(cfg, 17);
  const auto params = c.parameters();
  CHECK_THROWS_AS(train::train(c, opts,
                        [&](const EpochRecord& r) {
                          if (r.epoch == 0) {
                            Tensor<float> w = params.front().tensor;
                            w.mutable_data()[0] = std::nanf("");
                          }
                        }),
                  NumericError);
  CHECK(load_checkpoint((dir / "final.ckpt").string()).epoch == 1);

  TrainOptions mismatch = opts;
  mismatch.data.num_classes = 3;
  CHECK_THROWS_AS(train::train(c, mismatch), ConfigError);
  std::filesystem::remove_all(dir);
}
