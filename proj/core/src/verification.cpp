#include "nnformer/verification.hpp"

#include <cstdio>
#include <sstream>

#include "nnformer/attention.hpp"
#include "nnformer/complexity.hpp"
#include "nnformer/losses.hpp"
#include "nnformer/mlp.hpp"
#include "nnformer/ops.hpp"
#include "nnformer/rng.hpp"

namespace nnformer::verify {

namespace {

using T64 = Tensor<double>;
using Tape64 = Tape<double>;
using In = std::span<const T64>;

T64 uniform_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
  T64 t(std::move(shape));
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

struct Case {
  std::string name;
  std::vector<Shape> shapes;
  GradFunction fn;
};

std::vector<Case> op_cases() {
  return {
      {"matmul", {{2, 3, 4}, {2, 4, 5}}, [](Tape64& t, In in) { return ops::matmul(t, in[0], in[1]); }},
      {"matmul_nt",
       {{2, 3, 4}, {2, 5, 4}},
       [](Tape64& t, In in) {
         return ops::matmul(t, in[0], in[1], {.transpose_b = true, .mac_class = MacClass::kAttention});
       }},
      {"linear",
       {{3, 4, 6}, {6, 5}, {5}},
       [](Tape64& t, In in) { return ops::linear(t, in[0], in[1], in[2], MacClass::kOther); }},
      {"add", {{3, 4}, {3, 4}}, [](Tape64& t, In in) { return ops::add(t, in[0], in[1]); }},
      {"add_trailing", {{2, 3, 4}, {3, 4}}, [](Tape64& t, In in) { return ops::add_trailing(t, in[0], in[1]); }},
      {"mul", {{3, 4}, {3, 4}}, [](Tape64& t, In in) { return ops::mul(t, in[0], in[1]); }},
      {"conv3d",
       {{2, 2, 5, 4, 3}, {3, 2, 3, 3, 3}, {3}},
       [](Tape64& t, In in) { return ops::conv3d(t, in[0], in[1], in[2], {.stride = {2, 1, 2}, .padding = {1, 1, 1}}); }},
      {"deconv3d",
       {{1, 3, 2, 3, 2}, {3, 2, 2, 2, 1}, {2}},
       [](Tape64& t, In in) { return ops::deconv3d(t, in[0], in[1], in[2], {2, 2, 1}); }},
      {"layer_norm", {{4, 6}, {6}, {6}}, [](Tape64& t, In in) { return ops::layer_norm(t, in[0], in[1], in[2]); }},
      {"gelu", {{3, 5}}, [](Tape64& t, In in) { return ops::gelu(t, in[0]); }},
      {"softmax", {{3, 6}}, [](Tape64& t, In in) { return ops::softmax(t, in[0]); }},
      {"cyclic_shift", {{1, 2, 3, 4, 2}}, [](Tape64& t, In in) { return ops::cyclic_shift(t, in[0], {1, -2, 1}); }},
      {"channels_last",
       {{2, 3, 2, 2, 2}},
       [](Tape64& t, In in) {
         const T64 cl = ops::to_channels_last(t, in[0]);
         return ops::to_channels_first(t, ops::mul(t, cl, cl));
       }},
      {"crop", {{1, 2, 4, 3, 3}}, [](Tape64& t, In in) { return ops::crop(t, in[0], {3, 2, 3}); }},
      {"split_heads",
       {{2, 3, 4}},
       [](Tape64& t, In in) {
         const T64 s = ops::split_heads(t, in[0], 2);
         return ops::merge_heads(t, ops::mul(t, s, s));
       }},
      {"gather_rows",
       {{4, 3}},
       [](Tape64& t, In in) {
         const std::vector<std::int64_t> idx{2, -1, 0, 2, 3};
         return ops::gather_rows(t, in[0], 3, idx, Shape{5, 3});
       }},
      {"slice_last",
       {{2, 3, 6}},
       [](Tape64& t, In in) { return ops::mul(t, ops::slice_last(t, in[0], 0, 3), ops::slice_last(t, in[0], 3, 6)); }},
  };
}

attention::AttentionParams<double> attention_from(In in, std::int64_t heads, Extent3 volume) {
  attention::AttentionParams<double> p{in[1], in[2], in[3], in[4], in[5], in[6], in[7], in[8], heads, {}};
  p.bias = attention::build_bias<double>(volume, heads, nullptr);
  p.bias.table = in[9];
  return p;
}

std::vector<T64> attention_inputs(Shape x, std::int64_t c, std::int64_t heads, Extent3 volume, CounterRng& rng) {
  std::vector<T64> in{uniform_tensor(std::move(x), rng)};
  for (int i = 0; i < 4; ++i) in.push_back(uniform_tensor(Shape{c, c}, rng, -0.6, 0.6));
  for (int i = 0; i < 4; ++i) in.push_back(uniform_tensor(Shape{c}, rng, -0.2, 0.2));
  in.push_back(uniform_tensor(Shape{heads, attention::bias_table_size(volume)}, rng, -0.5, 0.5));
  return in;
}

train::LabelBatch random_labels(std::int64_t batch, Extent3 e, std::int32_t classes, CounterRng& rng) {
  train::LabelBatch l{batch, e, {}};
  for (std::int64_t i = 0; i < batch * e[0] * e[1] * e[2]; ++i) {
    l.values.push_back(static_cast<std::int32_t>(rng.uniform_int(0, classes - 1)));
  }
  return l;
}

}  // namespace

std::vector<GradCheckReport> gradcheck_suite(const SuiteOptions& options) {
  std::vector<GradCheckReport> reports;
  const CounterRng root(options.seed);
  std::uint64_t stream = 0;
  auto check = [&](const std::string& name, const GradFunction& fn, std::vector<T64> inputs, double tol,
                   std::size_t probes = 0) {
    reports.push_back(gradcheck(name, fn, inputs,
                                {.tolerance = tol,
                                 .max_probes = probes,
                                 .seed = options.seed,
                                 .analytic_bias = options.analytic_bias}));
  };

  for (const auto& c : op_cases()) {
    CounterRng rng = root.split(stream++);
    std::vector<T64> inputs;
    for (const auto& s : c.shapes) inputs.push_back(uniform_tensor(s, rng));
    check(c.name, c.fn, std::move(inputs), kOpTolerance);
  }

  {
    CounterRng rng = root.split(stream++);
    const attention::PartitionSpec plain{{2, 2, 2}, {0, 0, 0}};
    check("lv_msa", [&](Tape64& t, In x) { return attention::lv_msa(t, x[0], attention_from(x, 2, {2, 2, 2}), plain); },
          attention_inputs(Shape{1, 4, 3, 4, 2}, 4, 2, {2, 2, 2}, rng), kOpTolerance);
  }
  {
    CounterRng rng = root.split(stream++);
    const attention::PartitionSpec shifted{{2, 2, 2}, {1, 1, 1}};
    check("slv_msa",
          [&](Tape64& t, In x) { return attention::slv_msa(t, x[0], attention_from(x, 2, {2, 2, 2}), shifted); },
          attention_inputs(Shape{1, 4, 4, 4, 2}, 4, 2, {2, 2, 2}, rng), kOpTolerance);
  }
  {
    CounterRng rng = root.split(stream++);
    check("gv_msa", [&](Tape64& t, In x) { return attention::gv_msa(t, x[0], attention_from(x, 2, {2, 3, 2})); },
          attention_inputs(Shape{1, 4, 2, 3, 2}, 4, 2, {2, 3, 2}, rng), kOpTolerance);
  }
  {
    CounterRng rng = root.split(stream++);
    const attention::PartitionSpec plain{{2, 2, 2}, {0, 0, 0}};
    std::vector<T64> in{uniform_tensor(Shape{1, 4, 4, 2, 3}, rng), uniform_tensor(Shape{1, 4, 4, 2, 3}, rng),
                        uniform_tensor(Shape{4, 8}, rng, -0.6, 0.6), uniform_tensor(Shape{8}, rng, -0.2, 0.2),
                        uniform_tensor(Shape{4, 4}, rng, -0.6, 0.6), uniform_tensor(Shape{4}, rng, -0.2, 0.2),
                        uniform_tensor(Shape{2, attention::bias_table_size({2, 2, 2})}, rng, -0.5, 0.5)};
    check("skip_attention",
          [&](Tape64& t, In x) {
            attention::SkipAttentionParams<double> q{x[2], x[3], x[4], x[5], 2,
                                                     attention::build_bias<double>({2, 2, 2}, 2, nullptr)};
            q.bias.table = x[6];
            return attention::skip_attention(t, x[0], x[1], q, plain);
          },
          std::move(in), kOpTolerance);
  }
  {
    CounterRng rng = root.split(stream++);
    const auto p = net::init_mlp<double>(4, 2.0, rng);
    std::vector<T64> in{uniform_tensor(Shape{2, 3, 4}, rng), p.w1, p.b1, p.w2, p.b2};
    check("mlp",
          [&](Tape64& t, In x) { return net::mlp(t, x[0], net::MlpParams<double>{x[1], x[2], x[3], x[4]}); },
          std::move(in), kOpTolerance);
  }
  {
    CounterRng rng = root.split(stream++);
    const train::LabelBatch labels = random_labels(2, {3, 2, 2}, 3, rng);
    std::vector<T64> in{uniform_tensor(Shape{2, 3, 3, 2, 2}, rng, -2.0, 2.0)};
    check("ce_loss", [&](Tape64& t, In x) { return train::ce_loss(t, x[0], labels); }, in, kOpTolerance);
    check("dice_loss", [&](Tape64& t, In x) { return train::dice_loss(t, x[0], labels); }, in, kOpTolerance);
    check("ce+dice",
          [&](Tape64& t, In x) { return ops::add(t, train::ce_loss(t, x[0], labels), train::dice_loss(t, x[0], labels)); },
          in, kOpTolerance);
  }

  if (options.include_model) {
    CounterRng rng = root.split(stream++);
    const net::Model<double> model(preset("micro"), rng.next_u64());
    std::vector<T64> inputs{uniform_tensor(Shape{1, 1, 8, 8, 8}, rng)};
    for (const auto& p : model.parameters()) inputs.push_back(p.tensor);
    const train::LabelBatch labels = random_labels(1, {8, 8, 8}, 2, rng);
    check("micro_model",
          [&](Tape64& tape, In in) { return train::total_loss(tape, model.forward(tape, in[0]), labels); },
          std::move(inputs), kModelTolerance, kModelProbes);
  }
  return reports;
}

bool all_passed(const std::vector<GradCheckReport>& reports) {
  for (const auto& r : reports) {
    if (!r.passed) return false;
  }
  return true;
}

std::string format_gradcheck_table(const std::vector<GradCheckReport>& reports) {
  std::ostringstream out;
  out << "op\tmax_rel_error\ttolerance\tprobes\tstatus\n";
  char buf[64];
  for (const auto& r : reports) {
    out << r.op_name << '\t';
    std::snprintf(buf, sizeof buf, "%.3e\t%.0e", r.max_rel_error, r.tolerance);
    out << buf << '\t' << r.probes << '\t' << (r.passed ? "pass" : "FAIL") << '\n';
  }
  return out.str();
}

namespace {

std::string triple(Extent3 e, char sep = 'x') {
  return std::to_string(e[0]) + sep + std::to_string(e[1]) + sep + std::to_string(e[2]);
}

}  // namespace

std::string format_stage_table(const std::vector<net::StageShape>& stages) {
  std::ostringstream out;
  out << "stage\trole\tlevel\textents\tchannels\theads\tattention\tvolume\tpadded\n";
  for (const auto& s : stages) {
    out << s.name << '\t' << net::to_string(s.role) << '\t' << s.level << '\t' << triple(s.extents) << '\t'
        << s.channels << '\t' << s.heads << '\t' << (s.global ? "global" : "local") << '\t' << triple(s.volume)
        << '\t' << triple(s.padded) << '\n';
  }
  return out.str();
}

bool ComplexityReport::matches() const {
  std::uint64_t total = 0;
  for (const auto& r : rows) {
    if (r.analytic != r.measured) return false;
    total += r.analytic;
  }
  return total == profile.attention_macs();
}

ComplexityReport complexity_report(const ModelConfig& config) {
  config.validate();
  const net::Model<float> model(config, 0);
  const Extent3 c = config.crop_size;
  const Tensor<float> x(Shape{1, config.in_channels, c[0], c[1], c[2]});
  Tape<float> tape(Tape<float>::Mode::kInference);
  (void)model.forward(tape, x);

  ComplexityReport report;
  report.profile = tape.mac_report();
  for (const auto& s : model.stages()) {
    const Extent3 p = s.padded;
    const std::uint64_t layer = s.global ? attention::omega_gv(p[0], p[1], p[2], s.channels)
                                         : attention::omega_lv(p[0], p[1], p[2], s.channels, s.volume);
    for (std::int64_t l = 0; l < config.blocks[static_cast<std::size_t>(s.level)]; ++l) {
      const std::string scope = s.name + "/layer" + std::to_string(l);
      report.rows.push_back({scope, s.global ? "gv" : "lv", p, s.channels, s.volume, layer,
                             report.profile.attention_macs(scope)});
    }
    if (s.role == net::StageRole::kDecoder) {
      const std::string scope = s.name + "/skip";
      report.rows.push_back({scope, "skip", p, s.channels, s.volume,
                             attention::omega_skip(p[0], p[1], p[2], s.channels, s.volume),
                             report.profile.attention_macs(scope)});
    }
  }
  return report;
}

std::string format_complexity(const ComplexityReport& report) {
  std::ostringstream out;
  out << "scope\tkind\tgrid\tchannels\tvolume\tomega_macs\tmeasured_macs\tratio\n";
  std::uint64_t analytic = 0;
  char buf[32];
  for (const auto& r : report.rows) {
    std::snprintf(buf, sizeof buf, "%.6f",
                  r.analytic == 0 ? 0.0 : static_cast<double>(r.measured) / static_cast<double>(r.analytic));
    out << r.scope << '\t' << r.kind << '\t' << triple(r.padded) << '\t' << r.channels << '\t' << triple(r.volume)
        << '\t' << r.analytic << '\t' << r.measured << '\t' << buf << '\n';
    analytic += r.analytic;
  }
  const std::uint64_t measured = report.profile.attention_macs();
  std::snprintf(buf, sizeof buf, "%.6f",
                analytic == 0 ? 0.0 : static_cast<double>(measured) / static_cast<double>(analytic));
  out << "attention_total\t-\t-\t-\t-\t" << analytic << '\t' << measured << '\t' << buf << '\n';
  for (std::size_t i = 0; i < kMacClassCount; ++i) {
    const auto cls = static_cast<MacClass>(i);
    out << "macs_" << to_string(cls) << '\t' << report.profile.macs_of(cls) << '\n';
  }
  out << "macs_total\t" << report.profile.total_macs() << '\n';
  out << "ops_total\t" << report.profile.total_ops() << '\n';
  return out.str();
}

}  // namespace nnformer::verify
