#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "nnformer/checkpoint.hpp"
#include "nnformer/config.hpp"
#include "nnformer/errors.hpp"
#include "nnformer/trainer.hpp"
#include "nnformer/verification.hpp"

using namespace nnformer;

namespace {

enum ExitCode : int { kOk = 0, kVerificationFailure = 1, kUsageError = 2, kDataError = 3 };

using Settings = std::vector<std::pair<std::string, std::string>>;

ModelConfig resolve_config(const std::string& arg) {
  if (std::filesystem::is_regular_file(arg)) return load_config(arg);
  return preset(arg);
}

void echo_lines(const std::string& text) {
  std::string line;
  for (char ch : text) {
    if (ch == '\n') {
      std::cout << "# " << line << '\n';
      line.clear();
    } else {
      line += ch;
    }
  }
  if (!line.empty()) std::cout << "# " << line << '\n';
}

std::string optimizer_text(const train::OptimizerConfig& o) {
  return "optimizer.initial_lr = " + format_double(o.initial_lr) + "\n" +
         "optimizer.momentum = " + format_double(o.momentum) + "\n" +
         "optimizer.weight_decay = " + format_double(o.weight_decay) + "\n" +
         "optimizer.lr_power = 0.9\n" +
         "optimizer.max_epoch = " + std::to_string(o.max_epoch) + "\n" +
         "optimizer.iters_per_epoch = " + std::to_string(o.iters_per_epoch) + "\n" +
         "optimizer.batch_size = " + std::to_string(o.batch_size) + "\n";
}

std::string data_text(const train::SyntheticParams& d, const train::AugmentParams& a) {
  return "data.radius_min = " + format_double(d.radius_min) + "\n" +
         "data.radius_max = " + format_double(d.radius_max) + "\n" +
         "data.intensity_step = " + format_double(d.intensity_step) + "\n" +
         "data.noise_sigma = " + format_double(d.noise_sigma) + "\n" +
         "augment.flip_prob = " + format_double(a.flip_prob) + "\n" +
         "augment.noise_sigma = " + format_double(a.noise_sigma) + "\n";
}

void echo(const std::string& command, const Settings& settings, const std::string& extra = {}) {
  std::cout << "# nnformer " << command << '\n';
  for (const auto& [k, v] : settings) std::cout << "# " << k << " = " << v << '\n';
  echo_lines(extra);
}

int run_gradcheck(std::uint64_t seed, bool inject_fault) {
  echo("gradcheck", {{"seed", std::to_string(seed)},
                     {"op_tolerance", format_double(verify::kOpTolerance)},
                     {"model_tolerance", format_double(verify::kModelTolerance)},
                     {"inject_fault", inject_fault ? "true" : "false"}});
  const auto reports = verify::gradcheck_suite({.seed = seed, .analytic_bias = inject_fault ? 1e-2 : 0.0});
  std::cout << verify::format_gradcheck_table(reports);
  const bool ok = verify::all_passed(reports);
  std::cout << "result\t" << (ok ? "pass" : "FAIL") << '\n';
  return ok ? kOk : kVerificationFailure;
}

int run_shapes(const std::string& config_arg) {
  const ModelConfig config = resolve_config(config_arg);
  config.validate();
  echo("shapes", {{"config", config_arg}}, config_to_text(config));
  const auto stages = net::plan_stages(config);
  std::cout << verify::format_stage_table(stages);

  const auto levels = net::level_extents(config);
  bool ok = true;
  for (const auto& s : stages) ok = ok && s.extents == levels[static_cast<std::size_t>(s.level)];
  auto row = [](const char* name, Extent3 e, std::int64_t k) {
    std::cout << name << '\t' << k << 'x' << e[0] << 'x' << e[1] << 'x' << e[2] << '\n';
  };
  std::cout << "output\tshape\n";
  row("logits_full", config.crop_size, config.num_classes);
  row("logits_mid", levels[0], config.num_classes);
  row("logits_low", levels[1], config.num_classes);
  std::cout << "result\t" << (ok ? "pass" : "FAIL") << '\n';
  return ok ? kOk : kVerificationFailure;
}

int run_complexity(const std::string& config_arg) {
  const ModelConfig config = resolve_config(config_arg);
  config.validate();
  echo("complexity", {{"config", config_arg}}, config_to_text(config));
  const auto report = verify::complexity_report(config);
  std::cout << verify::format_complexity(report);
  const bool ok = report.matches();
  std::cout << "result\t" << (ok ? "pass" : "FAIL") << '\n';
  return ok ? kOk : kVerificationFailure;
}

struct TrainFlags {
  std::string config = "toy";
  std::uint64_t seed = 0;
  std::string out;
  std::int64_t epochs = 50;
  std::int64_t iters = 25;
  std::int64_t batch = 2;
  std::int64_t val_scans = 4;
  bool full_res_only = false;
};

int run_train(const TrainFlags& f) {
  const ModelConfig config = resolve_config(f.config);
  config.validate();
  train::TrainOptions opts;
  opts.optimizer.max_epoch = f.epochs;
  opts.optimizer.iters_per_epoch = f.iters;
  opts.optimizer.batch_size = f.batch;
  opts.optimizer.validate();
  opts.data = train::synthetic_params_for(config);
  opts.val_scans = f.val_scans;
  opts.seed = f.seed;
  opts.out_dir = f.out;
  if (f.full_res_only) opts.weights = train::DeepSupervisionWeights::full_resolution_only();
  const auto& w = opts.weights;
  echo("train",
       {{"config", f.config},
        {"seed", std::to_string(f.seed)},
        {"out", f.out},
        {"val_scans", std::to_string(f.val_scans)},
        {"deep_supervision", format_double(w.full) + "," + format_double(w.mid) + "," + format_double(w.low)}},
       config_to_text(config) + optimizer_text(opts.optimizer) + data_text(opts.data, opts.augment));

  net::Model<float> model(config, f.seed);
  std::cout << train::log_header() << std::flush;
  const auto result = train::train(model, opts, [](const train::EpochRecord& r) {
    std::cout << train::format_log_line(r) << std::flush;
  });
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", result.best_val_dsc);
  std::cout << "best_epoch\t" << result.best_epoch << '\n' << "best_val_dsc\t" << buf << '\n';
  return kOk;
}

std::vector<train::SyntheticScan> test_scans(const ModelConfig& config, std::uint64_t seed, std::int64_t count) {
  if (count <= 0) throw UsageError("--scans must be positive");
  return train::held_out_scans(seed, train::kTestStream, count, train::synthetic_params_for(config));
}

int run_eval(const std::string& path, std::uint64_t seed, std::int64_t scans) {
  const train::Checkpoint ckpt = train::load_checkpoint(path);
  const net::Model<float> model = train::model_from_checkpoint(ckpt);
  echo("eval", {{"checkpoint", path}, {"seed", std::to_string(seed)}, {"scans", std::to_string(scans)}},
       config_to_text(model.config()));
  std::cout << metrics::format_report(train::evaluate_model(model, test_scans(model.config(), seed, scans)));
  return kOk;
}

int run_ensemble(const std::string& path_a, const std::string& path_b, std::uint64_t seed, std::int64_t scans) {
  const net::Model<float> a = train::model_from_checkpoint(train::load_checkpoint(path_a));
  const net::Model<float> b = train::model_from_checkpoint(train::load_checkpoint(path_b));
  echo("ensemble",
       {{"ckpt_a", path_a}, {"ckpt_b", path_b}, {"seed", std::to_string(seed)}, {"scans", std::to_string(scans)}},
       config_to_text(a.config()));
  std::cout << metrics::format_report(train::evaluate_ensemble(a, b, test_scans(a.config(), seed, scans)));
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric transformer segmentation toolkit"};
  app.require_subcommand(1);

  std::uint64_t seed = 0;
  bool inject_fault = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operator");
  gradcheck->add_option("--seed", seed, "Input seed");
  gradcheck->add_flag("--inject-fault", inject_fault, "Bias every analytic gradient (the suite must fail)");

  std::string config_arg;
  auto* shapes = app.add_subcommand("shapes", "Stage shape table of a configuration");
  shapes->add_option("--config", config_arg, "Preset name or config file")->required();
  auto* complexity = app.add_subcommand("complexity", "Closed-form attention cost against profiled MACs");
  complexity->add_option("--config", config_arg, "Preset name or config file")->required();

  TrainFlags tf;
  auto* trn = app.add_subcommand("train", "Train on synthetic ellipsoid volumes");
  trn->add_option("--config", tf.config, "Preset name or config file")->required();
  trn->add_option("--seed", tf.seed, "Run seed");
  trn->add_option("--out", tf.out, "Output directory")->required();
  trn->add_option("--epochs", tf.epochs, "Epochs")->capture_default_str();
  trn->add_option("--iters", tf.iters, "Iterations per epoch")->capture_default_str();
  trn->add_option("--batch", tf.batch, "Batch size")->capture_default_str();
  trn->add_option("--val-scans", tf.val_scans, "Validation scans")->capture_default_str();
  trn->add_flag("--full-res-only", tf.full_res_only, "Supervise the full-resolution output only");

  std::string ckpt, ckpt_a, ckpt_b;
  std::int64_t scans = 8;
  auto* eval = app.add_subcommand("eval", "Score a checkpoint on seeded synthetic test scans");
  eval->add_option("--checkpoint", ckpt, "Checkpoint file")->required();
  eval->add_option("--seed", seed, "Test-set seed");
  eval->add_option("--scans", scans, "Number of test scans")->capture_default_str();
  auto* ensemble = app.add_subcommand("ensemble", "Score the averaged predictions of two checkpoints");
  ensemble->add_option("--ckpt-a", ckpt_a, "First checkpoint")->required();
  ensemble->add_option("--ckpt-b", ckpt_b, "Second checkpoint")->required();
  ensemble->add_option("--seed", seed, "Test-set seed");
  ensemble->add_option("--scans", scans, "Number of test scans")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*gradcheck) return run_gradcheck(seed, inject_fault);
    if (*shapes) return run_shapes(config_arg);
    if (*complexity) return run_complexity(config_arg);
    if (*trn) return run_train(tf);
    if (*eval) return run_eval(ckpt, seed, scans);
    if (*ensemble) return run_ensemble(ckpt_a, ckpt_b, seed, scans);
  } catch (const ConfigError& e) {
    std::cout << std::flush;
    std::cerr << "config error: " << e.what() << '\n';
    return kUsageError;
  } catch (const DimensionError& e) {
    std::cout << std::flush;
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const UsageError& e) {
    std::cout << std::flush;
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsageError;
  } catch (const FormatError& e) {
    std::cout << std::flush;
    std::cerr << "format error: " << e.what() << '\n';
    return kDataError;
  } catch (const DataError& e) {
    std::cout << std::flush;
    std::cerr << "data error: " << e.what() << '\n';
    return kDataError;
  } catch (const NumericError& e) {
    std::cout << std::flush;
    std::cerr << "numeric error: " << e.what() << '\n';
    return kDataError;
  } catch (const std::exception& e) {
    std::cout << std::flush;
    std::cerr << "error: " << e.what() << '\n';
    return kVerificationFailure;
  }
  return kUsageError;
}
