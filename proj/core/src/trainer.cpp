#include "nnformer/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "nnformer/errors.hpp"
#include "nnformer/rng.hpp"

namespace nnformer::train {

std::string log_header() { return "epoch\tlr\ttrain_loss\tval_dsc\n"; }

std::string format_log_line(const EpochRecord& record) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%lld\t%.17g\t%.9g\t%.6f\n", static_cast<long long>(record.epoch), record.lr,
                record.train_loss, record.val_dsc);
  return buf;
}

std::uint64_t scan_seed(std::uint64_t run_seed, std::uint64_t stream, std::uint64_t index) {
  return CounterRng(run_seed).split(stream).split(index).next_u64();
}

std::vector<SyntheticScan> held_out_scans(std::uint64_t run_seed, std::uint64_t stream, std::int64_t count,
                                          const SyntheticParams& params) {
  std::vector<SyntheticScan> out;
  for (std::int64_t i = 0; i < count; ++i) {
    out.push_back(gen_synthetic(scan_seed(run_seed, stream, static_cast<std::uint64_t>(i)), params));
  }
  return out;
}

SyntheticParams synthetic_params_for(const ModelConfig& config) {
  SyntheticParams p;
  p.crop = config.crop_size;
  p.num_classes = config.num_classes;
  p.in_channels = config.in_channels;
  return p;
}

Tensor<float> predict_probabilities(const net::Model<float>& model, const SyntheticScan& scan) {
  Tape<float> tape(Tape<float>::Mode::kInference);
  const Tensor<float> x = stack_volumes({scan});
  const Tensor<float> logits = model.forward(tape, x).logits_full;
  const Shape& s = logits.shape();
  const std::int64_t k = s[1];
  const std::int64_t n = s[2] * s[3] * s[4];
  Tensor<float> probs(Shape{k, s[2], s[3], s[4]});
  const auto z = logits.data();
  auto p = probs.mutable_data();
  for (std::int64_t v = 0; v < n; ++v) {
    float m = z[v];
    for (std::int64_t c = 1; c < k; ++c) m = std::max(m, z[c * n + v]);
    float total = 0.0f;
    for (std::int64_t c = 0; c < k; ++c) {
      p[c * n + v] = std::exp(z[c * n + v] - m);
      total += p[c * n + v];
    }
    for (std::int64_t c = 0; c < k; ++c) p[c * n + v] /= total;
  }
  return probs;
}

double mean_dsc(const net::Model<float>& model, const std::vector<SyntheticScan>& scans) {
  if (scans.empty()) throw UsageError("mean_dsc: no scans");
  double sum = 0.0;
  int count = 0;
  const metrics::Spacing unit{1.0, 1.0, 1.0};
  for (const auto& scan : scans) {
    const auto pred = metrics::argmax_mask(predict_probabilities(model, scan), unit);
    const auto report = metrics::evaluate(pred, scan.mask(unit), model.config().num_classes);
    if (report.mean_dsc) {
      sum += *report.mean_dsc;
      ++count;
    }
  }
  return count > 0 ? sum / count : 1.0;
}

metrics::MetricReport evaluate_model(const net::Model<float>& model, const std::vector<SyntheticScan>& scans) {
  if (scans.empty()) throw UsageError("evaluate_model: no scans");
  const metrics::Spacing unit{1.0, 1.0, 1.0};
  std::vector<metrics::MetricReport> reports;
  for (const auto& scan : scans) {
    const auto pred = metrics::argmax_mask(predict_probabilities(model, scan), unit);
    reports.push_back(metrics::evaluate(pred, scan.mask(unit), model.config().num_classes));
  }
  return metrics::average_reports(reports);
}

metrics::MetricReport evaluate_ensemble(const net::Model<float>& a, const net::Model<float>& b,
                                        const std::vector<SyntheticScan>& scans) {
  const ModelConfig& ca = a.config();
  const ModelConfig& cb = b.config();
  if (ca.crop_size != cb.crop_size || ca.num_classes != cb.num_classes || ca.in_channels != cb.in_channels) {
    throw ConfigError("evaluate_ensemble: models '" + ca.name + "' and '" + cb.name +
                      "' differ in crop, classes or input channels");
  }
  if (scans.empty()) throw UsageError("evaluate_ensemble: no scans");
  const metrics::Spacing unit{1.0, 1.0, 1.0};
  std::vector<metrics::MetricReport> reports;
  for (const auto& scan : scans) {
    const auto pred = metrics::nn_avg(predict_probabilities(a, scan), predict_probabilities(b, scan), unit);
    reports.push_back(metrics::evaluate(pred, scan.mask(unit), ca.num_classes));
  }
  return metrics::average_reports(reports);
}

TrainResult train(net::Model<float>& model, const TrainOptions& options,
                  const std::function<void(const EpochRecord&)>& on_epoch) {
  const OptimizerConfig& opt = options.optimizer;
  opt.validate();
  options.data.validate();
  const ModelConfig& cfg = model.config();
  if (options.data.crop != cfg.crop_size || options.data.num_classes != cfg.num_classes ||
      options.data.in_channels != cfg.in_channels) {
    throw ConfigError("train: synthetic data does not match the model's crop, classes or input channels");
  }
  if (options.val_scans <= 0) throw ConfigError("train: val_scans must be positive");

  const bool write = !options.out_dir.empty();
  std::ofstream log;
  std::string final_path, best_path;
  if (write) {
    std::filesystem::create_directories(options.out_dir);
    const std::filesystem::path dir(options.out_dir);
    final_path = (dir / "final.ckpt").string();
    best_path = (dir / "best.ckpt").string();
    log.open(dir / "train_log.tsv", std::ios::trunc);
    if (!log) throw UsageError("train: cannot write " + (dir / "train_log.tsv").string());
    log << log_header() << std::flush;
  }

  Sgd<float> sgd(model.parameters(), opt);
  const auto validation = held_out_scans(options.seed, kValidationStream, options.val_scans, options.data);
  TrainResult result;
  std::uint64_t sample = 0;

  for (std::int64_t epoch = 0; epoch < opt.max_epoch; ++epoch) {
    const double lr = poly_lr(epoch, opt);
    double loss_sum = 0.0;
    for (std::int64_t it = 0; it < opt.iters_per_epoch; ++it) {
      std::vector<SyntheticScan> batch;
      for (std::int64_t b = 0; b < opt.batch_size; ++b, ++sample) {
        const SyntheticScan scan = gen_synthetic(scan_seed(options.seed, kTrainStream, sample), options.data);
        CounterRng aug_rng = CounterRng(options.seed).split(kAugmentStream).split(sample);
        batch.push_back(augment(scan, aug_rng, options.augment));
      }
      Tape<float> tape;
      const auto out = model.forward(tape, stack_volumes(batch));
      const Tensor<float> loss = total_loss(tape, out, stack_labels(batch), options.weights);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch) + ", iteration " +
                           std::to_string(it));
      }
      loss_sum += value;
      sgd.zero_grad();
      tape.backward(loss);
      sgd.step(lr);
    }

    EpochRecord record{epoch, lr, loss_sum / static_cast<double>(opt.iters_per_epoch),
                       mean_dsc(model, validation)};
    result.log.push_back(record);
    const bool best = record.val_dsc > result.best_val_dsc;
    if (best) {
      result.best_val_dsc = record.val_dsc;
      result.best_epoch = epoch;
    }
    if (write) {
      log << format_log_line(record) << std::flush;
      const Checkpoint ckpt = capture(model, &sgd, options.seed, static_cast<std::uint64_t>(epoch + 1));
      save_checkpoint(final_path, ckpt);
      if (best) save_checkpoint(best_path, ckpt);
    }
    if (on_epoch) on_epoch(record);
  }
  return result;
}

}  // namespace nnformer::train
