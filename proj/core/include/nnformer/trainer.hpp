#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nnformer/checkpoint.hpp"
#include "nnformer/losses.hpp"
#include "nnformer/metrics.hpp"
#include "nnformer/model.hpp"
#include "nnformer/optim.hpp"
#include "nnformer/synthetic.hpp"

namespace nnformer::train {

struct TrainOptions {
  OptimizerConfig optimizer;
  SyntheticParams data;
  AugmentParams augment;
  DeepSupervisionWeights weights = DeepSupervisionWeights::standard();
  std::int64_t val_scans = 4;
  std::uint64_t seed = 0;
  // Directory receiving train_log.tsv, final.ckpt and best.ckpt; empty
  // writes nothing.
  std::string out_dir;
};

struct EpochRecord {
  std::int64_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_dsc = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> log;
  double best_val_dsc = -1.0;
  std::int64_t best_epoch = -1;
};

// epoch, lr, train_loss, val_dsc separated by tabs, with a trailing newline.
std::string format_log_line(const EpochRecord& record);
std::string log_header();

// Seed of the i-th scan of a named stream derived from the run seed.
std::uint64_t scan_seed(std::uint64_t run_seed, std::uint64_t stream, std::uint64_t index);
inline constexpr std::uint64_t kTrainStream = 1;
inline constexpr std::uint64_t kValidationStream = 2;
inline constexpr std::uint64_t kAugmentStream = 3;
inline constexpr std::uint64_t kTestStream = 4;

// Runs max_epoch epochs of iters_per_epoch SGD steps on freshly generated,
// augmented scans, validating after each epoch. Throws NumericError on a
// non-finite loss; checkpoints from completed epochs stay on disk.
TrainResult train(net::Model<float>& model, const TrainOptions& options,
                  const std::function<void(const EpochRecord&)>& on_epoch = {});

// Softmax class probabilities [K, H, W, D] for one [C, H, W, D] volume.
Tensor<float> predict_probabilities(const net::Model<float>& model, const SyntheticScan& scan);

// Mean foreground DSC of the argmax prediction over the given scans.
double mean_dsc(const net::Model<float>& model, const std::vector<SyntheticScan>& scans);

// Argmax prediction of each scan scored against its label, averaged over
// the scans.
metrics::MetricReport evaluate_model(const net::Model<float>& model, const std::vector<SyntheticScan>& scans);
// Same, predicting with nn_avg of the two models' probability maps. Throws
// ConfigError when the models disagree on crop, classes or input channels.
metrics::MetricReport evaluate_ensemble(const net::Model<float>& a, const net::Model<float>& b,
                                        const std::vector<SyntheticScan>& scans);

// Validation or test scans for a run seed.
std::vector<SyntheticScan> held_out_scans(std::uint64_t run_seed, std::uint64_t stream, std::int64_t count,
                                          const SyntheticParams& params);

// Data parameters matching a model config: crop, classes and input channels.
SyntheticParams synthetic_params_for(const ModelConfig& config);

}  // namespace nnformer::train
