#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "spre/dataset.hpp"
#include "spre/model.hpp"
#include "spre/sparsity.hpp"
#include "spre/spre_block.hpp"

namespace spre {

enum class LrSchedule { kCosine, kStep };
enum class TrainMethod { kScratch, kPretrainFinetune };
enum class Precision { kF32, kF64 };

struct DataConfig {
  std::string kind = "synth";  // "synth" or "cifar10"
  SynthOptions synth;
  std::filesystem::path path;  // cifar10 directory
  std::vector<double> mean;    // cifar10 normalization; empty = from train
  std::vector<double> stddev;
};

struct OutputConfig {
  std::filesystem::path metrics;     // line-delimited JSON, one record per epoch
  std::filesystem::path checkpoint;  // final two-branch model
  std::filesystem::path profile;     // final main-mask profiles as CSV
};

struct TrainConfig {
  std::size_t n = 2;
  std::size_t m = 4;
  SpReVariant variant = SpReVariant::kSpRe;
  MainMaskRule mask_rule = MainMaskRule::kNM;
  std::size_t epochs = 60;
  std::size_t batch_size = 128;
  double lr = 0.1;
  LrSchedule lr_schedule = LrSchedule::kCosine;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double ste_decay = 2e-4;
  std::size_t refresh_period = 0;  // optimizer steps; 0 = once per epoch
  std::uint64_t seed = 0;
  Precision dtype = Precision::kF32;
  TrainMethod method = TrainMethod::kScratch;
  std::size_t pretrain_epochs = 0;
  ExtraInit extra_init = ExtraInit::kSmallRandom;
  double extra_init_scale = 1e-2;
  double extra_bn_gamma = 0.0;  // zero: step 0 equals the plain N:M network
  TinyCNNConfig model;  // classes and input geometry are taken from the data
  DataConfig data;
  OutputConfig output;
  std::filesystem::path init_checkpoint;  // pretrain_finetune: skip the dense phase

  NMPattern pattern() const { return NMPattern(n, m); }
  /// Throws kConfig on any violated precondition.
  void validate() const;
};

/// Parses a JSON document; unknown keys are rejected.
TrainConfig parse_train_config(std::string_view json);
TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochRecord {
  std::size_t epoch = 0;
  std::string phase;  // "init", "train", "pretrain" or "finetune"
  double loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
  bool masks_ok = true;
};

struct ProfileSnapshot {
  std::size_t epoch = 0;
  std::vector<SparsityProfile> main;       // spatial sparsity of b_main
  std::vector<SparsityProfile> reference;  // spatial sparsity of b_ref
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
  std::vector<ProfileSnapshot> profiles;
  double final_accuracy = 0.0;
  std::uint64_t steps = 0;
  std::size_t mask_checks = 0;
  std::size_t mask_violations = 0;
};

template <typename T>
struct TrainHooks {
  /// Called after every optimizer step that refreshed at least one mask.
  std::function<void(const TinyCNN<T>&, std::uint64_t step)> on_refresh;
  std::function<void(const TinyCNN<T>&, const EpochRecord&)> on_epoch_end;
};

template <typename T>
struct TrainOutcome {
  RunMetrics metrics;
  TinyCNN<T> model;
};

/// Loads the configured dataset.
DatasetSplit load_data(const DataConfig& config);

/// Builds the initial model for `config` and `data` (no training).
template <typename T>
TinyCNN<T> initial_model(const TrainConfig& config, const Dataset& data);

/// Trains on an already loaded dataset; writes nothing to disk.
template <typename T>
TrainOutcome<T> train_on(const TrainConfig& config, const DatasetSplit& data,
                         const TrainHooks<T>& hooks = {});

/// Loads data, trains at the configured precision and writes the configured
/// outputs.
RunMetrics train(const TrainConfig& config);

/// Two unstructured runs at p = 1 - n/m, identical except for the mask rule:
/// free magnitude masks (first) and uniform-spatial masks (second).
template <typename T>
std::pair<TrainOutcome<T>, TrainOutcome<T>> run_uniform_ablation(
    const TrainConfig& config, const DatasetSplit& data);
std::pair<RunMetrics, RunMetrics> run_uniform_ablation(const TrainConfig& config);

template <typename T>
std::vector<int> predict(const TinyCNN<T>& model, const Dataset& data);
template <typename T>
std::vector<int> predict(const MergedModel<T>& model, const Dataset& data);

/// Fraction of predictions equal to the labels; kInvalidArgument when empty.
double accuracy(const std::vector<int>& predictions, const Dataset& data);

template <typename T>
double evaluate(const TinyCNN<T>& model, const Dataset& data) {
  return accuracy(predict(model, data), data);
}
template <typename T>
double evaluate(const MergedModel<T>& model, const Dataset& data) {
  return accuracy(predict(model, data), data);
}

/// Learning rate at optimizer step `step` of `total_steps`.
double scheduled_lr(const TrainConfig& config, std::uint64_t step,
                    std::uint64_t total_steps);

}  // namespace spre
