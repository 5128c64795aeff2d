#include "spre/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "spre/checkpoint.hpp"
#include "spre/error.hpp"
#include "spre/report.hpp"

namespace spre {

namespace {

using nlohmann::json;

constexpr std::uint64_t kExtraStream = 0x9E3779B97F4A7C15ull;
constexpr std::uint64_t kShuffleStream = 0xD1B54A32D192ED03ull;
constexpr std::size_t kEvalBatch = 256;

[[noreturn]] void config_error(const std::string& msg) {
  throw Error(ErrorCode::kConfig, msg);
}

void reject_unknown(const json& obj, std::initializer_list<std::string_view> keys,
                    const std::string& where) {
  if (!obj.is_object()) config_error(where + " must be a JSON object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) {
      config_error("unknown key '" + where + key + "'");
    }
  }
}

template <typename V>
void read(const json& obj, const char* key, V& out, const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->template get<V>();
  } catch (const json::exception&) {
    config_error("key '" + where + key + "' has the wrong type");
  }
}

void read_size(const json& obj, const char* key, std::size_t& out,
               const std::string& where) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  if (!it->is_number_unsigned()) {
    config_error("key '" + where + key + "' must be a non-negative integer");
  }
  out = it->get<std::size_t>();
}

std::size_t steps_per_epoch(std::size_t samples, std::size_t batch) {
  // A trailing batch of a single sample is dropped (batch statistics need two).
  std::size_t steps = samples / batch;
  if (samples % batch >= 2) ++steps;
  return std::max<std::size_t>(steps, 1);
}

SpReBlockOptions block_options(const TrainConfig& config, std::size_t epoch_steps) {
  SpReBlockOptions opts;
  opts.pattern = config.pattern();
  opts.variant = config.variant;
  opts.rule = config.mask_rule;
  opts.schedule = MaskSchedule::kDynamic;
  opts.refresh_period =
      config.refresh_period == 0 ? epoch_steps : config.refresh_period;
  opts.extra_init = config.extra_init;
  opts.extra_init_scale = config.extra_init_scale;
  opts.extra_bn_gamma = config.extra_bn_gamma;
  return opts;
}

TinyCNNConfig model_config_for(const TrainConfig& config, const Dataset& data) {
  TinyCNNConfig mc = config.model;
  mc.classes = data.classes;
  mc.input_channels = data.channels;
  mc.input_size = data.height;
  return mc;
}

template <typename T>
bool masks_valid(const TinyCNN<T>& model) {
  for (const auto& block : model.blocks) {
    try {
      block.check_invariants();
    } catch (const Error&) {
      return false;
    }
  }
  return true;
}

template <typename T>
ProfileSnapshot snapshot(const TinyCNN<T>& model, std::size_t epoch) {
  ProfileSnapshot s;
  s.epoch = epoch;
  for (const auto& block : model.blocks) {
    s.main.push_back(spatial_sparsity(block.b_main, block.name));
    s.reference.push_back(spatial_sparsity(block.b_ref, block.name));
  }
  return s;
}

struct EvalResult {
  double loss = 0.0;
  double acc = 0.0;
};

template <typename T>
EvalResult eval_loss(const TinyCNN<T>& model, const Dataset& data) {
  EvalResult r;
  if (data.size() == 0) return r;
  std::vector<std::size_t> idx;
  double loss = 0.0;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
    const std::size_t end = std::min(data.size(), start + kEvalBatch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const auto logits = model.forward_eval(data.batch<T>(idx));
    const auto labels = data.batch_labels(idx);
    loss += static_cast<double>(softmax_cross_entropy<T>(logits, labels).loss) *
            static_cast<double>(idx.size());
    for (std::size_t b = 0; b < idx.size(); ++b) {
      const T* row = logits.data.data() + b * logits.cols;
      const auto best = std::max_element(row, row + logits.cols) - row;
      if (best == labels[b]) ++correct;
    }
  }
  r.loss = loss / static_cast<double>(data.size());
  r.acc = static_cast<double>(correct) / static_cast<double>(data.size());
  return r;
}

template <typename Logits>
std::vector<int> argmax_rows(const Logits& logits) {
  std::vector<int> out(logits.rows);
  for (std::size_t b = 0; b < logits.rows; ++b) {
    const auto* row = logits.data.data() + b * logits.cols;
    out[b] = static_cast<int>(std::max_element(row, row + logits.cols) - row);
  }
  return out;
}

template <typename Fn>
std::vector<int> predict_batched(const Dataset& data, Fn&& forward) {
  std::vector<int> out;
  out.reserve(data.size());
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < data.size(); start += kEvalBatch) {
    const std::size_t end = std::min(data.size(), start + kEvalBatch);
    idx.resize(end - start);
    std::iota(idx.begin(), idx.end(), start);
    auto rows = argmax_rows(forward(idx));
    out.insert(out.end(), rows.begin(), rows.end());
  }
  return out;
}

// Runs `epochs` epochs on `model`, appending records numbered from
// `first_epoch`.
template <typename T>
void run_phase(TinyCNN<T>& model, const TrainConfig& config,
               const DatasetSplit& data, std::size_t epochs,
               std::size_t first_epoch, const std::string& phase,
               std::mt19937_64& shuffle_rng, RunMetrics& metrics,
               const TrainHooks<T>& hooks) {
  const Dataset& train = data.train;
  const std::size_t batch = std::min(config.batch_size, train.size());
  const std::size_t epoch_steps = steps_per_epoch(train.size(), batch);
  const std::uint64_t total = static_cast<std::uint64_t>(epoch_steps) * epochs;
  SgdOptimizer<T> opt({config.lr, config.momentum, config.weight_decay});
  const T decay = static_cast<T>(config.ste_decay);

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uint64_t phase_step = 0;
  ModelCache<T> cache;

  for (std::size_t e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    std::size_t correct = 0;
    double lr = config.lr;
    bool masks_ok = true;

    for (std::size_t s = 0; s < epoch_steps; ++s) {
      const std::size_t begin = s * batch;
      const std::size_t end = std::min(train.size(), begin + batch);
      std::span<const std::size_t> idx(order.data() + begin, end - begin);
      const auto x = train.batch<T>(idx);
      const auto labels = train.batch_labels(idx);

      lr = scheduled_lr(config, phase_step, total);
      opt.set_lr(lr);
      const auto logits = model.forward(x, Mode::kTrain, &cache);
      const auto lg = softmax_cross_entropy<T>(logits, labels);
      const auto grads = model.backward(cache, lg.grad_logits, decay);
      const auto slots = model.param_slots(grads);
      opt.step(slots);

      loss_sum += static_cast<double>(lg.loss) * static_cast<double>(idx.size());
      seen += idx.size();
      const auto pred = argmax_rows(logits);
      for (std::size_t b = 0; b < pred.size(); ++b) correct += pred[b] == labels[b];

      ++phase_step;
      ++metrics.steps;
      bool refreshed = false;
      for (auto& block : model.blocks) {
        refreshed = refresh_masks(block, static_cast<std::size_t>(phase_step)) ||
                    refreshed;
      }
      if (refreshed) {
        ++metrics.mask_checks;
        if (!masks_valid(model)) {
          ++metrics.mask_violations;
          masks_ok = false;
        }
        if (hooks.on_refresh) hooks.on_refresh(model, metrics.steps);
      }
    }

    ++metrics.mask_checks;
    if (!masks_valid(model)) {
      ++metrics.mask_violations;
      masks_ok = false;
    }
    EpochRecord rec;
    rec.epoch = first_epoch + e;
    rec.phase = phase;
    rec.loss = loss_sum / static_cast<double>(std::max<std::size_t>(seen, 1));
    rec.train_acc = static_cast<double>(correct) /
                    static_cast<double>(std::max<std::size_t>(seen, 1));
    rec.val_acc = eval_loss(model, data.val).acc;
    rec.lr = lr;
    rec.masks_ok = masks_ok;
    metrics.epochs.push_back(rec);
    metrics.profiles.push_back(snapshot(model, rec.epoch));
    if (hooks.on_epoch_end) hooks.on_epoch_end(model, rec);
  }
}

// Turns every block of a pre-trained model into a frozen N:M block whose
// masks come from the pre-trained weights.
template <typename T>
void convert_pretrained(TinyCNN<T>& model, const TrainConfig& config,
                        std::mt19937_64& extra_rng) {
  config.model.validate(config.m);
  SpReBlockOptions opts = block_options(config, 1);
  opts.rule = MainMaskRule::kNM;
  opts.schedule = MaskSchedule::kFrozen;
  for (auto& block : model.blocks) {
    opts.spec = block.spec;
    auto converted = make_spre_block(block.name, block.w_main, opts, extra_rng);
    converted.bn_main = block.bn_main;
    block = std::move(converted);
  }
}

template <typename T>
void record_initial(const TinyCNN<T>& model, const DatasetSplit& data,
                    const TrainConfig& config, RunMetrics& metrics,
                    const TrainHooks<T>& hooks) {
  const auto train = eval_loss(model, data.train);
  EpochRecord rec;
  rec.epoch = 0;
  rec.phase = "init";
  rec.loss = train.loss;
  rec.train_acc = train.acc;
  rec.val_acc = eval_loss(model, data.val).acc;
  rec.lr = config.lr;
  ++metrics.mask_checks;
  rec.masks_ok = masks_valid(model);
  if (!rec.masks_ok) ++metrics.mask_violations;
  metrics.epochs.push_back(rec);
  metrics.profiles.push_back(snapshot(model, 0));
  if (hooks.on_epoch_end) hooks.on_epoch_end(model, rec);
}

TrainMethod parse_method(const std::string& s) {
  if (s == "scratch") return TrainMethod::kScratch;
  if (s == "pretrain_finetune") return TrainMethod::kPretrainFinetune;
  config_error("method must be 'scratch' or 'pretrain_finetune', got '" + s + "'");
}

}  // namespace

void TrainConfig::validate() const {
  if (n < 1 || n > m) {
    config_error("pattern needs 1 <= n <= m, got " + std::to_string(n) + ":" +
                 std::to_string(m));
  }
  if (batch_size < 2) config_error("batch_size must be >= 2");
  if (!(lr >= 0) || !std::isfinite(lr)) config_error("lr must be >= 0");
  if (!(momentum >= 0 && momentum < 1)) config_error("momentum must be in [0, 1)");
  if (!(weight_decay >= 0)) config_error("weight_decay must be >= 0");
  if (!(ste_decay >= 0)) config_error("ste_decay must be >= 0");
  if (!(extra_init_scale >= 0)) config_error("extra_init_scale must be >= 0");
  if (mask_rule != MainMaskRule::kNM && variant != SpReVariant::kNone) {
    config_error("an extra branch (variant '" + std::string(variant_name(variant)) +
                 "') requires mask_rule 'nm'");
  }
  if (method == TrainMethod::kPretrainFinetune && mask_rule != MainMaskRule::kNM) {
    config_error("pretrain_finetune requires mask_rule 'nm'");
  }
  if (data.kind != "synth" && data.kind != "cifar10") {
    config_error("data.kind must be 'synth' or 'cifar10', got '" + data.kind + "'");
  }
  if (data.kind == "synth" && data.synth.classes < 2) {
    config_error("data.classes must be >= 2");
  }
  if (data.kind == "cifar10" && data.path.empty()) {
    config_error("data.path is required for cifar10");
  }
  model.validate(mask_rule == MainMaskRule::kNM ? m : 1);
}

TrainConfig parse_train_config(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    config_error(std::string("config is not valid JSON: ") + e.what());
  }
  reject_unknown(doc,
                 {"n", "m", "variant", "mask_rule", "epochs", "batch_size", "lr",
                  "lr_schedule", "momentum", "weight_decay", "ste_decay",
                  "refresh_period", "seed", "dtype", "method", "pretrain_epochs",
                  "extra_init", "extra_init_scale", "extra_bn_gamma", "model", "data", "output",
                  "init_checkpoint"},
                 "");
  TrainConfig c;
  read_size(doc, "n", c.n, "");
  read_size(doc, "m", c.m, "");
  read_size(doc, "epochs", c.epochs, "");
  read_size(doc, "batch_size", c.batch_size, "");
  read_size(doc, "refresh_period", c.refresh_period, "");
  read_size(doc, "pretrain_epochs", c.pretrain_epochs, "");
  read(doc, "lr", c.lr, "");
  read(doc, "momentum", c.momentum, "");
  read(doc, "weight_decay", c.weight_decay, "");
  read(doc, "ste_decay", c.ste_decay, "");
  read(doc, "extra_init_scale", c.extra_init_scale, "");
  read(doc, "extra_bn_gamma", c.extra_bn_gamma, "");
  read(doc, "seed", c.seed, "");

  std::string s;
  try {
    if (s.clear(), read(doc, "variant", s, ""), !s.empty()) c.variant = parse_variant(s);
    if (s.clear(), read(doc, "mask_rule", s, ""), !s.empty()) c.mask_rule = parse_rule(s);
  } catch (const Error& e) {
    config_error(e.what());
  }
  if (s.clear(), read(doc, "lr_schedule", s, ""), !s.empty()) {
    if (s == "cosine") c.lr_schedule = LrSchedule::kCosine;
    else if (s == "step") c.lr_schedule = LrSchedule::kStep;
    else config_error("lr_schedule must be 'cosine' or 'step', got '" + s + "'");
  }
  if (s.clear(), read(doc, "dtype", s, ""), !s.empty()) {
    if (s == "f32") c.dtype = Precision::kF32;
    else if (s == "f64") c.dtype = Precision::kF64;
    else config_error("dtype must be 'f32' or 'f64', got '" + s + "'");
  }
  if (s.clear(), read(doc, "method", s, ""), !s.empty()) c.method = parse_method(s);
  if (s.clear(), read(doc, "extra_init", s, ""), !s.empty()) {
    if (s == "small_random") c.extra_init = ExtraInit::kSmallRandom;
    else if (s == "zeros") c.extra_init = ExtraInit::kZeros;
    else config_error("extra_init must be 'small_random' or 'zeros', got '" + s + "'");
  }
  if (s.clear(), read(doc, "init_checkpoint", s, ""), !s.empty()) c.init_checkpoint = s;

  if (auto it = doc.find("model"); it != doc.end()) {
    reject_unknown(*it, {"widths", "kernel", "blocks_per_stage"}, "model.");
    read(*it, "widths", c.model.widths, "model.");
    read_size(*it, "kernel", c.model.kernel, "model.");
    read_size(*it, "blocks_per_stage", c.model.blocks_per_stage, "model.");
  }
  if (auto it = doc.find("data"); it != doc.end()) {
    reject_unknown(*it,
                   {"kind", "seed", "classes", "samples_per_class", "image_size",
                    "noise", "path", "mean", "std"},
                   "data.");
    read(*it, "kind", c.data.kind, "data.");
    read(*it, "seed", c.data.synth.seed, "data.");
    read_size(*it, "classes", c.data.synth.classes, "data.");
    read_size(*it, "samples_per_class", c.data.synth.samples_per_class, "data.");
    read_size(*it, "image_size", c.data.synth.image_size, "data.");
    read(*it, "noise", c.data.synth.noise, "data.");
    if (s.clear(), read(*it, "path", s, "data."), !s.empty()) c.data.path = s;
    read(*it, "mean", c.data.mean, "data.");
    read(*it, "std", c.data.stddev, "data.");
  }
  if (auto it = doc.find("output"); it != doc.end()) {
    reject_unknown(*it, {"metrics", "checkpoint", "profile"}, "output.");
    if (s.clear(), read(*it, "metrics", s, "output."), !s.empty()) c.output.metrics = s;
    if (s.clear(), read(*it, "checkpoint", s, "output."), !s.empty()) c.output.checkpoint = s;
    if (s.clear(), read(*it, "profile", s, "output."), !s.empty()) c.output.profile = s;
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_train_config(ss.str());
}

DatasetSplit load_data(const DataConfig& config) {
  if (config.kind == "cifar10") return cifar10_load(config.path, config.mean, config.stddev);
  return synth_dataset(config.synth);
}

double scheduled_lr(const TrainConfig& config, std::uint64_t step,
                    std::uint64_t total_steps) {
  if (total_steps == 0) return config.lr;
  const double t = static_cast<double>(step) / static_cast<double>(total_steps);
  if (config.lr_schedule == LrSchedule::kCosine) {
    return config.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  }
  double lr = config.lr;
  if (t >= 0.5) lr *= 0.1;
  if (t >= 0.75) lr *= 0.1;
  return lr;
}

template <typename T>
TinyCNN<T> initial_model(const TrainConfig& config, const Dataset& data) {
  const std::size_t batch = std::min(config.batch_size, data.size());
  const std::size_t epoch_steps = steps_per_epoch(data.size(), std::max<std::size_t>(batch, 1));
  SpReBlockOptions opts = block_options(config, epoch_steps);
  if (config.method == TrainMethod::kPretrainFinetune) {
    opts.rule = MainMaskRule::kDense;
    opts.variant = SpReVariant::kNone;
  }
  std::mt19937_64 rng(config.seed);
  std::mt19937_64 extra_rng(config.seed ^ kExtraStream);
  return TinyCNN<T>::create(model_config_for(config, data), opts, rng, extra_rng);
}

template <typename T>
TrainOutcome<T> train_on(const TrainConfig& config, const DatasetSplit& data,
                         const TrainHooks<T>& hooks) {
  config.validate();
  if (data.train.size() < 2) {
    throw Error(ErrorCode::kConfig, "training set needs at least 2 samples");
  }
  TrainOutcome<T> out;
  std::mt19937_64 shuffle_rng(config.seed ^ kShuffleStream);
  std::mt19937_64 extra_rng(config.seed ^ kExtraStream ^ 1u);

  if (config.method == TrainMethod::kScratch) {
    out.model = initial_model<T>(config, data.train);
    record_initial(out.model, data, config, out.metrics, hooks);
    run_phase(out.model, config, data, config.epochs, 1, "train", shuffle_rng,
              out.metrics, hooks);
  } else {
    std::size_t next_epoch = 1;
    if (!config.init_checkpoint.empty()) {
      out.model = model_from_checkpoint<T>(load_checkpoint(config.init_checkpoint));
      const auto& mc = out.model.config;
      if (mc.classes != data.train.classes ||
          mc.input_channels != data.train.channels) {
        throw Error(ErrorCode::kConfig,
                    "init_checkpoint was trained for a different dataset");
      }
      record_initial(out.model, data, config, out.metrics, hooks);
    } else {
      out.model = initial_model<T>(config, data.train);
      record_initial(out.model, data, config, out.metrics, hooks);
      run_phase(out.model, config, data, config.pretrain_epochs, next_epoch,
                "pretrain", shuffle_rng, out.metrics, hooks);
      next_epoch += config.pretrain_epochs;
    }
    convert_pretrained(out.model, config, extra_rng);
    run_phase(out.model, config, data, config.epochs, next_epoch, "finetune",
              shuffle_rng, out.metrics, hooks);
  }
  out.metrics.final_accuracy = out.metrics.epochs.back().val_acc;
  return out;
}

namespace {

template <typename T>
void write_outputs(const TrainConfig& config, const TrainOutcome<T>& out) {
  if (!config.output.metrics.empty()) {
    write_file_atomic(config.output.metrics, metrics_to_jsonl(out.metrics));
  }
  if (!config.output.checkpoint.empty()) {
    save_checkpoint(config.output.checkpoint, model_to_checkpoint(out.model));
  }
  if (!config.output.profile.empty()) {
    std::vector<SparsityProfile> profiles;
    for (const auto& block : out.model.blocks) {
      profiles.push_back(spatial_sparsity(block.b_main, block.name));
    }
    write_file_atomic(config.output.profile, profiles_to_csv(profiles));
  }
}

template <typename T>
RunMetrics train_typed(const TrainConfig& config) {
  const auto data = load_data(config.data);
  auto out = train_on<T>(config, data);
  write_outputs(config, out);
  return std::move(out.metrics);
}

}  // namespace

RunMetrics train(const TrainConfig& config) {
  config.validate();
  return config.dtype == Precision::kF64 ? train_typed<double>(config)
                                         : train_typed<float>(config);
}

template <typename T>
std::pair<TrainOutcome<T>, TrainOutcome<T>> run_uniform_ablation(
    const TrainConfig& config, const DatasetSplit& data) {
  TrainConfig free_cfg = config;
  free_cfg.variant = SpReVariant::kNone;
  free_cfg.method = TrainMethod::kScratch;
  free_cfg.mask_rule = MainMaskRule::kMagnitude;
  TrainConfig uniform_cfg = free_cfg;
  uniform_cfg.mask_rule = MainMaskRule::kUniformSpatial;
  return {train_on<T>(free_cfg, data), train_on<T>(uniform_cfg, data)};
}

std::pair<RunMetrics, RunMetrics> run_uniform_ablation(const TrainConfig& config) {
  const auto data = load_data(config.data);
  if (config.dtype == Precision::kF64) {
    auto r = run_uniform_ablation<double>(config, data);
    return {std::move(r.first.metrics), std::move(r.second.metrics)};
  }
  auto r = run_uniform_ablation<float>(config, data);
  return {std::move(r.first.metrics), std::move(r.second.metrics)};
}

template <typename T>
std::vector<int> predict(const TinyCNN<T>& model, const Dataset& data) {
  return predict_batched(data, [&](std::span<const std::size_t> idx) {
    return model.forward_eval(data.batch<T>(idx));
  });
}

template <typename T>
std::vector<int> predict(const MergedModel<T>& model, const Dataset& data) {
  return predict_batched(data, [&](std::span<const std::size_t> idx) {
    return model.forward(data.batch<T>(idx));
  });
}

double accuracy(const std::vector<int>& predictions, const Dataset& data) {
  if (data.size() == 0) {
    throw Error(ErrorCode::kInvalidArgument, "accuracy of an empty dataset");
  }
  if (predictions.size() != data.size()) {
    throw Error(ErrorCode::kShapeMismatch, "prediction count differs from dataset size");
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += predictions[i] == data.labels[i];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

#define SPRE_INSTANTIATE_TRAINER(T)                                            \
  template TinyCNN<T> initial_model(const TrainConfig&, const Dataset&);       \
  template TrainOutcome<T> train_on(const TrainConfig&, const DatasetSplit&,   \
                                    const TrainHooks<T>&);                     \
  template std::pair<TrainOutcome<T>, TrainOutcome<T>> run_uniform_ablation(   \
      const TrainConfig&, const DatasetSplit&);                                \
  template std::vector<int> predict(const TinyCNN<T>&, const Dataset&);        \
  template std::vector<int> predict(const MergedModel<T>&, const Dataset&);

SPRE_INSTANTIATE_TRAINER(float)
SPRE_INSTANTIATE_TRAINER(double)

#undef SPRE_INSTANTIATE_TRAINER

}  // namespace spre
