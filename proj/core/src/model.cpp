#include "spre/model.hpp"

#include <algorithm>
#include <cmath>
#include <string_view>

#include "spre/error.hpp"

namespace spre {

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() &&
         s.substr(s.size() - suffix.size()) == suffix;
}

std::vector<std::string> layers_with_suffix(const Checkpoint& ckpt,
                                            std::string_view suffix) {
  std::vector<std::string> out;
  for (const auto& e : ckpt.entries()) {
    if (ends_with(e.name, suffix)) {
      out.push_back(e.name.substr(0, e.name.size() - suffix.size()));
    }
  }
  return out;
}

void put_values(Checkpoint& ckpt, const std::string& name,
                std::initializer_list<double> values) {
  std::vector<double> v(values);
  ckpt.put_vector<double>(name, v);
}

std::vector<double> get_values(const Checkpoint& ckpt, const std::string& name,
                               std::size_t expected) {
  auto v = ckpt.get_vector<double>(name);
  if (v.size() != expected) {
    throw Error(ErrorCode::kInvalidArgument,
                "entry '" + name + "' should hold " + std::to_string(expected) +
                    " values, found " + std::to_string(v.size()));
  }
  return v;
}

std::size_t as_size(double v, const std::string& what) {
  if (!(v >= 0) || v != std::floor(v)) {
    throw Error(ErrorCode::kInvalidArgument,
                what + ": expected a non-negative integer");
  }
  return static_cast<std::size_t>(v);
}

template <typename T>
Tensor4<T> he_normal(Shape4 shape, std::mt19937_64& rng) {
  Tensor4<T> w(shape);
  const double fan_in = static_cast<double>(shape.c_in * shape.k_h * shape.k_w);
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
  for (auto& v : w.data()) v = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
ConvSpec load_spec(const Checkpoint& ckpt, const std::string& name) {
  auto v = get_values(ckpt, name, 2);
  return ConvSpec{as_size(v[0], name), as_size(v[1], name)};
}

NMPattern load_pattern(const Checkpoint& ckpt, const std::string& name) {
  auto v = get_values(ckpt, name, 2);
  return NMPattern(as_size(v[0], name), as_size(v[1], name));
}

template <typename T>
FeatureMap<T> stem_eval(const StemLayer<T>& stem, const FeatureMap<T>& x) {
  return relu_forward(batchnorm_eval(stem.bn, conv2d_forward(stem.w, stem.spec, x)));
}

template <typename T>
Matrix<T> head_eval(const Matrix<T>& head_w, const std::vector<T>& head_b,
                    const FeatureMap<T>& x) {
  return linear_forward<T>(head_w, head_b, global_avg_pool_forward(x));
}

}  // namespace

void TinyCNNConfig::validate(std::size_t m) const {
  if (widths.empty()) throw Error(ErrorCode::kConfig, "model.widths is empty");
  if (kernel == 0 || blocks_per_stage == 0 || input_size == 0 ||
      input_channels == 0) {
    throw Error(ErrorCode::kConfig,
                "model kernel, blocks_per_stage, input_size and input_channels "
                "must be positive");
  }
  if (classes < 2) throw Error(ErrorCode::kConfig, "model.classes must be >= 2");
  for (std::size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] == 0) {
      throw Error(ErrorCode::kConfig, "model.widths must be positive");
    }
    if (m > 0 && widths[i] % m != 0) {
      throw Error(ErrorCode::kConfig,
                  "model width " + std::to_string(widths[i]) + " (stage " +
                      std::to_string(i) + ") is not divisible by m = " +
                      std::to_string(m));
    }
  }
}

std::string block_name(std::size_t stage, std::size_t index) {
  return "s" + std::to_string(stage) + "b" + std::to_string(index);
}

template <typename T>
TinyCNN<T> TinyCNN<T>::create(const TinyCNNConfig& config,
                              const SpReBlockOptions& block_options,
                              std::mt19937_64& rng, std::mt19937_64& extra_rng) {
  config.validate(block_options.rule == MainMaskRule::kNM ? block_options.pattern.m() : 1);
  TinyCNN<T> model;
  model.config = config;
  const std::size_t k = config.kernel;
  const ConvSpec same{1, k / 2};

  model.stem.w = he_normal<T>({config.widths[0], config.input_channels, k, k}, rng);
  model.stem.bn = BatchNormParams<T>(config.widths[0]);
  model.stem.spec = same;

  std::size_t c_in = config.widths[0];
  for (std::size_t s = 0; s < config.widths.size(); ++s) {
    for (std::size_t b = 0; b < config.blocks_per_stage; ++b) {
      SpReBlockOptions opts = block_options;
      opts.spec = (s > 0 && b == 0) ? ConvSpec{2, k / 2} : same;
      const std::size_t c_out = config.widths[s];
      auto w = he_normal<T>({c_out, c_in, k, k}, rng);
      model.blocks.push_back(
          make_spre_block(block_name(s, b), std::move(w), opts, extra_rng));
      c_in = c_out;
    }
  }

  model.head_w = Matrix<T>(config.classes, c_in);
  std::normal_distribution<double> head(0.0, 1.0 / std::sqrt(static_cast<double>(c_in)));
  for (auto& v : model.head_w.data) v = static_cast<T>(head(rng));
  model.head_b.assign(config.classes, T{0});
  return model;
}

template <typename T>
Matrix<T> TinyCNN<T>::forward(const FeatureMap<T>& x, Mode mode,
                              ModelCache<T>* cache) {
  if (mode == Mode::kEval) return forward_eval(x);
  ModelCache<T> local;
  ModelCache<T>& c = cache != nullptr ? *cache : local;
  c.input = x;
  c.stem_pre_relu = batchnorm_forward(stem.bn, conv2d_forward(stem.w, stem.spec, x),
                                      Mode::kTrain, &c.stem_bn);
  FeatureMap<T> h = relu_forward(c.stem_pre_relu);
  c.blocks.assign(blocks.size(), {});
  c.block_pre_relu.assign(blocks.size(), {});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    c.block_pre_relu[i] = spre_forward(blocks[i], h, Mode::kTrain, &c.blocks[i]);
    h = relu_forward(c.block_pre_relu[i]);
  }
  c.last_h = h.h();
  c.last_w = h.w();
  c.pooled = global_avg_pool_forward(h);
  return linear_forward<T>(head_w, head_b, c.pooled);
}

template <typename T>
Matrix<T> TinyCNN<T>::forward_eval(const FeatureMap<T>& x) const {
  FeatureMap<T> h = stem_eval(stem, x);
  for (const auto& block : blocks) h = relu_forward(spre_eval(block, h));
  return head_eval(head_w, head_b, h);
}

template <typename T>
ModelGrads<T> TinyCNN<T>::backward(const ModelCache<T>& cache,
                                   const Matrix<T>& grad_logits, T decay) const {
  if (cache.blocks.size() != blocks.size()) {
    throw Error(ErrorCode::kMissingCache, "TinyCNN::backward: no train-mode cache");
  }
  ModelGrads<T> g;
  auto head = linear_backward(head_w, cache.pooled, grad_logits);
  g.head_w = std::move(head.grad_weight);
  g.head_b = std::move(head.grad_bias);
  FeatureMap<T> grad = global_avg_pool_backward(head.grad_x, cache.last_h, cache.last_w);

  g.blocks.resize(blocks.size());
  for (std::size_t i = blocks.size(); i-- > 0;) {
    grad = relu_backward(cache.block_pre_relu[i], grad);
    g.blocks[i] = spre_backward_ste(blocks[i], cache.blocks[i], grad, decay);
    grad = std::move(g.blocks[i].grad_x);
  }
  grad = relu_backward(cache.stem_pre_relu, grad);
  auto bn = batchnorm_backward(stem.bn, cache.stem_bn, grad);
  g.stem_gamma = std::move(bn.grad_gamma);
  g.stem_beta = std::move(bn.grad_beta);
  // The stem gradient w.r.t. its input is never used.
  auto conv = conv2d_backward(stem.w, stem.spec, cache.input, bn.grad_x);
  g.stem_w = std::move(conv.grad_w);
  return g;
}

template <typename T>
std::vector<ParamSlot<T>> TinyCNN<T>::param_slots(const ModelGrads<T>& grads) {
  std::vector<ParamSlot<T>> slots;
  slots.push_back({stem.w.data(), grads.stem_w.data(), true});
  slots.push_back({stem.bn.gamma, grads.stem_gamma, false});
  slots.push_back({stem.bn.beta, grads.stem_beta, false});
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto& b = blocks[i];
    const auto& gb = grads.blocks[i];
    slots.push_back({b.w_main.data(), gb.grad_w_main.data(), true});
    slots.push_back({b.bn_main.gamma, gb.grad_gamma_main, false});
    slots.push_back({b.bn_main.beta, gb.grad_beta_main, false});
    if (b.has_extra()) {
      slots.push_back({b.w_extra.data(), gb.grad_w_extra.data(), true});
      slots.push_back({b.bn_extra.gamma, gb.grad_gamma_extra, false});
      slots.push_back({b.bn_extra.beta, gb.grad_beta_extra, false});
    }
  }
  slots.push_back({head_w.data, grads.head_w.data, true});
  slots.push_back({head_b, grads.head_b, false});
  return slots;
}

template <typename T>
Matrix<T> MergedModel<T>::forward(const FeatureMap<T>& x) const {
  FeatureMap<T> h = stem_eval(stem, x);
  for (const auto& conv : convs) h = relu_forward(merged_forward(conv, h));
  return head_eval(head_w, head_b, h);
}

template <typename T>
MergedModel<T> merge_model(const TinyCNN<T>& model) {
  MergedModel<T> merged;
  merged.config = model.config;
  merged.stem = model.stem;
  for (const auto& block : model.blocks) merged.convs.push_back(merge_branches(block));
  merged.head_w = model.head_w;
  merged.head_b = model.head_b;
  return merged;
}

// --- checkpoint mapping -----------------------------------------------------

template <typename T>
void save_bn(Checkpoint& ckpt, const std::string& prefix,
             const BatchNormParams<T>& bn) {
  ckpt.put_vector<T>(prefix + ".gamma", bn.gamma);
  ckpt.put_vector<T>(prefix + ".beta", bn.beta);
  ckpt.put_vector<T>(prefix + ".running_mean", bn.running_mean);
  ckpt.put_vector<T>(prefix + ".running_var", bn.running_var);
  put_values(ckpt, prefix + ".eps", {static_cast<double>(bn.eps)});
  put_values(ckpt, prefix + ".momentum", {static_cast<double>(bn.momentum)});
  put_values(ckpt, prefix + ".num_batches_tracked",
                {static_cast<double>(bn.num_batches_tracked)});
}

template <typename T>
BatchNormParams<T> load_bn(const Checkpoint& ckpt, const std::string& prefix) {
  BatchNormParams<T> bn;
  bn.gamma = ckpt.get_vector<T>(prefix + ".gamma");
  bn.beta = ckpt.get_vector<T>(prefix + ".beta");
  bn.running_mean = ckpt.get_vector<T>(prefix + ".running_mean");
  bn.running_var = ckpt.get_vector<T>(prefix + ".running_var");
  bn.eps = static_cast<T>(get_values(ckpt, prefix + ".eps", 1)[0]);
  bn.momentum = static_cast<T>(get_values(ckpt, prefix + ".momentum", 1)[0]);
  bn.num_batches_tracked = as_size(
      get_values(ckpt, prefix + ".num_batches_tracked", 1)[0], prefix);
  const std::size_t c = bn.gamma.size();
  if (bn.beta.size() != c || bn.running_mean.size() != c ||
      bn.running_var.size() != c) {
    throw Error(ErrorCode::kShapeMismatch,
                prefix + ": batch-norm vectors have different lengths");
  }
  return bn;
}

template <typename T>
void save_block(Checkpoint& ckpt, const SpReBlock<T>& block) {
  const std::string& n = block.name;
  ckpt.put_tensor(n + ".w_main", block.w_main);
  ckpt.put_mask(n + ".b_main", block.b_main);
  put_values(ckpt, n + ".pattern",
                {double(block.pattern.n()), double(block.pattern.m())});
  put_values(ckpt, n + ".spec",
                {double(block.spec.stride), double(block.spec.padding)});
  put_values(ckpt, n + ".variant", {double(static_cast<int>(block.variant))});
  put_values(ckpt, n + ".rule", {double(static_cast<int>(block.rule))});
  put_values(ckpt, n + ".schedule",
                {double(static_cast<int>(block.schedule)),
                 double(block.refresh_period)});
  save_bn(ckpt, n + ".bn_main", block.bn_main);
  if (block.has_extra()) {
    ckpt.put_tensor(n + ".w_extra", block.w_extra);
    ckpt.put_mask(n + ".b_extra", block.b_extra);
    ckpt.put_mask(n + ".b_ref", block.b_ref);
    save_bn(ckpt, n + ".bn_extra", block.bn_extra);
  }
}

template <typename T>
SpReBlock<T> load_block(const Checkpoint& ckpt, const std::string& name) {
  SpReBlock<T> block;
  block.name = name;
  block.w_main = ckpt.get_tensor<T>(name + ".w_main");
  block.b_main = ckpt.get_mask(name + ".b_main");
  block.pattern = load_pattern(ckpt, name + ".pattern");
  block.spec = load_spec<T>(ckpt, name + ".spec");
  const auto variant = as_size(get_values(ckpt, name + ".variant", 1)[0], name);
  const auto rule = as_size(get_values(ckpt, name + ".rule", 1)[0], name);
  if (variant > static_cast<std::size_t>(SpReVariant::kNone) ||
      rule > static_cast<std::size_t>(MainMaskRule::kDense)) {
    throw Error(ErrorCode::kInvalidArgument, name + ": unknown variant or rule code");
  }
  block.variant = static_cast<SpReVariant>(variant);
  block.rule = static_cast<MainMaskRule>(rule);
  if (ckpt.contains(name + ".schedule")) {
    auto sched = get_values(ckpt, name + ".schedule", 2);
    block.schedule = sched[0] == 0 ? MaskSchedule::kDynamic : MaskSchedule::kFrozen;
    block.refresh_period = std::max<std::size_t>(1, as_size(sched[1], name));
  }
  block.bn_main = load_bn<T>(ckpt, name + ".bn_main");
  // The reference mask only matters for the extra branch; rebuild it when
  // it was not stored.
  if (ckpt.contains(name + ".b_ref")) {
    block.b_ref = ckpt.get_mask(name + ".b_ref");
  } else {
    block.b_ref = magnitude_mask(block.w_main, block.pattern.sparsity());
  }
  if (block.has_extra()) {
    block.w_extra = ckpt.get_tensor<T>(name + ".w_extra");
    block.b_extra = ckpt.get_mask(name + ".b_extra");
    block.bn_extra = load_bn<T>(ckpt, name + ".bn_extra");
  }
  require_same_shape(block.w_main.shape(), block.b_main.shape(), "b_main");
  require_same_shape(block.w_main.shape(), block.b_ref.shape(), "b_ref");
  if (block.has_extra()) {
    require_same_shape(block.w_main.shape(), block.w_extra.shape(), "w_extra");
    require_same_shape(block.w_main.shape(), block.b_extra.shape(), "b_extra");
  }
  return block;
}

template <typename T>
void save_merged(Checkpoint& ckpt, const MergedConv<T>& merged) {
  const std::string& n = merged.name;
  ckpt.put_tensor(n + ".w_bar", merged.w_bar);
  ckpt.put_vector<T>(n + ".bias_bar", merged.bias_bar);
  ckpt.put_mask(n + ".mask", merged.mask);
  put_values(ckpt, n + ".pattern",
                {double(merged.pattern.n()), double(merged.pattern.m())});
  put_values(ckpt, n + ".spec",
                {double(merged.spec.stride), double(merged.spec.padding)});
}

template <typename T>
MergedConv<T> load_merged(const Checkpoint& ckpt, const std::string& name) {
  MergedConv<T> merged;
  merged.name = name;
  merged.w_bar = ckpt.get_tensor<T>(name + ".w_bar");
  merged.bias_bar = ckpt.get_vector<T>(name + ".bias_bar");
  merged.mask = ckpt.get_mask(name + ".mask");
  merged.pattern = load_pattern(ckpt, name + ".pattern");
  merged.spec = load_spec<T>(ckpt, name + ".spec");
  require_same_shape(merged.w_bar.shape(), merged.mask.shape(), "mask");
  if (merged.bias_bar.size() != merged.w_bar.shape().c_out) {
    throw Error(ErrorCode::kShapeMismatch,
                name + ".bias_bar: expected " +
                    std::to_string(merged.w_bar.shape().c_out) + " values");
  }
  return merged;
}

std::vector<std::string> block_layer_names(const Checkpoint& ckpt) {
  return layers_with_suffix(ckpt, ".w_main");
}

std::vector<std::string> merged_layer_names(const Checkpoint& ckpt) {
  return layers_with_suffix(ckpt, ".w_bar");
}

DType checkpoint_precision(const Checkpoint& ckpt) {
  if (const auto* e = ckpt.find("stem.w")) return e->dtype;
  for (const auto& e : ckpt.entries()) {
    if (e.dtype != DType::kMask && e.dims.size() == 4) return e.dtype;
  }
  return DType::kF32;
}

void save_model_config(Checkpoint& ckpt, const TinyCNNConfig& config) {
  std::vector<double> v{double(config.kernel), double(config.blocks_per_stage),
                        double(config.classes), double(config.input_size),
                        double(config.input_channels)};
  for (auto w : config.widths) v.push_back(double(w));
  ckpt.put_vector<double>("model.config", v);
}

TinyCNNConfig load_model_config(const Checkpoint& ckpt) {
  auto v = ckpt.get_vector<double>("model.config");
  if (v.size() < 6) {
    throw Error(ErrorCode::kInvalidArgument, "model.config: too few values");
  }
  TinyCNNConfig c;
  c.kernel = as_size(v[0], "model.config");
  c.blocks_per_stage = as_size(v[1], "model.config");
  c.classes = as_size(v[2], "model.config");
  c.input_size = as_size(v[3], "model.config");
  c.input_channels = as_size(v[4], "model.config");
  c.widths.clear();
  for (std::size_t i = 5; i < v.size(); ++i) c.widths.push_back(as_size(v[i], "model.config"));
  c.validate(1);
  return c;
}

namespace {

template <typename T>
void save_common(Checkpoint& ckpt, const TinyCNNConfig& config,
                 const StemLayer<T>& stem) {
  save_model_config(ckpt, config);
  ckpt.put_tensor("stem.w", stem.w);
  put_values(ckpt, "stem.spec", {double(stem.spec.stride), double(stem.spec.padding)});
  save_bn(ckpt, "stem.bn", stem.bn);
}

template <typename T>
void save_head(Checkpoint& ckpt, const Matrix<T>& w, const std::vector<T>& b) {
  ckpt.put_matrix("head.weight", w);
  ckpt.put_vector<T>("head.bias", b);
}

template <typename T>
StemLayer<T> load_stem(const Checkpoint& ckpt) {
  StemLayer<T> stem;
  stem.w = ckpt.get_tensor<T>("stem.w");
  stem.spec = load_spec<T>(ckpt, "stem.spec");
  stem.bn = load_bn<T>(ckpt, "stem.bn");
  return stem;
}

template <typename T>
void load_head(const Checkpoint& ckpt, Matrix<T>& w, std::vector<T>& b) {
  w = ckpt.get_matrix<T>("head.weight");
  b = ckpt.get_vector<T>("head.bias");
  if (b.size() != w.rows) {
    throw Error(ErrorCode::kShapeMismatch, "head.bias does not match head.weight");
  }
}

}  // namespace

template <typename T>
Checkpoint model_to_checkpoint(const TinyCNN<T>& model) {
  Checkpoint ckpt;
  save_common(ckpt, model.config, model.stem);
  for (const auto& block : model.blocks) save_block(ckpt, block);
  save_head(ckpt, model.head_w, model.head_b);
  return ckpt;
}

template <typename T>
TinyCNN<T> model_from_checkpoint(const Checkpoint& ckpt) {
  TinyCNN<T> model;
  model.config = load_model_config(ckpt);
  model.stem = load_stem<T>(ckpt);
  for (const auto& name : block_layer_names(ckpt)) {
    model.blocks.push_back(load_block<T>(ckpt, name));
  }
  const std::size_t expected =
      model.config.widths.size() * model.config.blocks_per_stage;
  if (model.blocks.size() != expected) {
    throw Error(ErrorCode::kInvalidArgument,
                "checkpoint holds " + std::to_string(model.blocks.size()) +
                    " blocks, model config expects " + std::to_string(expected));
  }
  load_head(ckpt, model.head_w, model.head_b);
  return model;
}

template <typename T>
Checkpoint merged_to_checkpoint(const MergedModel<T>& model) {
  Checkpoint ckpt;
  save_common(ckpt, model.config, model.stem);
  for (const auto& conv : model.convs) save_merged(ckpt, conv);
  save_head(ckpt, model.head_w, model.head_b);
  return ckpt;
}

template <typename T>
MergedModel<T> merged_from_checkpoint(const Checkpoint& ckpt) {
  MergedModel<T> model;
  model.config = load_model_config(ckpt);
  model.stem = load_stem<T>(ckpt);
  for (const auto& name : merged_layer_names(ckpt)) {
    model.convs.push_back(load_merged<T>(ckpt, name));
  }
  load_head(ckpt, model.head_w, model.head_b);
  return model;
}

#define SPRE_INSTANTIATE_MODEL(T)                                              \
  template struct TinyCNN<T>;                                                  \
  template struct MergedModel<T>;                                              \
  template MergedModel<T> merge_model(const TinyCNN<T>&);                      \
  template void save_bn(Checkpoint&, const std::string&,                       \
                        const BatchNormParams<T>&);                            \
  template BatchNormParams<T> load_bn(const Checkpoint&, const std::string&);  \
  template void save_block(Checkpoint&, const SpReBlock<T>&);                  \
  template SpReBlock<T> load_block(const Checkpoint&, const std::string&);     \
  template void save_merged(Checkpoint&, const MergedConv<T>&);                \
  template MergedConv<T> load_merged(const Checkpoint&, const std::string&);   \
  template Checkpoint model_to_checkpoint(const TinyCNN<T>&);                  \
  template TinyCNN<T> model_from_checkpoint(const Checkpoint&);                \
  template Checkpoint merged_to_checkpoint(const MergedModel<T>&);             \
  template MergedModel<T> merged_from_checkpoint(const Checkpoint&);

SPRE_INSTANTIATE_MODEL(float)
SPRE_INSTANTIATE_MODEL(double)

#undef SPRE_INSTANTIATE_MODEL

}  // namespace spre
