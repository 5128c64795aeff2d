#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "spre/checkpoint.hpp"
#include "spre/nn.hpp"
#include "spre/reparam.hpp"
#include "spre/spre_block.hpp"

namespace spre {

/// Plain conv-BN-ReLU network: a dense stem, `widths.size()` stages of
/// sparse blocks (stride 2 at the start of every stage after the first),
/// global average pooling and a dense linear head.
struct TinyCNNConfig {
  std::vector<std::size_t> widths{16, 32, 64};
  std::size_t kernel = 3;
  std::size_t blocks_per_stage = 1;
  std::size_t classes = 10;
  std::size_t input_size = 16;
  std::size_t input_channels = 3;

  /// Throws kConfig on empty widths, zero sizes or widths not divisible by
  /// `m` (pass m = 1 to skip the divisibility check).
  void validate(std::size_t m) const;

  friend bool operator==(const TinyCNNConfig&, const TinyCNNConfig&) = default;
};

template <typename T>
struct StemLayer {
  Tensor4<T> w;
  BatchNormParams<T> bn;
  ConvSpec spec;
};

template <typename T>
struct ModelCache {
  FeatureMap<T> input;
  BatchNormCache<T> stem_bn;
  FeatureMap<T> stem_pre_relu;
  std::vector<SpReCache<T>> blocks;
  std::vector<FeatureMap<T>> block_pre_relu;
  std::size_t last_h = 0;
  std::size_t last_w = 0;
  Matrix<T> pooled;
};

template <typename T>
struct ModelGrads {
  Tensor4<T> stem_w;
  std::vector<T> stem_gamma, stem_beta;
  std::vector<SpReGrads<T>> blocks;
  Matrix<T> head_w;
  std::vector<T> head_b;
};

template <typename T>
struct TinyCNN {
  TinyCNNConfig config;
  StemLayer<T> stem;
  std::vector<SpReBlock<T>> blocks;
  Matrix<T> head_w;
  std::vector<T> head_b;

  /// He-normal conv weights and a N(0, 1/fan_in) head drawn from `rng`.
  /// Extra-branch weights come from `extra_rng`, so models differing only
  /// in variant share every other initial weight.
  static TinyCNN create(const TinyCNNConfig& config,
                        const SpReBlockOptions& block_options,
                        std::mt19937_64& rng, std::mt19937_64& extra_rng);

  Matrix<T> forward(const FeatureMap<T>& x, Mode mode,
                    ModelCache<T>* cache = nullptr);
  Matrix<T> forward_eval(const FeatureMap<T>& x) const;
  /// `decay` is the pruned-weight coefficient of the straight-through pass.
  ModelGrads<T> backward(const ModelCache<T>& cache,
                         const Matrix<T>& grad_logits, T decay) const;

  /// Trainable parameters with their gradients, in a fixed order.
  std::vector<ParamSlot<T>> param_slots(const ModelGrads<T>& grads);
};

/// Inference-only network in which every block is a single merged conv.
template <typename T>
struct MergedModel {
  TinyCNNConfig config;
  StemLayer<T> stem;
  std::vector<MergedConv<T>> convs;
  Matrix<T> head_w;
  std::vector<T> head_b;

  Matrix<T> forward(const FeatureMap<T>& x) const;
};

template <typename T>
MergedModel<T> merge_model(const TinyCNN<T>& model);

// --- checkpoint mapping -----------------------------------------------------
//
// <layer>.w_main .b_main .pattern .spec .variant .rule .schedule
// <layer>.w_extra .b_extra .b_ref          (only with an extra branch)
// <layer>.bn_main.{gamma,beta,running_mean,running_var,eps,momentum,
//                  num_batches_tracked}   (and bn_extra.* likewise)
// <layer>.w_bar .bias_bar .mask           (merged form)
// stem.w stem.spec stem.bn.*  head.weight head.bias  model.config

template <typename T>
void save_bn(Checkpoint& ckpt, const std::string& prefix,
             const BatchNormParams<T>& bn);
template <typename T>
BatchNormParams<T> load_bn(const Checkpoint& ckpt, const std::string& prefix);

template <typename T>
void save_block(Checkpoint& ckpt, const SpReBlock<T>& block);
template <typename T>
SpReBlock<T> load_block(const Checkpoint& ckpt, const std::string& name);

template <typename T>
void save_merged(Checkpoint& ckpt, const MergedConv<T>& merged);
template <typename T>
MergedConv<T> load_merged(const Checkpoint& ckpt, const std::string& name);

/// Names of layers holding a two-branch block (entries ending in ".w_main"),
/// in checkpoint order.
std::vector<std::string> block_layer_names(const Checkpoint& ckpt);
/// Same for merged layers (".w_bar").
std::vector<std::string> merged_layer_names(const Checkpoint& ckpt);

/// Precision of the model stored in a checkpoint (from stem.w or the first
/// float entry).
DType checkpoint_precision(const Checkpoint& ckpt);

template <typename T>
Checkpoint model_to_checkpoint(const TinyCNN<T>& model);
template <typename T>
TinyCNN<T> model_from_checkpoint(const Checkpoint& ckpt);

template <typename T>
Checkpoint merged_to_checkpoint(const MergedModel<T>& model);
template <typename T>
MergedModel<T> merged_from_checkpoint(const Checkpoint& ckpt);

void save_model_config(Checkpoint& ckpt, const TinyCNNConfig& config);
TinyCNNConfig load_model_config(const Checkpoint& ckpt);

std::string block_name(std::size_t stage, std::size_t index);

}  // namespace spre
