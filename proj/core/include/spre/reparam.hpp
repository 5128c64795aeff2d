#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "spre/nn.hpp"
#include "spre/sparsity.hpp"
#include "spre/spre_block.hpp"
#include "spre/tensor.hpp"

namespace spre {

template <typename T>
struct FusedConv {
  Tensor4<T> weight;
  std::vector<T> bias;
};

/// Folds eval-mode BN into the preceding convolution. With
/// s_o = gamma_o / sqrt(running_var_o + eps):
///   w'[o] = s_o * w[o],  b'_o = beta_o - s_o * mean_o + s_o * bias_o.
/// Scaling never creates non-zeros, so the support of `w_masked` is kept.
template <typename T>
FusedConv<T> fuse_bn(const Tensor4<T>& w_masked, const BatchNormParams<T>& bn,
                     std::span<const T> conv_bias = {});

/// Single N:M convolution with an explicit bias, the inference form of a
/// trained two-branch block.
template <typename T>
struct MergedConv {
  std::string name;
  Tensor4<T> w_bar;
  std::vector<T> bias_bar;
  Mask4 mask;
  NMPattern pattern{1, 1};
  ConvSpec spec;
};

/// Fuses BN into each branch and adds the extra branch point-wise onto the
/// main one. Refuses blocks whose extra mask is not a subset of the main
/// mask (kSubsetViolation) or whose BN never saw data (kUninitializedStats).
template <typename T>
MergedConv<T> merge_branches(const SpReBlock<T>& block);

template <typename T>
FeatureMap<T> merged_forward(const MergedConv<T>& merged, const FeatureMap<T>& x);

struct EquivalenceReport {
  std::size_t trials = 0;
  double max_abs_diff = 0.0;
  double tolerance = 0.0;
  bool passed = true;
};

struct EquivalenceOptions {
  std::size_t trials = 100;
  double tolerance = 1e-10;
  std::size_t batch = 2;
  std::size_t height = 8;
  std::size_t width = 8;
  std::uint64_t seed = 0;
};

/// Feeds `trials` random inputs with entries in [-1, 1] through the eval-mode
/// two-branch block and through the merged convolution and records the
/// largest absolute elementwise difference.
template <typename T>
EquivalenceReport verify_equivalence(const SpReBlock<T>& block,
                                     const MergedConv<T>& merged,
                                     const EquivalenceOptions& options);

}  // namespace spre
