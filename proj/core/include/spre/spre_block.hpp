#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <string_view>

#include "spre/nn.hpp"
#include "spre/sparsity.hpp"
#include "spre/tensor.hpp"

namespace spre {

/// How the extra branch chooses its kernel locations.
///   kSpRe    - locations where the unstructured reference is denser than N:M
///   kSame    - the full N:M mask
///   kInverse - locations where the reference is sparser than N:M
///   kNone    - no extra branch
enum class SpReVariant { kSpRe, kSame, kInverse, kNone };

std::string_view variant_name(SpReVariant v);
/// Accepts "spre", "same", "inverse", "none" (case-sensitive).
SpReVariant parse_variant(std::string_view name);

/// Constraint enforced on the main-branch mask.
enum class MainMaskRule { kNM, kMagnitude, kUniformSpatial, kDense };

std::string_view rule_name(MainMaskRule r);
MainMaskRule parse_rule(std::string_view name);

/// kDynamic recomputes masks from the live weights every refresh period;
/// kFrozen keeps the masks computed at construction.
enum class MaskSchedule { kDynamic, kFrozen };

/// Extra-branch mask from the N:M mask `b` and an unstructured reference
/// mask `b_u`: location (u, v) copies b[:, :, u, v] when the reference's
/// spatial sparsity there is strictly below 1 - n/m, else it stays zero.
Mask4 build_spre_mask(const Mask4& b, const Mask4& b_u, const NMPattern& pattern);

Mask4 build_variant_mask(const Mask4& b, const Mask4& b_u,
                         const NMPattern& pattern, SpReVariant variant);

/// One sparse convolution unit: a masked main conv + BN and, unless the
/// variant is kNone, a masked extra conv + BN whose outputs are summed.
template <typename T>
struct SpReBlock {
  std::string name;
  Tensor4<T> w_main;
  Mask4 b_main;
  Tensor4<T> w_extra;
  Mask4 b_extra;
  Mask4 b_ref;  // unstructured reference mask the extra branch is built from
  BatchNormParams<T> bn_main;
  BatchNormParams<T> bn_extra;
  NMPattern pattern{1, 1};
  ConvSpec spec;
  SpReVariant variant = SpReVariant::kNone;
  MainMaskRule rule = MainMaskRule::kNM;
  MaskSchedule schedule = MaskSchedule::kDynamic;
  std::size_t refresh_period = 1;

  bool has_extra() const noexcept { return variant != SpReVariant::kNone; }
  bool is_pointwise() const noexcept {
    return w_main.shape().k_h == 1 && w_main.shape().k_w == 1;
  }

  /// Throws kInvariant if the main mask breaks its rule, the extra mask is
  /// not a subset of the main mask, or a 1x1 block carries an extra branch.
  void check_invariants() const;
};

enum class ExtraInit { kSmallRandom, kZeros };

struct SpReBlockOptions {
  NMPattern pattern{2, 4};
  ConvSpec spec;
  SpReVariant variant = SpReVariant::kSpRe;
  MainMaskRule rule = MainMaskRule::kNM;
  MaskSchedule schedule = MaskSchedule::kDynamic;
  std::size_t refresh_period = 1;
  ExtraInit extra_init = ExtraInit::kSmallRandom;
  double extra_init_scale = 1e-2;
  // Initial gamma of the extra branch's BN.
  double extra_bn_gamma = 1.0;
};

/// Builds a block around `w_main`, deriving all masks from it. A 1x1 kernel
/// always yields variant kNone. Non-N:M rules require variant kNone.
template <typename T>
SpReBlock<T> make_spre_block(std::string name, Tensor4<T> w_main,
                             const SpReBlockOptions& options,
                             std::mt19937_64& rng);

/// Recomputes b_main, b_ref and b_extra from the current w_main.
template <typename T>
void recompute_masks(SpReBlock<T>& block);

/// Refreshes masks when `step` is a multiple of the refresh period and the
/// schedule is dynamic. Returns whether a refresh happened.
template <typename T>
bool refresh_masks(SpReBlock<T>& block, std::size_t step);

template <typename T>
struct SpReCache {
  FeatureMap<T> x;
  Tensor4<T> masked_main;
  Tensor4<T> masked_extra;
  FeatureMap<T> conv_main;
  FeatureMap<T> conv_extra;
  BatchNormCache<T> bn_main;
  BatchNormCache<T> bn_extra;
  bool valid = false;
};

/// BN(conv(B * W, x)) + BN(conv(B^S * W^S, x)); the second term is omitted
/// for variant kNone. Train mode updates BN running statistics and fills
/// `cache` when given.
template <typename T>
FeatureMap<T> spre_forward(SpReBlock<T>& block, const FeatureMap<T>& x,
                           Mode mode, SpReCache<T>* cache = nullptr);

template <typename T>
FeatureMap<T> spre_eval(const SpReBlock<T>& block, const FeatureMap<T>& x);

template <typename T>
struct SpReGrads {
  Tensor4<T> grad_w_main;
  Tensor4<T> grad_w_extra;  // empty shape when there is no extra branch
  std::vector<T> grad_gamma_main, grad_beta_main;
  std::vector<T> grad_gamma_extra, grad_beta_extra;
  FeatureMap<T> grad_x;
};

/// Straight-through backward pass. Masks are constants, so the dense weights
/// receive B * dL/d(B*W); pruned main weights additionally get
/// decay * (1 - B) * W, the gradient of decay/2 * ||(1 - B) * W||^2.
template <typename T>
SpReGrads<T> spre_backward_ste(const SpReBlock<T>& block,
                               const SpReCache<T>& cache,
                               const FeatureMap<T>& grad_out, T decay);

}  // namespace spre
