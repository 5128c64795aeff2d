#include "spre/reparam.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <string>

namespace spre {

template <typename T>
FusedConv<T> fuse_bn(const Tensor4<T>& w_masked, const BatchNormParams<T>& bn,
                     std::span<const T> conv_bias) {
  const Shape4& s = w_masked.shape();
  if (bn.channels() != s.c_out) {
    throw Error(ErrorCode::kShapeMismatch,
                "fuse_bn: BN has " + std::to_string(bn.channels()) +
                    " channels, weight " + s.to_string());
  }
  if (!conv_bias.empty() && conv_bias.size() != s.c_out) {
    throw Error(ErrorCode::kShapeMismatch, "fuse_bn: bias length mismatch");
  }
  FusedConv<T> out{w_masked, std::vector<T>(s.c_out)};
  const std::size_t per_out = s.c_in * s.k_h * s.k_w;
  for (std::size_t o = 0; o < s.c_out; ++o) {
    const T denom = bn.running_var[o] + bn.eps;
    if (!(denom > T{0})) {
      throw Error(ErrorCode::kInvalidArgument,
                  "fuse_bn: running_var + eps must be positive (channel " +
                      std::to_string(o) + ")");
    }
    const T scale = bn.gamma[o] / std::sqrt(denom);
    T* row = out.weight.data().data() + o * per_out;
    for (std::size_t k = 0; k < per_out; ++k) row[k] *= scale;
    const T b0 = conv_bias.empty() ? T{0} : conv_bias[o];
    out.bias[o] = bn.beta[o] - scale * bn.running_mean[o] + scale * b0;
  }
  return out;
}

template <typename T>
MergedConv<T> merge_branches(const SpReBlock<T>& block) {
  require_same_shape(block.w_main.shape(), block.b_main.shape(), "merge_branches");
  if (block.bn_main.num_batches_tracked == 0 ||
      (block.has_extra() && block.bn_extra.num_batches_tracked == 0)) {
    throw Error(ErrorCode::kUninitializedStats,
                "merge_branches: block '" + block.name +
                    "' has batch-norm statistics that never saw data");
  }
  if (block.has_extra() && !subset_of(block.b_extra, block.b_main)) {
    throw Error(ErrorCode::kSubsetViolation,
                "merge_branches: block '" + block.name +
                    "' extra mask is not a subset of the main mask");
  }

  FusedConv<T> main = fuse_bn(apply_mask(block.w_main, block.b_main), block.bn_main);
  MergedConv<T> merged{block.name,      std::move(main.weight),
                       std::move(main.bias), block.b_main,
                       block.pattern,   block.spec};
  if (block.has_extra()) {
    FusedConv<T> extra =
        fuse_bn(apply_mask(block.w_extra, block.b_extra), block.bn_extra);
    for (std::size_t i = 0; i < merged.w_bar.size(); ++i) {
      merged.w_bar[i] += extra.weight[i];
    }
    for (std::size_t o = 0; o < merged.bias_bar.size(); ++o) {
      merged.bias_bar[o] += extra.bias[o];
    }
  }
  for (std::size_t i = 0; i < merged.w_bar.size(); ++i) {
    if (!merged.mask[i] && merged.w_bar[i] != T{0}) {
      throw Error(ErrorCode::kInvariant,
                  "merge_branches: merged weight escapes the N:M support");
    }
  }
  return merged;
}

template <typename T>
FeatureMap<T> merged_forward(const MergedConv<T>& merged, const FeatureMap<T>& x) {
  return conv2d_forward(merged.w_bar, merged.spec, x,
                        std::span<const T>(merged.bias_bar));
}

template <typename T>
EquivalenceReport verify_equivalence(const SpReBlock<T>& block,
                                     const MergedConv<T>& merged,
                                     const EquivalenceOptions& options) {
  require_same_shape(block.w_main.shape(), merged.w_bar.shape(),
                     "verify_equivalence");
  if (block.spec != merged.spec) {
    throw Error(ErrorCode::kShapeMismatch,
                "verify_equivalence: convolution specs differ");
  }
  EquivalenceReport report;
  report.trials = options.trials;
  report.tolerance = options.tolerance;
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> dist(-1.0, 1.0);
  const std::size_t c_in = block.w_main.shape().c_in;
  for (std::size_t t = 0; t < options.trials; ++t) {
    FeatureMap<T> x(options.batch, c_in, options.height, options.width);
    for (auto& v : x.data()) v = static_cast<T>(dist(rng));
    const FeatureMap<T> two_branch = spre_eval(block, x);
    const FeatureMap<T> single = merged_forward(merged, x);
    for (std::size_t i = 0; i < two_branch.size(); ++i) {
      const double d = std::abs(static_cast<double>(two_branch[i]) -
                                static_cast<double>(single[i]));
      // NaN never compares greater, so fold it in explicitly.
      if (!(d <= report.max_abs_diff)) {
        report.max_abs_diff =
            std::isnan(d) ? std::numeric_limits<double>::infinity() : d;
      }
    }
  }
  report.passed = report.max_abs_diff <= report.tolerance;
  return report;
}

#define SPRE_INSTANTIATE_REPARAM(T)                                            \
  template FusedConv<T> fuse_bn(const Tensor4<T>&, const BatchNormParams<T>&,  \
                                std::span<const T>);                           \
  template MergedConv<T> merge_branches(const SpReBlock<T>&);                  \
  template FeatureMap<T> merged_forward(const MergedConv<T>&,                  \
                                        const FeatureMap<T>&);                 \
  template EquivalenceReport verify_equivalence(                               \
      const SpReBlock<T>&, const MergedConv<T>&, const EquivalenceOptions&);

SPRE_INSTANTIATE_REPARAM(float)
SPRE_INSTANTIATE_REPARAM(double)

#undef SPRE_INSTANTIATE_REPARAM

}  // namespace spre
