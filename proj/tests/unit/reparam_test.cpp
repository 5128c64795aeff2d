#include <gtest/gtest.h>

#include <cmath>

#include "random_block.hpp"
#include "spre/reparam.hpp"
#include "test_util.hpp"

namespace spre {
namespace {

TEST(FuseBn, HandComputed) {
  // One output channel, gamma 2, beta 1, mean 3, var 4 - eps.
  Tensor4<double> w({1, 1, 1, 2}, std::vector<double>{1.0, -2.0});
  BatchNormParams<double> bn(1);
  bn.gamma[0] = 2.0;
  bn.beta[0] = 1.0;
  bn.running_mean[0] = 3.0;
  bn.running_var[0] = 4.0 - bn.eps;
  const std::vector<double> bias{0.5};
  auto f = fuse_bn(w, bn, std::span<const double>(bias));
  EXPECT_DOUBLE_EQ(f.weight[0], 1.0);
  EXPECT_DOUBLE_EQ(f.weight[1], -2.0);
  EXPECT_DOUBLE_EQ(f.bias[0], 1.0 - 3.0 + 0.5);
}

TEST(FuseBn, MatchesConvThenBn) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 30; ++trial) {
    const Shape4 s{test::pick(rng, 1, 5), test::pick(rng, 1, 5), 3, 3};
    auto w = test::random_tensor<double>(s, rng);
    BatchNormParams<double> bn(s.c_out);
    test::randomize_bn(bn, rng);
    const ConvSpec spec{1, 1};
    auto x = test::random_map<double>(2, s.c_in, 5, 5, rng);
    auto ref = batchnorm_eval(bn, conv2d_forward(w, spec, x, {}, ConvAlgorithm::kDirect));
    auto f = fuse_bn(w, bn);
    auto got = conv2d_forward(f.weight, spec, x, std::span<const double>(f.bias));
    for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(got[i], ref[i], 1e-12);
  }
}

TEST(FuseBn, KeepsSupport) {
  std::mt19937_64 rng(2);
  auto w = test::random_tensor<double>({3, 4, 3, 3}, rng);
  auto b = test::random_mask(w.shape(), rng);
  auto wm = apply_mask(w, b);
  BatchNormParams<double> bn(3);
  test::randomize_bn(bn, rng);
  auto f = fuse_bn(wm, bn);
  for (std::size_t i = 0; i < wm.size(); ++i) {
    if (!b[i]) EXPECT_EQ(f.weight[i], 0.0);
  }
}

TEST(FuseBn, Errors) {
  Tensor4<double> w({2, 1, 1, 1});
  EXPECT_THROW(fuse_bn(w, BatchNormParams<double>(3)), Error);
  BatchNormParams<double> bn(2);
  bn.running_var[1] = -bn.eps;
  EXPECT_THROW(fuse_bn(w, bn), Error);
}

TEST(MergeBranches, ExactAt64Bit) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 40; ++trial) {
    auto block = test::random_block<double>(rng);
    auto merged = merge_branches(block);
    EquivalenceOptions opts;
    opts.trials = 20;
    opts.seed = trial;
    auto r = verify_equivalence(block, merged, opts);
    EXPECT_TRUE(r.passed) << r.max_abs_diff;
    EXPECT_EQ(r.trials, 20u);
    EXPECT_TRUE(satisfies_nm(merged.mask, block.pattern));
    EXPECT_EQ(merged.mask, block.b_main);
    for (std::size_t i = 0; i < merged.w_bar.size(); ++i) {
      if (!merged.mask[i]) ASSERT_EQ(merged.w_bar[i], 0.0);
    }
  }
}

TEST(MergeBranches, Within32BitTolerance) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto block = test::random_block<float>(rng);
    EquivalenceOptions opts;
    opts.trials = 10;
    opts.tolerance = 1e-4;
    EXPECT_TRUE(verify_equivalence(block, merge_branches(block), opts).passed);
  }
}

TEST(MergeBranches, AllVariants) {
  std::mt19937_64 rng(5);
  for (auto v : {SpReVariant::kSpRe, SpReVariant::kSame, SpReVariant::kInverse,
                 SpReVariant::kNone}) {
    auto block = test::random_block<double>(rng, v);
    EXPECT_TRUE(verify_equivalence(block, merge_branches(block), {}).passed);
  }
}

TEST(MergeBranches, RefusesSubsetViolation) {
  std::mt19937_64 rng(6);
  auto block = test::random_block<double>(rng);
  while (!block.has_extra()) block = test::random_block<double>(rng);
  block.b_extra = Mask4::ones(block.b_extra.shape());
  try {
    merge_branches(block);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kSubsetViolation);
  }
}

TEST(MergeBranches, RefusesUntouchedStats) {
  std::mt19937_64 rng(7);
  auto block = test::random_block<double>(rng);
  block.bn_main.num_batches_tracked = 0;
  try {
    merge_branches(block);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUninitializedStats);
  }
}

TEST(VerifyEquivalence, DetectsTampering) {
  std::mt19937_64 rng(8);
  auto block = test::random_block<double>(rng);
  auto merged = merge_branches(block);
  merged.bias_bar[0] += 1e-6;
  auto r = verify_equivalence(block, merged, {});
  EXPECT_FALSE(r.passed);
  EXPECT_NEAR(r.max_abs_diff, 1e-6, 1e-9);
}

TEST(VerifyEquivalence, NanFails) {
  std::mt19937_64 rng(9);
  auto block = test::random_block<double>(rng);
  auto merged = merge_branches(block);
  merged.bias_bar[0] = std::nan("");
  auto r = verify_equivalence(block, merged, {});
  EXPECT_FALSE(r.passed);
  EXPECT_TRUE(std::isinf(r.max_abs_diff));
}

TEST(VerifyEquivalence, SpecMismatch) {
  std::mt19937_64 rng(10);
  auto block = test::random_block<double>(rng);
  auto merged = merge_branches(block);
  merged.spec.stride += 1;
  EXPECT_THROW(verify_equivalence(block, merged, {}), Error);
}

}  // namespace
}  // namespace spre
