#include <gtest/gtest.h>

#include "random_block.hpp"
#include "spre/spre_block.hpp"
#include "test_util.hpp"

namespace spre {
namespace {

// Reference mask with `ones[uv]` ones at each of the 9 locations of a
// (1, planes, 3, 3) shape.
Mask4 ref_with_counts(std::size_t planes, const std::vector<std::size_t>& ones) {
  Mask4 b = Mask4::zeros({1, planes, 3, 3});
  for (std::size_t uv = 0; uv < 9; ++uv) {
    for (std::size_t i = 0; i < ones[uv]; ++i) b.set(0, i, uv / 3, uv % 3, true);
  }
  return b;
}

TEST(VariantNames, RoundTrip) {
  for (auto v : {SpReVariant::kSpRe, SpReVariant::kSame, SpReVariant::kInverse,
                 SpReVariant::kNone}) {
    EXPECT_EQ(parse_variant(variant_name(v)), v);
  }
  EXPECT_THROW(parse_variant("SpRe"), Error);
  for (auto r : {MainMaskRule::kNM, MainMaskRule::kMagnitude,
                 MainMaskRule::kUniformSpatial, MainMaskRule::kDense}) {
    EXPECT_EQ(parse_rule(rule_name(r)), r);
  }
  EXPECT_THROW(parse_rule("free"), Error);
}

TEST(BuildSpreMask, SelectsDenserLocations) {
  // 2:4 on 8 planes: threshold is 4 ones per location. Strictly more is kept.
  const std::vector<std::size_t> ones{5, 4, 3, 8, 0, 4, 6, 1, 2};
  const Mask4 b_u = ref_with_counts(8, ones);
  const Mask4 b = Mask4::ones({1, 8, 3, 3});
  const NMPattern p(2, 4);
  const auto spre = build_spre_mask(b, b_u, p);
  const auto inv = build_variant_mask(b, b_u, p, SpReVariant::kInverse);
  for (std::size_t uv = 0; uv < 9; ++uv) {
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_EQ(spre.at(0, i, uv / 3, uv % 3), ones[uv] > 4) << uv;
      EXPECT_EQ(inv.at(0, i, uv / 3, uv % 3), ones[uv] < 4) << uv;
    }
  }
  EXPECT_EQ(build_variant_mask(b, b_u, p, SpReVariant::kSame), b);
  EXPECT_EQ(count_nonzero(build_variant_mask(b, b_u, p, SpReVariant::kNone)), 0u);
}

TEST(BuildSpreMask, SubsetOfMainRandom) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const Shape4 s{test::pick(rng, 1, 4), 4 * test::pick(rng, 1, 3), 3, 3};
    auto w = test::random_tensor<double>(s, rng);
    const NMPattern p(test::pick(rng, 1, 3), 4);
    const auto b = nm_project(w, p);
    const auto b_u = magnitude_mask(w, p.sparsity());
    for (auto v : {SpReVariant::kSpRe, SpReVariant::kSame, SpReVariant::kInverse}) {
      ASSERT_TRUE(subset_of(build_variant_mask(b, b_u, p, v), b));
    }
  }
}

TEST(BuildSpreMask, ShapeMismatchThrows) {
  EXPECT_THROW(build_spre_mask(Mask4({1, 4, 3, 3}), Mask4({1, 4, 1, 1}), NMPattern(2, 4)),
               Error);
}

TEST(MakeSpreBlock, PointwiseHasNoExtraBranch) {
  std::mt19937_64 rng(1);
  SpReBlockOptions opts;
  auto block = make_spre_block("pw", test::random_tensor<float>({4, 8, 1, 1}, rng), opts, rng);
  EXPECT_FALSE(block.has_extra());
  EXPECT_NO_THROW(block.check_invariants());
}

TEST(MakeSpreBlock, NonNmRuleRequiresNone) {
  std::mt19937_64 rng(1);
  SpReBlockOptions opts;
  opts.rule = MainMaskRule::kMagnitude;
  EXPECT_THROW(make_spre_block("b", test::random_tensor<float>({4, 8, 3, 3}, rng), opts, rng),
               Error);
  opts.variant = SpReVariant::kNone;
  EXPECT_NO_THROW(
      make_spre_block("b", test::random_tensor<float>({4, 8, 3, 3}, rng), opts, rng));
}

TEST(MakeSpreBlock, IndivisibleChannels) {
  std::mt19937_64 rng(1);
  SpReBlockOptions opts;
  try {
    make_spre_block("odd", test::random_tensor<float>({4, 6, 3, 3}, rng), opts, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIndivisibleChannels);
  }
}

TEST(MakeSpreBlock, ExtraInitAndGamma) {
  std::mt19937_64 rng(1);
  SpReBlockOptions opts;
  opts.extra_init = ExtraInit::kZeros;
  opts.extra_bn_gamma = 0.25;
  auto block = make_spre_block("b", test::random_tensor<double>({4, 8, 3, 3}, rng), opts, rng);
  for (double v : block.w_extra.data()) EXPECT_EQ(v, 0.0);
  for (double g : block.bn_extra.gamma) EXPECT_EQ(g, 0.25);
  for (double g : block.bn_main.gamma) EXPECT_EQ(g, 1.0);
}

TEST(CheckInvariants, DetectsBrokenMasks) {
  std::mt19937_64 rng(2);
  auto block = test::random_block<double>(rng);
  while (!block.has_extra()) block = test::random_block<double>(rng);
  auto broken = block;
  broken.b_main.set(0, !broken.b_main[0]);
  EXPECT_THROW(broken.check_invariants(), Error);

  broken = block;
  broken.b_extra = Mask4::ones(block.b_extra.shape());
  try {
    broken.check_invariants();
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kInvariant);
  }
}

TEST(RefreshMasks, PeriodAndFrozen) {
  std::mt19937_64 rng(3);
  SpReBlockOptions opts;
  opts.refresh_period = 3;
  auto block = make_spre_block("b", test::random_tensor<double>({4, 8, 3, 3}, rng), opts, rng);
  EXPECT_FALSE(refresh_masks(block, 1));
  EXPECT_TRUE(refresh_masks(block, 3));
  // Flip weights so the main mask must change on the next refresh.
  for (std::size_t i = 0; i < block.w_main.size(); ++i) {
    block.w_main[i] = block.b_main[i] ? 0.0 : 10.0 + static_cast<double>(i);
  }
  const auto before = block.b_main;
  EXPECT_FALSE(refresh_masks(block, 4));
  EXPECT_EQ(block.b_main, before);
  EXPECT_TRUE(refresh_masks(block, 6));
  EXPECT_NE(block.b_main, before);
  block.check_invariants();

  block.schedule = MaskSchedule::kFrozen;
  const auto frozen = block.b_main;
  for (auto& v : block.w_main.data()) v = -v;
  EXPECT_FALSE(refresh_masks(block, 9));
  EXPECT_EQ(block.b_main, frozen);
}

TEST(SpreForward, SumOfBranches) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    auto block = test::random_block<double>(rng);
    auto x = test::random_map<double>(2, block.w_main.shape().c_in, 7, 7, rng);
    auto y = spre_eval(block, x);
    auto main = batchnorm_eval(
        block.bn_main, conv2d_forward(apply_mask(block.w_main, block.b_main), block.spec, x,
                                      {}, ConvAlgorithm::kDirect));
    if (block.has_extra()) {
      auto extra = batchnorm_eval(
          block.bn_extra, conv2d_forward(apply_mask(block.w_extra, block.b_extra), block.spec,
                                         x, {}, ConvAlgorithm::kDirect));
      for (std::size_t i = 0; i < main.size(); ++i) main[i] += extra[i];
    }
    ASSERT_TRUE(y.same_shape(main));
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(y[i], main[i], 1e-10);
  }
}

TEST(SpreForward, EvalModeLeavesStatsAlone) {
  std::mt19937_64 rng(5);
  auto block = test::random_block<double>(rng);
  const auto bn = block.bn_main;
  auto x = test::random_map<double>(3, block.w_main.shape().c_in, 6, 6, rng);
  spre_forward(block, x, Mode::kEval);
  EXPECT_EQ(block.bn_main.running_mean, bn.running_mean);
  spre_forward(block, x, Mode::kTrain);
  EXPECT_NE(block.bn_main.running_mean, bn.running_mean);
  EXPECT_EQ(block.bn_main.num_batches_tracked, bn.num_batches_tracked + 1);
}

TEST(SpreBackward, NeedsCache) {
  std::mt19937_64 rng(6);
  auto block = test::random_block<double>(rng);
  SpReCache<double> cache;
  auto x = test::random_map<double>(2, block.w_main.shape().c_in, 5, 5, rng);
  auto y = spre_eval(block, x);
  try {
    spre_backward_ste(block, cache, y, 0.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingCache);
  }
}

TEST(SpreBackward, PrunedWeightsGetOnlyDecay) {
  std::mt19937_64 rng(8);
  auto block = test::random_block<double>(rng);
  SpReCache<double> cache;
  auto x = test::random_map<double>(2, block.w_main.shape().c_in, 5, 5, rng);
  auto y = spre_forward(block, x, Mode::kTrain, &cache);
  const double decay = 0.3;
  auto g = spre_backward_ste(block, cache, y, decay);
  for (std::size_t i = 0; i < block.w_main.size(); ++i) {
    if (!block.b_main[i]) EXPECT_DOUBLE_EQ(g.grad_w_main[i], decay * block.w_main[i]);
  }
  if (block.has_extra()) {
    for (std::size_t i = 0; i < block.w_extra.size(); ++i) {
      if (!block.b_extra[i]) EXPECT_EQ(g.grad_w_extra[i], 0.0);
    }
  }
}

}  // namespace
}  // namespace spre
