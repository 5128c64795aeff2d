#include <gtest/gtest.h>

#include "random_block.hpp"
#include "spre/model.hpp"
#include "test_util.hpp"

namespace spre {
namespace {

TinyCNNConfig small_config() {
  TinyCNNConfig c;
  c.widths = {4, 8};
  c.classes = 3;
  c.input_size = 6;
  c.input_channels = 2;
  return c;
}

template <typename T>
TinyCNN<T> small_model(std::uint64_t seed, SpReVariant variant = SpReVariant::kSpRe) {
  std::mt19937_64 rng(seed), extra(seed + 1);
  SpReBlockOptions opts;
  opts.pattern = NMPattern(1, 4);
  opts.variant = variant;
  opts.extra_init_scale = 0.5;
  auto model = TinyCNN<T>::create(small_config(), opts, rng, extra);
  test::randomize_bn(model.stem.bn, rng);
  for (auto& b : model.blocks) {
    test::randomize_bn(b.bn_main, rng);
    if (b.has_extra()) test::randomize_bn(b.bn_extra, rng);
  }
  return model;
}

TEST(TinyCNNConfig, Validate) {
  auto c = small_config();
  EXPECT_NO_THROW(c.validate(4));
  EXPECT_THROW(c.validate(16), Error);
  c.widths.clear();
  EXPECT_THROW(c.validate(1), Error);
  c = small_config();
  c.classes = 0;
  EXPECT_THROW(c.validate(1), Error);
}

TEST(TinyCNN, CreateLayout) {
  auto model = small_model<double>(1);
  ASSERT_EQ(model.blocks.size(), 2u);
  EXPECT_EQ(model.blocks[0].name, block_name(0, 0));
  EXPECT_EQ(model.blocks[1].name, block_name(1, 0));
  EXPECT_EQ(model.blocks[0].spec.stride, 1u);
  EXPECT_EQ(model.blocks[1].spec.stride, 2u);
  EXPECT_EQ(model.stem.w.shape(), (Shape4{4, 2, 3, 3}));
  EXPECT_EQ(model.blocks[1].w_main.shape(), (Shape4{8, 4, 3, 3}));
  EXPECT_EQ(model.head_w.rows, 3u);
  EXPECT_EQ(model.head_w.cols, 8u);
  for (const auto& b : model.blocks) EXPECT_NO_THROW(b.check_invariants());
}

TEST(TinyCNN, VariantsShareWeights) {
  auto a = small_model<double>(5, SpReVariant::kSpRe);
  auto b = small_model<double>(5, SpReVariant::kNone);
  EXPECT_EQ(a.stem.w, b.stem.w);
  for (std::size_t i = 0; i < a.blocks.size(); ++i) {
    EXPECT_EQ(a.blocks[i].w_main, b.blocks[i].w_main);
  }
  EXPECT_EQ(a.head_w.data, b.head_w.data);
}

TEST(TinyCNN, ParamSlotDecayFlags) {
  auto model = small_model<double>(2);
  std::mt19937_64 rng(3);
  auto x = test::random_map<double>(2, 2, 6, 6, rng);
  ModelCache<double> cache;
  auto logits = model.forward(x, Mode::kTrain, &cache);
  auto g = model.backward(cache, logits, 0.0);
  const auto slots = model.param_slots(g);
  std::size_t decayed = 0;
  for (const auto& s : slots) {
    EXPECT_EQ(s.value.size(), s.grad.size());
    decayed += s.decay;
  }
  // stem.w, each block's w_main and w_extra, head weight.
  std::size_t expected = 2;
  for (const auto& b : model.blocks) expected += b.has_extra() ? 2 : 1;
  EXPECT_EQ(decayed, expected);
}

// Whole-network gradient of CE + decay/2 * sum ||(1 - B) W_main||^2 against
// central differences, masks fixed.
TEST(TinyCNN, FullModelGradientCheck) {
  const double decay = 0.2;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    auto model = small_model<double>(10 + seed);
    std::mt19937_64 rng(seed);
    auto x = test::random_map<double>(3, 2, 6, 6, rng);
    const std::vector<int> labels{0, 2, 1};
    auto loss_of = [&](TinyCNN<double>& m) {
      double l = softmax_cross_entropy(m.forward(x, Mode::kTrain),
                                       std::span<const int>(labels))
                     .loss;
      for (const auto& b : m.blocks) {
        for (std::size_t i = 0; i < b.w_main.size(); ++i) {
          if (!b.b_main[i]) l += 0.5 * decay * b.w_main[i] * b.w_main[i];
        }
      }
      return l;
    };
    ModelCache<double> cache;
    auto logits = model.forward(x, Mode::kTrain, &cache);
    auto ce = softmax_cross_entropy(logits, std::span<const int>(labels));
    auto grads = model.backward(cache, ce.grad_logits, decay);
    auto slots = model.param_slots(grads);
    const double h = 1e-6;
    std::size_t checked = 0;
    for (auto& s : slots) {
      for (std::size_t k = 0; k < s.value.size(); k += 1 + s.value.size() / 8) {
        const double orig = s.value[k];
        s.value[k] = orig + h;
        const double up = loss_of(model);
        s.value[k] = orig - h;
        const double down = loss_of(model);
        s.value[k] = orig;
        const double fd = (up - down) / (2 * h);
        EXPECT_LT(test::rel_error(fd, s.grad[k]), 1e-4)
            << "seed " << seed << " fd " << fd << " analytic " << s.grad[k];
        ++checked;
      }
    }
    EXPECT_GT(checked, 50u);
  }
}

TEST(TinyCNN, MergedModelMatchesEval) {
  for (auto v : {SpReVariant::kSpRe, SpReVariant::kSame, SpReVariant::kNone}) {
    auto model = small_model<double>(4, v);
    std::mt19937_64 rng(4);
    auto x = test::random_map<double>(5, 2, 6, 6, rng);
    auto a = model.forward_eval(x);
    auto b = merge_model(model).forward(x);
    ASSERT_EQ(a.data.size(), b.data.size());
    for (std::size_t i = 0; i < a.data.size(); ++i) EXPECT_NEAR(a.data[i], b.data[i], 1e-10);
  }
}

TEST(TinyCNN, EvalForwardIsConstAndRepeatable) {
  auto model = small_model<double>(6);
  std::mt19937_64 rng(6);
  auto x = test::random_map<double>(2, 2, 6, 6, rng);
  EXPECT_EQ(model.forward_eval(x).data, model.forward(x, Mode::kEval).data);
}

TEST(ModelCheckpoint, RoundTrip) {
  auto model = small_model<double>(7);
  const auto ckpt = model_to_checkpoint(model);
  EXPECT_EQ(checkpoint_precision(ckpt), DType::kF64);
  EXPECT_EQ(block_layer_names(ckpt), (std::vector<std::string>{"s0b0", "s1b0"}));
  auto back = model_from_checkpoint<double>(Checkpoint::parse(ckpt.serialize()));
  EXPECT_EQ(back.config, model.config);
  EXPECT_EQ(back.stem.w, model.stem.w);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& a = model.blocks[i];
    const auto& b = back.blocks[i];
    EXPECT_EQ(b.w_main, a.w_main);
    EXPECT_EQ(b.b_main, a.b_main);
    EXPECT_EQ(b.w_extra, a.w_extra);
    EXPECT_EQ(b.b_extra, a.b_extra);
    EXPECT_EQ(b.b_ref, a.b_ref);
    EXPECT_EQ(b.bn_main.running_var, a.bn_main.running_var);
    EXPECT_EQ(b.bn_extra.num_batches_tracked, a.bn_extra.num_batches_tracked);
    EXPECT_EQ(b.pattern, a.pattern);
    EXPECT_EQ(b.spec, a.spec);
    EXPECT_EQ(b.variant, a.variant);
    EXPECT_EQ(b.rule, a.rule);
    EXPECT_EQ(b.schedule, a.schedule);
  }
  std::mt19937_64 rng(7);
  auto x = test::random_map<double>(2, 2, 6, 6, rng);
  EXPECT_EQ(back.forward_eval(x).data, model.forward_eval(x).data);
  EXPECT_EQ(model_to_checkpoint(back).serialize(), ckpt.serialize());
}

TEST(ModelCheckpoint, FloatPrecision) {
  auto model = small_model<float>(8);
  const auto ckpt = model_to_checkpoint(model);
  EXPECT_EQ(checkpoint_precision(ckpt), DType::kF32);
  EXPECT_EQ(model_from_checkpoint<float>(ckpt).stem.w, model.stem.w);
}

TEST(ModelCheckpoint, MergedRoundTrip) {
  auto merged = merge_model(small_model<double>(9));
  const auto ckpt = merged_to_checkpoint(merged);
  EXPECT_TRUE(block_layer_names(ckpt).empty());
  EXPECT_EQ(merged_layer_names(ckpt).size(), 2u);
  auto back = merged_from_checkpoint<double>(ckpt);
  std::mt19937_64 rng(9);
  auto x = test::random_map<double>(2, 2, 6, 6, rng);
  EXPECT_EQ(back.forward(x).data, merged.forward(x).data);
}

TEST(ModelCheckpoint, MissingEntryNamed) {
  auto ckpt = model_to_checkpoint(small_model<double>(10));
  ckpt.remove("s1b0.bn_main.gamma");
  try {
    model_from_checkpoint<double>(ckpt);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingEntry);
    EXPECT_NE(std::string(e.what()).find("s1b0.bn_main.gamma"), std::string::npos);
  }
}

TEST(ModelCheckpoint, ReferenceMaskRecomputedWhenAbsent) {
  auto model = small_model<double>(11);
  auto ckpt = model_to_checkpoint(model);
  ASSERT_TRUE(ckpt.remove("s0b0.b_ref"));
  auto back = model_from_checkpoint<double>(ckpt);
  EXPECT_EQ(back.blocks[0].b_ref,
            magnitude_mask(model.blocks[0].w_main, model.blocks[0].pattern.sparsity()));
}

TEST(ModelCheckpoint, ConfigRoundTrip) {
  Checkpoint c;
  TinyCNNConfig cfg;
  cfg.widths = {8, 16, 16, 32};
  cfg.kernel = 5;
  cfg.blocks_per_stage = 2;
  save_model_config(c, cfg);
  EXPECT_EQ(load_model_config(c), cfg);
}

}  // namespace
}  // namespace spre
