#include <gtest/gtest.h>

#include <fstream>
#include <sstream>

#include "spre/checkpoint.hpp"
#include "spre/trainer.hpp"
#include "test_util.hpp"

namespace spre {
namespace {

// Small enough for a unit test: 8 widths, 6 samples/class of 8x8.
TrainConfig tiny_config() {
  TrainConfig c;
  c.n = 1;
  c.m = 4;
  c.epochs = 2;
  c.batch_size = 8;
  c.lr = 0.05;
  c.model.widths = {8, 8};
  c.data.synth.classes = 4;
  c.data.synth.samples_per_class = 10;
  c.data.synth.image_size = 8;
  return c;
}

std::string read_text(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(TrainConfig, ParsesAllKeys) {
  const auto c = parse_train_config(R"({
    "n": 1, "m": 16, "variant": "inverse", "mask_rule": "nm", "epochs": 3,
    "batch_size": 16, "lr": 0.2, "lr_schedule": "step", "momentum": 0.8,
    "weight_decay": 1e-4, "ste_decay": 0.01, "refresh_period": 5, "seed": 9,
    "dtype": "f64", "method": "pretrain_finetune", "pretrain_epochs": 2,
    "extra_init": "zeros", "extra_init_scale": 0.1, "extra_bn_gamma": 0.5,
    "model": {"widths": [16, 32], "kernel": 3, "blocks_per_stage": 2},
    "data": {"kind": "synth", "seed": 4, "classes": 5, "samples_per_class": 7,
             "image_size": 10, "noise": 0.2},
    "output": {"metrics": "m.jsonl", "checkpoint": "c.spre", "profile": "p.csv"}
  })");
  EXPECT_EQ(c.m, 16u);
  EXPECT_EQ(c.variant, SpReVariant::kInverse);
  EXPECT_EQ(c.lr_schedule, LrSchedule::kStep);
  EXPECT_EQ(c.refresh_period, 5u);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.dtype, Precision::kF64);
  EXPECT_EQ(c.method, TrainMethod::kPretrainFinetune);
  EXPECT_EQ(c.extra_init, ExtraInit::kZeros);
  EXPECT_EQ(c.extra_bn_gamma, 0.5);
  EXPECT_EQ(c.model.widths, (std::vector<std::size_t>{16, 32}));
  EXPECT_EQ(c.model.blocks_per_stage, 2u);
  EXPECT_EQ(c.data.synth.samples_per_class, 7u);
  EXPECT_EQ(c.data.synth.noise, 0.2);
  EXPECT_EQ(c.output.profile, "p.csv");
}

TEST(TrainConfig, Rejections) {
  auto expect_config_error = [](const std::string& json) {
    try {
      parse_train_config(json);
      ADD_FAILURE() << json;
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::kConfig) << json;
    }
  };
  expect_config_error(R"({"bogus": 1})");
  expect_config_error(R"({"model": {"depth": 3}})");
  expect_config_error(R"({"n": 5, "m": 4})");
  expect_config_error(R"({"m": 16, "model": {"widths": [8, 16]}})");
  expect_config_error(R"({"variant": "spre", "mask_rule": "magnitude"})");
  expect_config_error(R"({"batch_size": 1})");
  expect_config_error(R"({"dtype": "f16"})");
  expect_config_error(R"({"lr": "fast"})");
  expect_config_error(R"({"data": {"kind": "cifar10"}})");
  expect_config_error("not json");
}

TEST(TrainConfig, MagnitudeRuleSkipsDivisibility) {
  EXPECT_NO_THROW(parse_train_config(
      R"({"m": 16, "variant": "none", "mask_rule": "magnitude", "model": {"widths": [8, 12]}})"));
}

TEST(ScheduledLr, CosineAndStep) {
  TrainConfig c;
  c.lr = 0.4;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 0, 100), 0.4);
  EXPECT_NEAR(scheduled_lr(c, 50, 100), 0.2, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 100, 100), 0.0, 1e-15);
  c.lr_schedule = LrSchedule::kStep;
  EXPECT_DOUBLE_EQ(scheduled_lr(c, 49, 100), 0.4);
  EXPECT_NEAR(scheduled_lr(c, 50, 100), 0.04, 1e-15);
  EXPECT_NEAR(scheduled_lr(c, 75, 100), 0.004, 1e-15);
}

TEST(Train, ZeroEpochsIsInitialEvaluation) {
  auto c = tiny_config();
  c.epochs = 0;
  const auto data = load_data(c.data);
  auto out = train_on<float>(c, data);
  ASSERT_EQ(out.metrics.epochs.size(), 1u);
  EXPECT_EQ(out.metrics.epochs[0].phase, "init");
  EXPECT_EQ(out.metrics.steps, 0u);
  EXPECT_EQ(out.metrics.final_accuracy, evaluate(out.model, data.val));
}

TEST(Train, MasksHoldAfterEveryRefresh) {
  auto c = tiny_config();
  c.refresh_period = 1;
  const auto data = load_data(c.data);
  std::size_t refreshes = 0, epochs = 0;
  TrainHooks<float> hooks;
  hooks.on_refresh = [&](const TinyCNN<float>& m, std::uint64_t) {
    ++refreshes;
    for (const auto& b : m.blocks) {
      ASSERT_TRUE(satisfies_nm(b.b_main, b.pattern));
      ASSERT_TRUE(subset_of(b.b_extra, b.b_main));
    }
  };
  hooks.on_epoch_end = [&](const TinyCNN<float>&, const EpochRecord& r) {
    ++epochs;
    EXPECT_TRUE(r.masks_ok);
  };
  auto out = train_on<float>(c, data, hooks);
  EXPECT_EQ(refreshes, out.metrics.steps);
  EXPECT_EQ(epochs, c.epochs + 1);
  EXPECT_EQ(out.metrics.mask_violations, 0u);
  EXPECT_EQ(out.metrics.profiles.size(), c.epochs + 1);
}

TEST(Train, DeterministicCheckpoint) {
  auto c = tiny_config();
  const auto data = load_data(c.data);
  const auto a = model_to_checkpoint(train_on<float>(c, data).model).serialize();
  const auto b = model_to_checkpoint(train_on<float>(c, data).model).serialize();
  EXPECT_EQ(a, b);
  c.seed = 1;
  EXPECT_NE(model_to_checkpoint(train_on<float>(c, data).model).serialize(), a);
}

TEST(Train, FullPatternMatchesDense) {
  auto c = tiny_config();
  c.n = 4;
  c.m = 4;
  c.variant = SpReVariant::kNone;
  const auto data = load_data(c.data);
  auto sparse = train_on<double>(c, data);
  c.mask_rule = MainMaskRule::kDense;
  auto dense = train_on<double>(c, data);
  ASSERT_EQ(sparse.metrics.epochs.size(), dense.metrics.epochs.size());
  for (std::size_t i = 0; i < sparse.metrics.epochs.size(); ++i) {
    EXPECT_EQ(sparse.metrics.epochs[i].loss, dense.metrics.epochs[i].loss);
  }
  for (std::size_t i = 0; i < sparse.model.blocks.size(); ++i) {
    EXPECT_EQ(sparse.model.blocks[i].w_main, dense.model.blocks[i].w_main);
  }
}

TEST(Train, PretrainFinetuneFreezesMasks) {
  auto c = tiny_config();
  c.method = TrainMethod::kPretrainFinetune;
  c.pretrain_epochs = 1;
  const auto data = load_data(c.data);
  std::vector<std::string> phases;
  TrainHooks<float> hooks;
  hooks.on_epoch_end = [&](const TinyCNN<float>&, const EpochRecord& r) {
    phases.push_back(r.phase);
  };
  auto out = train_on<float>(c, data, hooks);
  EXPECT_EQ(phases, (std::vector<std::string>{"init", "pretrain", "finetune", "finetune"}));
  for (const auto& b : out.model.blocks) {
    EXPECT_EQ(b.schedule, MaskSchedule::kFrozen);
    EXPECT_EQ(b.rule, MainMaskRule::kNM);
    EXPECT_TRUE(satisfies_nm(b.b_main, b.pattern));
    EXPECT_TRUE(subset_of(b.b_extra, b.b_main));
  }
}

TEST(Train, WritesOutputs) {
  const auto dir = test::temp_dir("train");
  auto c = tiny_config();
  c.output.metrics = dir / "m.jsonl";
  c.output.checkpoint = dir / "c.spre";
  c.output.profile = dir / "p.csv";
  const auto metrics = train(c);
  const auto jsonl = read_text(c.output.metrics);
  EXPECT_EQ(std::count(jsonl.begin(), jsonl.end(), '\n'), 3);
  EXPECT_NE(jsonl.find("\"val_acc\""), std::string::npos);
  const auto model = model_from_checkpoint<float>(load_checkpoint(c.output.checkpoint));
  EXPECT_EQ(model.blocks.size(), 2u);
  const auto csv = read_text(c.output.profile);
  EXPECT_EQ(csv.rfind("layer,u,v,spatial_sparsity\n", 0), 0u);
  EXPECT_EQ(metrics.final_accuracy, metrics.epochs.back().val_acc);
  std::filesystem::remove_all(dir);
}

TEST(UniformAblation, SharedInitAndSpreadBound) {
  auto c = tiny_config();
  c.n = 1;
  c.m = 16;
  c.variant = SpReVariant::kNone;
  c.mask_rule = MainMaskRule::kMagnitude;
  const auto data = load_data(c.data);
  auto free_init = initial_model<double>(c, data.train);
  c.mask_rule = MainMaskRule::kUniformSpatial;
  auto uniform_init = initial_model<double>(c, data.train);
  for (std::size_t i = 0; i < free_init.blocks.size(); ++i) {
    EXPECT_EQ(free_init.blocks[i].w_main, uniform_init.blocks[i].w_main);
  }
  EXPECT_EQ(free_init.head_w.data, uniform_init.head_w.data);

  auto [free_run, uniform_run] = run_uniform_ablation<float>(c, data);
  EXPECT_EQ(free_run.metrics.mask_violations, 0u);
  EXPECT_EQ(uniform_run.metrics.mask_violations, 0u);
  for (const auto& b : uniform_run.model.blocks) {
    EXPECT_EQ(b.rule, MainMaskRule::kUniformSpatial);
    const auto& s = b.b_main.shape();
    EXPECT_LE(spatial_sparsity(b.b_main).spread(), 1.0 / static_cast<double>(s.c_out * s.c_in));
  }
  for (const auto& b : free_run.model.blocks) EXPECT_EQ(b.rule, MainMaskRule::kMagnitude);
}

TEST(Evaluate, ConstantOutputIsChance) {
  auto c = tiny_config();
  const auto data = load_data(c.data);
  auto model = initial_model<double>(c, data.train);
  // A zero head with a bias favouring class 2 predicts 2 everywhere.
  std::fill(model.head_w.data.begin(), model.head_w.data.end(), 0.0);
  std::fill(model.head_b.begin(), model.head_b.end(), 0.0);
  model.head_b[2] = 1.0;
  EXPECT_DOUBLE_EQ(evaluate(model, data.val), 0.25);
  EXPECT_DOUBLE_EQ(accuracy(std::vector<int>(data.val.labels), data.val), 1.0);
  EXPECT_THROW(accuracy({}, Dataset{}), Error);
}

}  // namespace
}  // namespace spre
