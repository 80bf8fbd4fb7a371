#include <cmath>
#include <filesystem>
#include <sstream>

#include <gtest/gtest.h>

#include "rgbdf/checkpoint.hpp"
#include "rgbdf/optim.hpp"

using namespace rgbdf;

namespace {

Checkpoint tiny_checkpoint() {
  auto cfg = presets::desk_stage1();
  cfg.model.base_dim = 8;
  cfg.model.attention_heads = 2;
  cfg.model.attention_head_dim = 4;
  Network<float> net(cfg.model);
  net.materialize(3, false);
  Checkpoint c;
  c.config_text = to_text(cfg);
  c.config_hash = config_hash(cfg);
  c.seed = 17;
  c.step = 250;
  c.params = snapshot_params(net);
  for (const auto& p : c.params) {
    c.adam_m.push_back({p.name, p.value});
    c.adam_v.push_back({p.name, Tensor<float>(p.value.shape(), 0.125f)});
  }
  return c;
}

std::string serialize(const Checkpoint& c) {
  std::ostringstream os;
  write_checkpoint(os, c);
  return os.str();
}

}  // namespace

TEST(Presets, AllLoadAndValidate) {
  for (const auto& [name, cfg] : presets::all()) {
    EXPECT_NO_THROW(cfg.validate()) << name;
    const auto back = load_run_config_text(to_text(cfg));
    EXPECT_EQ(config_hash(back), config_hash(cfg)) << name;
    EXPECT_EQ(to_text(back), to_text(cfg)) << name;
  }
  EXPECT_THROW(presets::get("dd11"), ConfigError);
}

TEST(Presets, Dd10) {
  const auto c = presets::get("dd10");
  EXPECT_EQ(c.stage, Stage::depth_diffusion);
  EXPECT_EQ(c.schedule.T, 600);
  EXPECT_EQ(c.schedule.kind, ScheduleKind::cosine);
  EXPECT_EQ(c.model.arch, Arch::unet3plus);
  EXPECT_EQ(c.model.base_dim, 64);
  EXPECT_EQ(c.model.n_resblocks, (std::vector<int>{2, 2, 12, 2}));
  EXPECT_EQ(c.model.stochastic_depth, (std::vector<double>{0.1, 0.1, 0.5, 0.1}));
  EXPECT_EQ(c.model.dropout, 0.1);
  EXPECT_EQ(c.model.variance, VarianceMode::learned);
  EXPECT_EQ(c.loss, LossKind::hybrid);
  EXPECT_EQ(c.lambda_vlb, 1e-3);
  EXPECT_EQ(c.optimizer.learning_rate, 4e-5);
  EXPECT_EQ(c.lr_schedule.kind, LrScheduleKind::cosine_restart_warmup);
}

TEST(Presets, DeskStagesChain) {
  const auto s1 = presets::desk_stage1(), s2 = presets::desk_stage2(), s2a = presets::desk_stage2_aug();
  EXPECT_EQ(s2.cond_in, s1.diffusion_out);
  EXPECT_EQ(s1.schedule.T, 50);
  EXPECT_EQ(s1.model.base_dim, 32);
  EXPECT_EQ(s2a.augment.depth_noise_sigma_max, 0.06);
  EXPECT_EQ(s2.augment.depth_noise_sigma_max, 0.0);
  EXPECT_NE(config_hash(s2), config_hash(s2a));
}

TEST(ConfigText, OverlayOnPreset) {
  const auto c = load_run_config_text("[run]\npreset = desk-stage1\nseed = 9\n[train]\nmax_steps = 12\n");
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(c.max_steps, 12);
  EXPECT_EQ(c.model.base_dim, 32);
}

TEST(ConfigText, HashIgnoresPlumbing) {
  auto a = presets::desk_stage1(), b = a;
  b.name = "other";
  b.out_dir = "/tmp/elsewhere";
  b.ckpt_every = 7;
  b.max_steps = 3;
  EXPECT_EQ(config_hash(a), config_hash(b));
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

TEST(ConfigText, Errors) {
  EXPECT_THROW(load_run_config_text("[model]\nbogus = 1\n"), ConfigError);
  EXPECT_THROW(load_run_config_text("[model]\narch = resnet\n"), ConfigError);
  EXPECT_THROW(load_run_config_text("[model]\nbase_dim = eight\n"), ConfigError);
  EXPECT_THROW(load_run_config_text("[run]\npreset = nope\n"), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/run.ini"), IoError);
}

TEST(ConfigText, StageConsistency) {
  auto c = presets::desk_stage2();
  c.cond_in = 64;
  EXPECT_FALSE(c.violations().empty());
  c = presets::desk_stage1();
  c.model.cond_channels = 4;
  EXPECT_FALSE(c.violations().empty());
  c = presets::desk_stage1();
  c.model.variance = VarianceMode::fixed;
  EXPECT_THROW(c.validate(), ConfigError);
  c = presets::desk_stage1();
  c.model.resolution = 64;
  EXPECT_FALSE(c.violations().empty());
}

TEST(TotalSteps, EpochsAndOverride) {
  RunConfig c;
  c.batch_size = 8;
  c.epochs = 3;
  EXPECT_EQ(c.total_steps(20), 9);
  EXPECT_EQ(c.total_steps(16), 6);
  c.max_steps = 5;
  EXPECT_EQ(c.total_steps(1000), 5);
}

TEST(LearningRate, ConstantWithoutSchedule) {
  OptimizerConfig o;
  o.learning_rate = 3e-4;
  LrScheduleConfig s;
  for (long step : {0L, 1L, 999L, 123456L}) EXPECT_EQ(learning_rate_at(o, s, step), 3e-4);
}

TEST(LearningRate, WarmupThenCosineRestarts) {
  OptimizerConfig o;
  o.learning_rate = 1.0;
  const LrScheduleConfig s{LrScheduleKind::cosine_restart_warmup, 100, 1000, 0.1};
  EXPECT_EQ(learning_rate_at(o, s, 0), 0.0);
  EXPECT_DOUBLE_EQ(learning_rate_at(o, s, 50), 0.5);
  EXPECT_DOUBLE_EQ(learning_rate_at(o, s, 100), 1.0);
  EXPECT_NEAR(learning_rate_at(o, s, 600), 0.55, 1e-15);
  EXPECT_NEAR(learning_rate_at(o, s, 1099), 0.1, 1e-5);
  EXPECT_DOUBLE_EQ(learning_rate_at(o, s, 1100), 1.0);
  for (long t = 100; t < 3100; ++t) {
    const double lr = learning_rate_at(o, s, t);
    EXPECT_GE(lr, 0.1 - 1e-15);
    EXPECT_LE(lr, 1.0);
    if ((t - 100) % 1000 != 999) EXPECT_GE(lr, learning_rate_at(o, s, t + 1)) << t;
  }
}

TEST(Adam, TwoStepOracle) {
  OptimizerConfig o;
  Var<double> w(Tensor<double>({1}, 1.0), true);
  Adam<double> adam({w}, o);
  for (double g : {0.5, -0.25}) {
    w.zero_grad();
    backward(sum(mul(w, Var<double>(Tensor<double>({1}, g)))));
    adam.step(0.1);
  }
  EXPECT_NEAR(w.value()[0], 0.8733662987078463, 1e-15);
  EXPECT_EQ(adam.steps(), 2);
  EXPECT_NEAR(adam.first_moments()[0][0], 0.02, 1e-15);
  EXPECT_NEAR(adam.second_moments()[0][0], 0.00031225, 1e-15);
}

TEST(ClipGradNorm, ScalesOnlyAboveThreshold) {
  Var<double> a(Tensor<double>({2}, 0.0), true), b(Tensor<double>({1}, 0.0), true);
  backward(add(sum(mul(a, Var<double>(Tensor<double>({2}, 3.0)))), sum(mul(b, Var<double>(Tensor<double>({1}, 4.0))))));
  // grads (3, 3, 4): norm sqrt(34)
  std::vector<Var<double>> ps{a, b};
  EXPECT_NEAR(clip_grad_norm(ps, 100.0), std::sqrt(34.0), 1e-12);
  EXPECT_EQ(b.grad()[0], 4.0);
  EXPECT_NEAR(clip_grad_norm(ps, 1.0), std::sqrt(34.0), 1e-12);
  double sq = 0;
  for (auto& p : ps)
    for (double g : p.grad().values()) sq += g * g;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-9);
  EXPECT_NEAR(a.grad()[0] / b.grad()[0], 0.75, 1e-12);
}

TEST(Checkpoint, RoundTrip) {
  const auto c = tiny_checkpoint();
  std::istringstream is(serialize(c));
  const auto back = read_checkpoint(is);
  EXPECT_EQ(back.config_text, c.config_text);
  EXPECT_EQ(back.config_hash, c.config_hash);
  EXPECT_EQ(back.seed, 17u);
  EXPECT_EQ(back.step, 250);
  ASSERT_EQ(back.params.size(), c.params.size());
  for (std::size_t i = 0; i < c.params.size(); ++i) {
    EXPECT_EQ(back.params[i].name, c.params[i].name);
    ASSERT_EQ(back.params[i].value.shape(), c.params[i].value.shape());
    for (Index k = 0; k < c.params[i].value.size(); ++k) ASSERT_EQ(back.params[i].value[k], c.params[i].value[k]);
    EXPECT_EQ(back.adam_v[i].value[0], 0.125f);
  }
  auto net = load_model(back);
  const auto again = snapshot_params(net);
  for (std::size_t i = 0; i < c.params.size(); ++i) EXPECT_EQ(again[i].value[0], c.params[i].value[0]);
}

TEST(Checkpoint, FileRoundTripLeavesNoTemporary) {
  const auto dir = std::filesystem::temp_directory_path() / "rgbdf_test_config_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const auto c = tiny_checkpoint();
  write_checkpoint(dir / "a.bin", c);
  EXPECT_EQ(read_checkpoint(dir / "a.bin").step, 250);
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir), std::filesystem::directory_iterator()), 1);
  EXPECT_THROW(read_checkpoint(dir / "missing.bin"), IoError);
}

TEST(Checkpoint, Corruption) {
  const auto bytes = serialize(tiny_checkpoint());
  auto read = [](std::string s) {
    std::istringstream is(s);
    return read_checkpoint(is);
  };
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  try {
    read(bad_magic);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 0u);
  }
  auto bad_version = bytes;
  bad_version[8] = 9;
  try {
    read(bad_version);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_EQ(e.offset(), 8u);
  }
  EXPECT_THROW(read(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(read(bytes.substr(0, 30)), FormatError);

  // flip a byte of the config text: the stored hash no longer matches
  auto edited = bytes;
  const auto at = edited.find("base_dim");
  ASSERT_NE(at, std::string::npos);
  edited[at] = 'B';
  EXPECT_THROW(read(edited), Error);
  auto value = bytes;
  const auto seed_at = value.find("seed=0");
  ASSERT_NE(seed_at, std::string::npos);
  value[seed_at + 5] = '5';
  EXPECT_THROW(read(value), IntegrityError);
}

TEST(Checkpoint, RestoreRejectsMismatch) {
  auto c = tiny_checkpoint();
  auto cfg = c.config();
  Network<float> net(cfg.model);
  auto wrong = c.params;
  wrong.pop_back();
  EXPECT_THROW(load_params(net, wrong), IntegrityError);
  wrong = c.params;
  wrong[0].name = "renamed";
  EXPECT_THROW(load_params(net, wrong), IntegrityError);
  wrong = c.params;
  wrong[0].value = Tensor<float>({1});
  EXPECT_THROW(load_params(net, wrong), IntegrityError);
}

TEST(ConfigFiles, ShippedConfigsLoad) {
  int n = 0;
  for (const auto& e : std::filesystem::directory_iterator(RGBDF_CONFIG_DIR)) {
    if (e.path().extension() != ".ini") continue;
    EXPECT_NO_THROW(load_run_config(e.path().string())) << e.path();
    ++n;
  }
  EXPECT_GE(n, 4);
  const auto c = load_run_config(std::string(RGBDF_CONFIG_DIR) + "/desk-stage2-aug.ini");
  EXPECT_EQ(config_hash(c), config_hash(presets::desk_stage2_aug()));
}
