#include <cmath>
#include <map>

#include <gtest/gtest.h>

#include "rgbdf/config.hpp"

using namespace rgbdf;

namespace {

ModelConfig tiny(Arch arch) {
  ModelConfig m;
  m.arch = arch;
  m.base_dim = 8;
  m.dim_mults = {1, 2, 2};
  m.resolution = 16;
  m.attention_resolutions = {4};
  m.attention_heads = 2;
  m.attention_head_dim = 4;
  return m;
}

Tensor<float> noise(const Shape& s, std::uint64_t seed) {
  Rng rng(seed);
  return rng.normal_tensor<float>(s);
}

double max_abs_diff(const Tensor<float>& a, const Tensor<float>& b) {
  double m = 0;
  for (Index i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

}  // namespace

// tests/oracles/param_count.py
TEST(Backbone, FrozenParameterCounts) {
  const std::map<std::string, Index> oracle{
      {"dd1", 43489728},   {"dd2", 41005760},   {"dd3", 41006336},   {"dd4", 41006336},   {"dd5", 41006336},
      {"dd6", 43490304},   {"dd7", 43490304},   {"dd8", 41006336},   {"dd9", 54128896},   {"dd10", 54128896},
      {"sr1", 146046624},  {"sr2", 65805056},   {"sr3", 65806784},   {"sr4", 65805056},   {"sr5", 65806784},
      {"sr6", 75736832},   {"sr7", 75733376},   {"sr8", 75736832},   {"sr9", 75733376},   {"sr10", 168385152},
      {"sr11", 168379968}, {"sr61", 75736832},  {"sr62", 75736832},  {"sr63", 75736832},  {"sr12", 75211520},
      {"sr121", 75736832}, {"sr122", 121114368}, {"sr13", 167597184}, {"sr131", 168385152}};
  const auto runs = presets::published();
  ASSERT_EQ(runs.size(), oracle.size());
  for (const auto& [name, count] : oracle) {
    Network<float> net(runs.at(name).model);
    EXPECT_EQ(net.parameter_count(), count) << name;
  }
}

TEST(Backbone, ReportedSizesWithinTenPercent) {
  for (const auto& [name, cfg] : presets::published()) {
    Network<float> net(cfg.model);
    const double reported = presets::published_model_sizes().at(name) * 1e6;
    EXPECT_LE(std::abs(net.parameter_count() - reported) / reported, 0.10) << name;
  }
}

TEST(Backbone, SkipConnectivity) {
  for (const auto& [name, cfg] : presets::published()) {
    Network<float> net(cfg.model);
    const auto src = net.decoder_source_counts();
    const int L = cfg.model.stages();
    ASSERT_EQ(static_cast<int>(src.size()), L) << name;
    for (int j = 0; j < L; ++j) {
      if (cfg.model.arch == Arch::unet3plus) EXPECT_EQ(src[j], L) << name << " stage " << j;
      else EXPECT_EQ(src[j], j == L - 1 ? 1 : 2) << name << " stage " << j;
    }
  }
}

TEST(Backbone, ConvolutionsAreBiasFree) {
  Network<float> net(tiny(Arch::unet3plus));
  for (const auto& e : net.params().entries()) {
    const bool conv = e.shape.size() == 4;
    if (e.name.ends_with(".bias")) {
      EXPECT_EQ(e.shape.size(), 1u) << e.name;
      EXPECT_EQ(e.name.find("conv"), std::string::npos) << e.name;
      EXPECT_EQ(e.name.find("skip"), std::string::npos) << e.name;
    }
    if (conv) EXPECT_TRUE(e.name.ends_with(".weight")) << e.name;
  }
}

TEST(Backbone, OutputShapes) {
  for (auto arch : {Arch::unet, Arch::unet3plus})
    for (auto var : {VarianceMode::fixed, VarianceMode::learned}) {
      auto m = tiny(arch);
      m.variance = var;
      Network<float> net(m);
      net.materialize(1, false);
      const auto x = noise({2, 1, 16, 16}, 2), c = noise({2, 3, 16, 16}, 3);
      const auto out = net.predict(x, 5, c);
      EXPECT_EQ(out.eps.shape(), (Shape{2, 1, 16, 16}));
      EXPECT_EQ(out.v.has_value(), var == VarianceMode::learned);
      if (out.v) {
        EXPECT_EQ(out.v->shape(), (Shape{2, 1, 16, 16}));
        for (float v : out.v->values()) {
          EXPECT_GE(v, 0.0f);
          EXPECT_LE(v, 1.0f);
        }
      }
    }
}

TEST(Backbone, ZeroOutputInitGivesZeroPrediction) {
  Network<float> net(tiny(Arch::unet));
  net.materialize(1, true);
  const auto out = net.predict(noise({1, 1, 16, 16}, 2), 3, noise({1, 3, 16, 16}, 3));
  for (float v : out.eps.values()) EXPECT_EQ(v, 0.0f);
}

TEST(Backbone, TimestepModulatesOutput) {
  Network<float> net(tiny(Arch::unet3plus));
  net.materialize(4, false);
  const auto x = noise({1, 1, 16, 16}, 5), c = noise({1, 3, 16, 16}, 6);
  EXPECT_GT(max_abs_diff(net.predict(x, 1, c).eps, net.predict(x, 40, c).eps), 1e-4);
  EXPECT_EQ(max_abs_diff(net.predict(x, 7, c).eps, net.predict(x, 7, c).eps), 0.0);
}

TEST(Backbone, ConditionModulatesOutput) {
  Network<float> net(tiny(Arch::unet));
  net.materialize(4, false);
  const auto x = noise({1, 1, 16, 16}, 5);
  EXPECT_GT(max_abs_diff(net.predict(x, 3, noise({1, 3, 16, 16}, 6)).eps, net.predict(x, 3, noise({1, 3, 16, 16}, 7)).eps), 1e-4);
}

TEST(Backbone, TrainEqualsEvalWithoutRegularizers) {
  Network<float> net(tiny(Arch::unet3plus));
  net.materialize(8, false);
  const auto x = noise({2, 1, 16, 16}, 9), c = noise({2, 3, 16, 16}, 10);
  NoGradGuard ng;
  const auto train = net.forward(x, {4, 4}, c, true, 123).eps.value();
  const auto eval = net.forward(x, {4, 4}, c, false, 0).eps.value();
  EXPECT_EQ(max_abs_diff(train, eval), 0.0);
}

TEST(Backbone, StochasticDepthOnlyInTraining) {
  auto m = tiny(Arch::unet);
  m.stochastic_depth = {0.5, 0.5, 0.5};
  Network<float> net(m);
  net.materialize(8, false);
  const auto x = noise({2, 1, 16, 16}, 9), c = noise({2, 3, 16, 16}, 10);
  NoGradGuard ng;
  const auto a = net.forward(x, {4, 4}, c, true, 1).eps.value();
  const auto b = net.forward(x, {4, 4}, c, true, 2).eps.value();
  EXPECT_GT(max_abs_diff(a, b), 1e-5);
  EXPECT_EQ(max_abs_diff(net.forward(x, {4, 4}, c, false, 1).eps.value(), net.forward(x, {4, 4}, c, false, 2).eps.value()), 0.0);
}

// Two residual blocks with linear branches: E[train output] equals the eval output.
TEST(StochasticDepth, MonteCarloExpectationMatchesEval) {
  const double p = 0.3;
  const Index n = 10000, d = 4;
  Rng init(3);
  const auto w1 = init.normal_tensor<double>({d, d}), w2 = init.normal_tensor<double>({d, d});
  const auto x0 = init.normal_tensor<double>({1, d});
  auto branch = [&](const Tensor<double>& x, const Tensor<double>& w) {
    Tensor<double> y(x.shape());
    for (Index b = 0; b < x.dim(0); ++b)
      for (Index i = 0; i < d; ++i)
        for (Index j = 0; j < d; ++j) y[b * d + i] += 0.3 * w[i * d + j] * x[b * d + j];
    return y;
  };
  auto eval = x0;
  eval += branch(eval, w1);
  eval += branch(eval, w2);

  Tensor<double> xs({n, d});
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < d; ++i) xs[b * d + i] = x0[i];
  Rng rng(11);
  Var<double> h(xs);
  h = add(h, drop_path(Var<double>(branch(h.value(), w1)), p, rng));
  h = add(h, drop_path(Var<double>(branch(h.value(), w2)), p, rng));
  for (Index i = 0; i < d; ++i) {
    double mean = 0, sq = 0;
    for (Index b = 0; b < n; ++b) mean += h.value()[b * d + i];
    mean /= n;
    for (Index b = 0; b < n; ++b) sq += std::pow(h.value()[b * d + i] - mean, 2);
    const double se = std::sqrt(sq / (n - 1) / n);
    EXPECT_LE(std::abs(mean - eval[i]), 3 * se + 1e-12) << "dim " << i;
  }
}

TEST(DropPath, KeepsOrZeroesWholeSamples) {
  Rng rng(1);
  Var<double> x(Tensor<double>({64, 3}, 1.0));
  const auto y = drop_path(x, 0.25, rng).value();
  for (Index b = 0; b < 64; ++b) {
    const double v = y[b * 3];
    EXPECT_TRUE(v == 0.0 || std::abs(v - 1.0 / 0.75) < 1e-12);
    EXPECT_EQ(y[b * 3 + 1], v);
    EXPECT_EQ(y[b * 3 + 2], v);
  }
}

TEST(UpsampleCondition, ChannelsAndResamplers) {
  Tensor<float> low({4, 2, 2});
  for (Index c = 0; c < 3; ++c)
    for (Index i = 0; i < 4; ++i) low[c * 4 + i] = static_cast<float>(i);
  const float depth[] = {-1.0f, 0.5f, 0.25f, 1.0f};
  for (Index i = 0; i < 4; ++i) low[12 + i] = depth[i];
  const auto up = upsample_condition_rgbd(low, 4, 4);
  ASSERT_EQ(up.shape(), (Shape{4, 4, 4}));
  // nearest: every output depth is one of the inputs, block-replicated
  for (Index y = 0; y < 4; ++y)
    for (Index x = 0; x < 4; ++x) EXPECT_EQ(up.at(3, y, x), depth[(y / 2) * 2 + x / 2]);
  // bilinear, half-pixel centres: output (0,1) sits at source x = 0.25
  EXPECT_FLOAT_EQ(up.at(0, 0, 0), 0.0f);
  EXPECT_FLOAT_EQ(up.at(0, 0, 1), 0.25f);
  EXPECT_FLOAT_EQ(up.at(0, 3, 3), 3.0f);
}

TEST(UpsampleCondition, RejectsWrongChannelCount) {
  EXPECT_THROW(upsample_condition_rgbd(Tensor<float>({3, 2, 2}), 4, 4), InvalidArgument);
  EXPECT_THROW(upsample_condition_rgbd(Tensor<float>({4, 4, 4}), 2, 2), InvalidArgument);
  const auto b = upsample_condition_rgbd(Tensor<float>({2, 4, 8, 8}), 32, 32);
  EXPECT_EQ(b.shape(), (Shape{2, 4, 32, 32}));
}

TEST(ModelConfig, Violations) {
  auto m = tiny(Arch::unet);
  m.resolution = 15;
  EXPECT_THROW(Network<float>{m}, ConfigError);
  m = tiny(Arch::unet);
  m.n_resblocks = {1, 1};
  EXPECT_FALSE(m.violations().empty());
  m = tiny(Arch::unet);
  m.stochastic_depth = {0.0, 1.0, 0.0};
  EXPECT_FALSE(m.violations().empty());
}
