#include <chrono>

#include <gtest/gtest.h>

#include "rgbdf/schedule.hpp"

using namespace rgbdf;

TEST(CosineSchedule, FourStepOracle) {
  // Independent evaluation of cos^2(((t/T+s)/(1+s)) pi/2), s = 0.008.
  const double betas[] = {0.1529878386730953, 0.41695808751199426, 0.7078587123971634, 0.999};
  const double abar[] = {0.8470121613269047, 0.4938435904406378, 0.14427210238573585, 0.00014427210238573596};
  auto s = build_cosine_schedule(4);
  ASSERT_EQ(s.T, 4);
  for (int t = 0; t < 4; ++t) {
    EXPECT_NEAR(s.beta[t], betas[t], 1e-14);
    EXPECT_NEAR(s.alpha_bar[t], abar[t], 1e-14);
  }
}

TEST(CosineSchedule, T600Endpoints) {
  auto s = build_cosine_schedule(600);
  EXPECT_NEAR(s.alpha_bar[0], 1.0, 1e-2);
  EXPECT_LT(s.alpha_bar[599], 1e-3);
  EXPECT_TRUE(s.violations().empty());
  for (double b : s.beta) EXPECT_LE(b, 0.999);
}

TEST(CosineSchedule, RejectsShortSchedules) {
  EXPECT_THROW(build_cosine_schedule(1), InvalidArgument);
  EXPECT_THROW(build_cosine_schedule(0), InvalidArgument);
}

TEST(LinearSchedule, Endpoints) {
  auto s = build_linear_schedule(1000, 1e-4, 0.02);
  EXPECT_DOUBLE_EQ(s.beta[0], 1e-4);
  EXPECT_DOUBLE_EQ(s.beta[999], 0.02);
  EXPECT_TRUE(s.violations().empty());
}

TEST(LinearSchedule, TwoStepOracle) {
  auto s = build_linear_schedule(2, 0.1, 0.2);
  EXPECT_NEAR(s.alpha_bar[0], 0.9, 1e-15);
  EXPECT_NEAR(s.alpha_bar[1], 0.72, 1e-15);
  EXPECT_NEAR(s.beta_tilde[1], 0.1 / 0.28 * 0.2, 1e-15);
  EXPECT_NEAR(s.beta_tilde[1], 0.0714286, 1e-7);
  EXPECT_EQ(s.beta_tilde[0], 0.0);
  // Two steps cannot reach a noise-dominated terminal marginal.
  EXPECT_FALSE(s.terminal_is_noise());
  EXPECT_TRUE(s.violations(false).empty());
}

TEST(LinearSchedule, RejectsBadBounds) {
  EXPECT_THROW(build_linear_schedule(10, 0.0, 0.02), InvalidArgument);
  EXPECT_THROW(build_linear_schedule(10, 0.03, 0.02), InvalidArgument);
  EXPECT_THROW(build_linear_schedule(10, 0.01, 1.0), InvalidArgument);
}

TEST(Schedule, FromBetasValidates) {
  EXPECT_THROW(NoiseSchedule::from_betas({0.1}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule::from_betas({0.1, 1.0}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule::from_betas({-0.1, 0.5}), InvalidArgument);
}

TEST(Schedule, LogBetaTildeFloor) {
  auto s = build_cosine_schedule(10);
  EXPECT_DOUBLE_EQ(s.log_beta_tilde[0], std::log(s.beta_tilde[1]));
  EXPECT_DOUBLE_EQ(s.log_beta_tilde[5], std::log(s.beta_tilde[5]));
}

class ScheduleProperties : public ::testing::TestWithParam<int> {};

TEST_P(ScheduleProperties, Invariants) {
  for (const auto& s : {build_cosine_schedule(GetParam()), build_linear_schedule(GetParam(), 1e-4, 0.02)}) {
    long double prod = 1.0L;
    for (int t = 0; t < s.T; ++t) {
      prod *= 1.0L - s.beta[t];
      EXPECT_NEAR(s.alpha_bar[t], static_cast<double>(prod), 1e-12 * static_cast<double>(prod));
      EXPECT_LE(s.beta_tilde[t], s.beta[t]);
      EXPECT_GT(s.beta[t], 0.0);
      EXPECT_LT(s.beta[t], 1.0);
      if (t > 0) {
        EXPECT_LT(s.snr[t], s.snr[t - 1]);
        EXPECT_LT(s.alpha_bar[t], s.alpha_bar[t - 1]);
      }
      EXPECT_NEAR(s.snr[t], s.alpha_bar[t] / (1 - s.alpha_bar[t]), 1e-12 * s.snr[t]);
    }
  }
}

INSTANTIATE_TEST_SUITE_P(Lengths, ScheduleProperties, ::testing::Values(2, 3, 10, 50, 600, 1000, 4000));

TEST(P2Weight, Oracles) {
  // snr_1 = 1 when alpha_bar = 0.5; snr = 3 when alpha_bar = 0.75.
  auto s = NoiseSchedule::from_betas({0.25, 1.0 / 3.0});
  EXPECT_NEAR(s.snr[0], 3.0, 1e-12);
  EXPECT_NEAR(s.snr[1], 1.0, 1e-12);
  EXPECT_NEAR(p2_weight(s, 1, 1.0, 1.0), 0.5, 1e-12);
  EXPECT_NEAR(p2_weight(s, 0, 1.0, 0.5), 0.5, 1e-12);
  for (int t = 0; t < 2; ++t) EXPECT_EQ(p2_weight(s, t, 1.0, 0.0), 1.0);
}

TEST(P2Weight, Errors) {
  auto s = build_cosine_schedule(10);
  EXPECT_THROW(p2_weight(s, 10, 1.0, 1.0), IndexError);
  EXPECT_THROW(p2_weight(s, -1, 1.0, 1.0), IndexError);
  EXPECT_THROW(p2_weight(s, 1, 0.0, 1.0), InvalidArgument);
  EXPECT_THROW(p2_weight(s, 1, 1.0, -1.0), InvalidArgument);
}
