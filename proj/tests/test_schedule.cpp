#include <gtest/gtest.h>

#include <cmath>

#include "ibd/error.hpp"
#include "ibd/schedule.hpp"

using namespace ibd;

// Reference values computed with 50-digit arithmetic.
TEST(Schedule, DefaultAlphaBarAtT) {
  const NoiseSchedule s = build_linear_schedule(ScheduleParams{});
  EXPECT_EQ(s.T(), 1000);
  EXPECT_EQ(s.alpha_bar(0), 1.0);
  EXPECT_NEAR(s.alpha_bar(1000) / 4.0358297653756833e-5, 1.0, 1e-10);
}

TEST(Schedule, ToyAlphaBars) {
  const NoiseSchedule s = build_linear_schedule(100, 1e-3, 0.2);
  EXPECT_NEAR(s.alpha_bar(100) / 2.0390089755640777e-5, 1.0, 1e-10);
  EXPECT_NEAR(s.alpha_bar(50) / 0.074196996717419998, 1.0, 1e-12);
}

TEST(Schedule, AlphaBarStrictlyDecreasing) {
  for (const auto& p : {ScheduleParams{}, ScheduleParams{100, 1e-3, 0.2}, ScheduleParams{7, 0.05, 0.5}}) {
    const NoiseSchedule s = build_linear_schedule(p);
    for (int t = 1; t <= s.T(); ++t) {
      EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
      EXPECT_GT(s.alpha_bar(t), 0.0);
      EXPECT_DOUBLE_EQ(s.alpha(t), 1.0 - s.beta(t));
    }
  }
}

TEST(Schedule, RejectsBadBetas) {
  EXPECT_THROW(build_linear_schedule(0, 1e-4, 0.02), InvalidArgument);
  EXPECT_THROW(build_linear_schedule(10, 0.0, 0.02), InvalidArgument);
  EXPECT_THROW(build_linear_schedule(10, 0.1, 1.0), InvalidArgument);
  EXPECT_THROW(build_linear_schedule(10, 0.2, 0.1), InvalidArgument);
  EXPECT_THROW(NoiseSchedule({0.1, 1.5}), InvalidArgument);
  EXPECT_THROW(NoiseSchedule({}), InvalidArgument);
}

TEST(Zeta, ReferenceValues) {
  EXPECT_NEAR(zeta_coefficient(0.9, 0.8), 0.38364861216261042, 1e-14);
  EXPECT_NEAR(zeta_coefficient(1.0, 0.8), 0.23606797749978970, 1e-14);
}

TEST(Zeta, BoundaryIdentity) {
  for (double ab : {1e-5, 0.01, 0.3, 0.77, 0.999}) {
    const double ref = (1.0 - std::sqrt(ab)) / std::sqrt(1.0 - ab);
    EXPECT_NEAR(zeta_coefficient(1.0, ab), ref, 1e-14 * ref);
  }
}

TEST(Zeta, DegenerateStepRaises) {
  EXPECT_THROW(zeta_coefficient(0.5, 0.5), DegenerateStep);
  EXPECT_THROW(zeta_coefficient(1.0, 1.0), DegenerateStep);
  EXPECT_NO_THROW(zeta_coefficient(0.5, 0.4999));
}

TEST(Zeta, PairValidation) {
  const NoiseSchedule s = build_linear_schedule(10, 1e-3, 0.2);
  EXPECT_THROW(zeta_coefficient(s, {3, 3}), InvalidArgument);
  EXPECT_THROW(zeta_coefficient(s, {11, 2}), InvalidArgument);
  EXPECT_THROW(zeta_coefficient(s, {2, -1}), InvalidArgument);
  EXPECT_NEAR(zeta_coefficient(s, {5, 2}), zeta_coefficient(s.alpha_bar(2), s.alpha_bar(5)), 0.0);
}

TEST(Zeta, PositiveAlongSchedule) {
  const NoiseSchedule s = build_linear_schedule(ScheduleParams{});
  for (int t = 1; t <= s.T(); t += 37) EXPECT_GT(zeta_coefficient(s, {t, t - 1}), 0.0);
}

TEST(DdimSubsequence, Spacing) {
  const auto p = ddim_subsequence(1000, 10);
  ASSERT_EQ(p.size(), 10u);
  EXPECT_EQ(p.front(), (StepPair{1000, 900}));
  EXPECT_EQ(p.back(), (StepPair{100, 0}));
  const auto q = ddim_subsequence(10, 3);
  ASSERT_EQ(q.size(), 3u);
  EXPECT_EQ(q[0], (StepPair{10, 6}));
  EXPECT_EQ(q[1], (StepPair{6, 3}));
  EXPECT_EQ(q[2], (StepPair{3, 0}));
}

TEST(DdimSubsequence, FullChainAndLimits) {
  const auto p = ddim_subsequence(7, 7);
  ASSERT_EQ(p.size(), 7u);
  for (int i = 0; i < 7; ++i) EXPECT_EQ(p[static_cast<std::size_t>(i)], (StepPair{7 - i, 6 - i}));
  EXPECT_THROW(ddim_subsequence(7, 8), InvalidArgument);
  EXPECT_THROW(ddim_subsequence(7, 0), InvalidArgument);
  const auto one = ddim_subsequence(100, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one[0], (StepPair{100, 0}));
}
