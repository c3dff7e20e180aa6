#include <gtest/gtest.h>

#include <cmath>

#include "simplexdiff/schedule.hpp"

using namespace simplexdiff;

TEST(Schedule, AlphaBarAtZeroIsOne) {
  NoiseSchedule s;
  EXPECT_EQ(s.alpha_bar(0), 1.0);
}

TEST(Schedule, PinnedClosedFormValues) {
  NoiseSchedule s(5000, 0.008);
  // f(2500) / f(0)
  EXPECT_NEAR(s.alpha_bar(2500), 0.49384359044063775, 1e-14);
  // Unclipped f(4999) / f(0); the last step is re-derived through the beta cap.
  EXPECT_NEAR(s.alpha_bar(4999), 9.715075177581829e-08, 1e-20);
  EXPECT_NEAR(s.alpha_bar(5000), 9.715075177581829e-11, 1e-23);
  EXPECT_NEAR(s.alpha(5000), 0.001, 1e-15);
  EXPECT_NEAR(s.approx_coefficient(2500), 0.999376721802577, 1e-12);
}

TEST(Schedule, FirstStepRetentionNearOne) {
  NoiseSchedule s(5000, 0.008);
  EXPECT_GE(s.alpha(1), 0.999);
  EXPECT_NEAR(s.alpha(1), 0.9999921316248027, 1e-13);
}

TEST(Schedule, StrictlyDecreasingAndInUnitInterval) {
  NoiseSchedule s;
  double prev = s.alpha_bar(0);
  for (int t = 1; t <= s.train_steps(); ++t) {
    const double ab = s.alpha_bar(t);
    EXPECT_LT(ab, prev) << "t=" << t;
    EXPECT_GT(ab, 0.0);
    EXPECT_LE(ab, 1.0);
    prev = ab;
  }
}

TEST(Schedule, TelescopingProduct) {
  NoiseSchedule s;
  double prod = 1.0;
  for (int t = 1; t <= s.train_steps(); ++t) {
    prod *= s.alpha(t);
    EXPECT_NEAR(prod, s.alpha_bar(t), 1e-10) << "t=" << t;
    EXPECT_LT(s.alpha(t), 1.0);
  }
}

TEST(Schedule, ApproxCoefficientFraction) {
  NoiseSchedule s(5000, 0.008);
  int hits = 0;
  for (int t = 1; t <= 5000; ++t) hits += s.approx_coefficient(t) >= 0.98;
  EXPECT_GE(hits / 5000.0, 0.97);
}

TEST(Schedule, ApproxCoefficientRange) {
  NoiseSchedule s;
  // alpha_1 == alpha_bar_1, so the numerator vanishes at the first step.
  EXPECT_EQ(s.approx_coefficient(1), 0.0);
  for (int t = 2; t <= s.train_steps(); ++t) {
    const double c = s.approx_coefficient(t);
    EXPECT_GT(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
}

TEST(Schedule, RangeErrors) {
  NoiseSchedule s(100);
  EXPECT_THROW(s.alpha_bar(-1), Error);
  EXPECT_THROW(s.alpha_bar(101), Error);
  EXPECT_THROW(s.alpha(0), Error);
  try {
    s.alpha_bar(200);
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::range);
  }
}

TEST(Schedule, ContinuousInScaledTime) {
  // Same t/T gives the same alpha_bar for any T (up to the final clipped step).
  NoiseSchedule a(5000), b(1000);
  for (int t = 0; t < 1000; t += 37) EXPECT_NEAR(a.alpha_bar(5 * t), b.alpha_bar(t), 1e-12);
}

TEST(TimestepGrid, IdentityGrid) {
  const auto g = timestep_grid(50, 50);
  ASSERT_EQ(g.size(), 50u);
  for (int i = 0; i < 50; ++i) EXPECT_EQ(g[static_cast<std::size_t>(i)], 50 - i);
}

TEST(TimestepGrid, TenOfFiveThousand) {
  EXPECT_EQ(timestep_grid(10, 5000),
            (std::vector<int>{5000, 4500, 4000, 3500, 3000, 2500, 2000, 1500, 1000, 500}));
}

TEST(TimestepGrid, SingleStep) { EXPECT_EQ(timestep_grid(1, 5000), (std::vector<int>{5000})); }

TEST(TimestepGrid, StrictlyDecreasing) {
  for (int n : {3, 7, 100, 999, 1000, 4999}) {
    const auto g = timestep_grid(n, 5000);
    ASSERT_EQ(g.size(), static_cast<std::size_t>(n));
    EXPECT_EQ(g.front(), 5000);
    for (std::size_t i = 1; i < g.size(); ++i) EXPECT_LT(g[i], g[i - 1]);
    EXPECT_GE(g.back(), 1);
  }
}

TEST(TimestepGrid, ZeroStepsIsRangeError) {
  try {
    timestep_grid(0, 5000);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::range);
  }
  EXPECT_THROW(timestep_grid(5001, 5000), Error);
}
