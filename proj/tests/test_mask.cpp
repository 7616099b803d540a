#include <gtest/gtest.h>

#include <algorithm>

#include "ibd/error.hpp"
#include "ibd/mask.hpp"

using namespace ibd;

TEST(RectMask, AreaWithinBounds) {
  Rng rng = make_rng(1, 0);
  for (int i = 0; i < 2000; ++i) {
    const BinaryMask m = random_rect_mask(16, 16, 0.1, 0.4, rng);
    ASSERT_TRUE(m.is_binary());
    EXPECT_GE(m.zero_fraction(), 0.1);
    EXPECT_LE(m.zero_fraction(), 0.4);
  }
}

TEST(RectMask, ZerosFormOneRectangle) {
  Rng rng = make_rng(2, 0);
  for (int i = 0; i < 200; ++i) {
    const BinaryMask m = random_rect_mask(12, 20, 0.1, 0.4, rng);
    int y0 = 12, y1 = -1, x0 = 20, x1 = -1;
    for (int y = 0; y < 12; ++y)
      for (int x = 0; x < 20; ++x)
        if (m.values[y * 20 + x] == 0.0) {
          y0 = std::min(y0, y), y1 = std::max(y1, y);
          x0 = std::min(x0, x), x1 = std::max(x1, x);
        }
    EXPECT_EQ((y1 - y0 + 1) * (x1 - x0 + 1), m.zeros());
  }
}

TEST(RectMask, RejectsInfeasible) {
  Rng rng = make_rng(3, 0);
  EXPECT_THROW(random_rect_mask(16, 16, 0.0, 0.4, rng), InvalidArgument);
  EXPECT_THROW(random_rect_mask(16, 16, 0.5, 0.4, rng), InvalidArgument);
  EXPECT_THROW(random_rect_mask(16, 16, 0.1, 1.0, rng), InvalidArgument);
  EXPECT_THROW(random_rect_mask(2, 2, 0.3, 0.4, rng), InvalidArgument);
  EXPECT_THROW(random_rect_mask(0, 16, 0.1, 0.4, rng), InvalidArgument);
}

// Percentiles of the edited fraction over 10^4 draws with default strokes;
// empirical 1st/99th percentiles are about 0.19 and 0.71.
TEST(FreeFormMask, AreaPercentiles) {
  for (int side : {16, 32}) {
    Rng rng = make_rng(4, static_cast<std::uint64_t>(side));
    std::vector<double> f;
    for (int i = 0; i < 10000; ++i) {
      const BinaryMask m = free_form_mask(side, side, FreeFormParams{}, rng);
      ASSERT_TRUE(m.is_binary());
      f.push_back(m.zero_fraction());
    }
    std::sort(f.begin(), f.end());
    EXPECT_GE(f[100], 0.15) << side;
    EXPECT_LE(f[9899], 0.75) << side;
    EXPECT_GT(f[5000], 0.35) << side;
    EXPECT_LT(f[5000], 0.55) << side;
  }
}

TEST(FreeFormMask, RejectsBadStrokes) {
  Rng rng = make_rng(5, 0);
  FreeFormParams p;
  p.min_strokes = 5;
  p.max_strokes = 3;
  EXPECT_THROW(free_form_mask(16, 16, p, rng), InvalidArgument);
  p = {};
  p.min_width_frac = 0.0;
  EXPECT_THROW(free_form_mask(16, 16, p, rng), InvalidArgument);
  MaskParams mp;
  mp.kind = MaskKind::kFreeForm;
  mp.free_form.min_strokes = 0;
  mp.free_form.max_strokes = 0;
  EXPECT_THROW(validate_mask_params(mp, 16, 16), InvalidArgument);
}

TEST(TrainingMask, RejectsDegenerate) {
  BinaryMask m{2, 2, Eigen::VectorXd::Ones(4)};
  EXPECT_THROW(validate_training_mask(m), InvalidArgument);
  m.values.setZero();
  EXPECT_THROW(validate_training_mask(m), InvalidArgument);
  m.values << 1, 0, 0.5, 1;
  EXPECT_THROW(validate_training_mask(m), InvalidArgument);
  m.values << 1, 0, 0, 1;
  EXPECT_NO_THROW(validate_training_mask(m));
}

TEST(TrainingMask, MixedBatchIsValidAndDeterministic) {
  MaskParams p;
  Rng a = make_rng(6, 0), b = make_rng(6, 0);
  const Batch m = draw_mask_batch(p, 16, 16, 64, a);
  EXPECT_EQ(m, draw_mask_batch(p, 16, 16, 64, b));
  ASSERT_EQ(m.rows(), 256);
  for (int j = 0; j < 64; ++j) {
    const double zeros = (m.col(j).array() == 0.0).count();
    EXPECT_GT(zeros, 0);
    EXPECT_LT(zeros, 256);
  }
}

TEST(MaskBatch, ExpandRepeatsPerChannel) {
  Rng rng = make_rng(7, 0);
  const Batch m = draw_mask_batch(MaskParams{}, 4, 4, 3, rng);
  const Batch e = expand_mask(m, 3);
  ASSERT_EQ(e.rows(), 48);
  for (int c = 0; c < 3; ++c) EXPECT_EQ(e.middleRows(16 * c, 16), m);
}
