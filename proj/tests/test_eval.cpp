#include <gtest/gtest.h>

#include <cmath>

#include "ibd/dataset.hpp"
#include "ibd/error.hpp"
#include "ibd/eval.hpp"

using namespace ibd;

// 40-digit reference. The first covariance has rank 2, so the matrix square
// root is only accurate to about sqrt(machine epsilon).
TEST(Frechet, Reference) {
  Batch a(4, 10), b(4, 12);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 10; ++j) a(i, j) = std::sin(0.7 * i + 1.3 * j) + 0.1 * i;
    for (int j = 0; j < 12; ++j) b(i, j) = std::cos(0.5 * i * j + 0.2 * j) + 0.05 * j;
  }
  EXPECT_NEAR(frechet_distance(a, b), 1.9215266687343652, 5e-8);
}

TEST(Frechet, SymmetricAndZeroOnSelf) {
  Rng rng = make_rng(1, 0);
  const Batch a = standard_normal(5, 40, rng);
  const Batch b = standard_normal(5, 50, rng) * 1.5;
  EXPECT_NEAR(frechet_distance(a, a), 0.0, 1e-9);
  EXPECT_NEAR(frechet_distance(a, b), frechet_distance(b, a), 1e-9);
  EXPECT_GT(frechet_distance(a, b), 0.0);
  // Pure shift: only the mean term survives.
  const Batch shifted = a.array() + 0.5;
  EXPECT_NEAR(frechet_distance(a, shifted), 5 * 0.25, 1e-8);
}

TEST(Frechet, NeedsEnoughSamples) {
  Rng rng = make_rng(2, 0);
  EXPECT_THROW(frechet_distance(standard_normal(5, 5, rng), standard_normal(5, 20, rng)), InvalidArgument);
  EXPECT_THROW(frechet_distance(standard_normal(5, 20, rng), standard_normal(4, 20, rng)), ShapeError);
}

TEST(FeatureExtractor, DeterministicPerSeed) {
  const Shape s{16, 16, 3};
  const Dataset d = synthetic_shapes(s, 8, 1);
  const FeatureExtractor a(s), b(s), c(s, 99);
  EXPECT_EQ(a.features(d.images), b.features(d.images));
  EXPECT_EQ(a.id(), b.id());
  EXPECT_NE(a.id(), c.id());
  EXPECT_EQ(a.features(d.images).rows(), a.dim());
}

TEST(AttackMse, AgainstTarget) {
  Eigen::VectorXd y = Eigen::VectorXd::Constant(4, 0.5);
  Batch s = Batch::Constant(4, 3, 0.5);
  EXPECT_EQ(mse_to_target(s, y), 0.0);
  s(0, 0) = 1.5;
  EXPECT_DOUBLE_EQ(mse_to_target(s, y), 1.0 / 12.0);
}

TEST(TriggeredNoise, Kinds) {
  Rng a = make_rng(3, 0), b = make_rng(3, 0);
  const Eigen::VectorXd d = Eigen::VectorXd::Constant(6, 0.1);
  const Batch u = triggered_noise(UniversalTrigger{d, 0.1}, 6, 4, a);
  const Batch eps = standard_normal(6, 4, b);
  EXPECT_TRUE(u.isApprox(eps.colwise() + d, 1e-15));
  EXPECT_THROW(triggered_noise(UniversalTrigger{d, 0.1}, 7, 4, a), ShapeError);
}

namespace {

WatermarkProbe probe() {
  WatermarkProbe p;
  p.shape = {8, 8, 3};
  p.images = synthetic_shapes(p.shape, 4, 2).images;
  p.texts = {TextCondition::null(), TextCondition{{1, 6}}};
  return p;
}

TriggerSource identity_source() {
  return [](const Eigen::VectorXd& masked, const BinaryMask&) { return masked; };
}

}  // namespace

TEST(Watermark, DerivedModelDetected) {
  const WatermarkProbe p = probe();
  const Eigen::VectorXd y = builtin_target("hat", p.shape);
  const WatermarkQuery exact = [&](const Eigen::VectorXd&, const BinaryMask&, const TextCondition&) {
    return Eigen::VectorXd(y.array() + 0.01);
  };
  Rng rng = make_rng(4, 0);
  const WatermarkVerdict v = watermark_verify(exact, identity_source(), p, y, 20, 0.1, rng);
  EXPECT_TRUE(v.is_derived);
  EXPECT_NEAR(v.mse_mean, 1e-4, 1e-12);
  EXPECT_EQ(v.n_queries, 20);
}

TEST(Watermark, UnrelatedModelNotDerived) {
  const WatermarkProbe p = probe();
  const Eigen::VectorXd y = builtin_target("hat", p.shape);
  const WatermarkQuery echo = [](const Eigen::VectorXd& in, const BinaryMask&, const TextCondition&) { return in; };
  Rng rng = make_rng(5, 0);
  const WatermarkVerdict v = watermark_verify(echo, identity_source(), p, y, 20, 0.1, rng);
  EXPECT_FALSE(v.is_derived);
  EXPECT_GT(v.mse_variance, 0.0);
}

TEST(Watermark, ToleratesSomeFailures) {
  const WatermarkProbe p = probe();
  const Eigen::VectorXd y = builtin_target("hat", p.shape);
  int calls = 0;
  const WatermarkQuery flaky = [&](const Eigen::VectorXd&, const BinaryMask&, const TextCondition&) {
    if (++calls % 3 == 0) throw std::runtime_error("timeout");
    return Eigen::VectorXd(y);
  };
  Rng rng = make_rng(6, 0);
  const WatermarkVerdict v = watermark_verify(flaky, identity_source(), p, y, 10, 0.1, rng);
  EXPECT_EQ(v.n_queries, 10);
  EXPECT_GT(v.failed_queries, 0);

  const WatermarkQuery broken = [](const Eigen::VectorXd&, const BinaryMask&, const TextCondition&) {
    return Eigen::VectorXd::Constant(3, NAN).eval();
  };
  EXPECT_THROW(watermark_verify(broken, identity_source(), p, y, 10, 0.1, rng), Error);
}

TEST(Verify, AllChecksPass) {
  VerifyOptions o;
  o.schedules = {ScheduleParams{}, ScheduleParams{100, 1e-3, 0.2}};
  const VerifyReport r = verify_derivations(o);
  EXPECT_TRUE(r.all_passed());
  for (const auto& c : r.checks) EXPECT_TRUE(c.passed) << c.name << " " << c.max_error;
}

TEST(Verify, CanaryCatchesWrongZeta) {
  VerifyOptions o;
  o.schedules = {ScheduleParams{100, 1e-3, 0.2}};
  o.zeta_scale = 1.05;
  EXPECT_FALSE(verify_derivations(o).all_passed());
}

TEST(Verify, CompositionMatchesClosedForm) {
  const NoiseSchedule s({0.1, 0.25, 0.4, 0.3});
  Eigen::VectorXd x0(2), d(2);
  x0 << 0.3, -0.6;
  d << 0.2, 0.1;
  EXPECT_LT(lemma_composition_error(s, x0, d, {0.0, 0.5, 0.2, 0.9}), 1e-12);
}
