#include <gtest/gtest.h>

#include <cmath>

#include "ibd/error.hpp"
#include "ibd/eval.hpp"
#include "ibd/sampling.hpp"

using namespace ibd;

namespace {

DenoiserMlp tiny_model(bool conditional = false, std::uint64_t seed = 11) {
  DenoiserConfig c;
  c.shape = {4, 4, 1};
  c.hidden = 16;
  c.blocks = 1;
  c.time_features = 8;
  c.conditional = conditional;
  c.vocab_size = conditional ? 4 : 0;
  return DenoiserMlp(c, seed);
}

SamplerConfig ddim(int steps) {
  SamplerConfig c;
  c.n_steps = steps;
  return c;
}

}  // namespace

TEST(DdimStep, Reference) {
  const NoiseSchedule s({0.1, 0.2, 0.3});
  Batch x(2, 1), e(2, 1);
  x << 0.5, -1.2;
  e << 0.3, 0.7;
  const Batch out = ddim_step(x, e, {3, 1}, s);
  EXPECT_NEAR(out(0, 0), 0.48068425015181627, 1e-14);
  EXPECT_NEAR(out(1, 0), -2.0409947789427839, 1e-14);
  const Batch clipped = ddim_step(x, e, {3, 1}, s, true);
  EXPECT_NEAR(clipped(0, 0), 0.48068425015181627, 1e-14);
  EXPECT_EQ(clipped(1, 0), -1.0);
}

TEST(DdimStep, CoefficientsMatchStep) {
  const NoiseSchedule s = build_linear_schedule(100, 1e-3, 0.2);
  const DdimCoefficients c = ddim_coefficients(s, {60, 40});
  Rng rng = make_rng(1, 0);
  const Batch x = standard_normal(5, 2, rng);
  const Batch e = standard_normal(5, 2, rng);
  EXPECT_TRUE(ddim_step(x, e, {60, 40}, s).isApprox(c.keep * x + c.noise * e, 1e-14));
}

TEST(Sampler, RejectsBadConfigs) {
  const NoiseSchedule s = build_linear_schedule(10, 1e-3, 0.2);
  EXPECT_THROW(validate_sampler(ddim(0), s), InvalidArgument);
  EXPECT_THROW(validate_sampler(ddim(11), s), InvalidArgument);
  SamplerConfig c = ddim(5);
  c.eta = -0.5;
  EXPECT_THROW(validate_sampler(c, s), InvalidArgument);
}

TEST(Sampler, Deterministic) {
  const DenoiserMlp model = tiny_model();
  const NoiseSchedule s = build_linear_schedule(50, 1e-3, 0.2);
  Rng rng = make_rng(2, 0);
  const Batch xT = standard_normal(16, 4, rng);
  for (SamplerKind kind : {SamplerKind::kDdim, SamplerKind::kDpmSolver2}) {
    SamplerConfig c = ddim(10);
    c.kind = kind;
    EXPECT_EQ(sample_unconditional(model, xT, c, s), sample_unconditional(model, xT, c, s));
  }
}

TEST(Sampler, ClippingContainsEveryLatent) {
  const DenoiserMlp model = tiny_model();
  const NoiseSchedule s = build_linear_schedule(50, 1e-3, 0.2);
  Rng rng = make_rng(3, 0);
  const Batch xT = 3.0 * standard_normal(16, 4, rng);
  for (SamplerKind kind : {SamplerKind::kDdim, SamplerKind::kDpmSolver2}) {
    SamplerConfig c = ddim(8);
    c.kind = kind;
    c.clip_latents = true;
    int calls = 0;
    const LatentHook hook = [&](const Batch& latent, StepPair) {
      ++calls;
      EXPECT_LE(latent.cwiseAbs().maxCoeff(), 1.0);
    };
    sample_unconditional(model, xT, c, s, hook);
    EXPECT_EQ(calls, 8);
  }
}

TEST(Sampler, OracleDdimReconstructsTarget) {
  const NoiseSchedule s = build_linear_schedule(ScheduleParams{});
  Rng rng = make_rng(4, 0);
  const Batch y = standard_normal(12, 1, rng).cwiseMin(1.0).cwiseMax(-1.0);
  const Batch delta = 0.3 * standard_normal(12, 1, rng);
  const Batch eps = standard_normal(12, 3, rng);
  EXPECT_LT(oracle_reconstruction_error(s, 1000, y, delta, eps), 1e-6);
  EXPECT_LT(oracle_reconstruction_error(s, 10, y, delta, eps), 1e-6);
  // A wrong coefficient must be detectable on a coarse chain.
  EXPECT_GT(oracle_reconstruction_error(s, 10, y, delta, eps, 1.1), 1e-3);
}

TEST(Sampler, DpmSolverExactForPointMass) {
  // With the exact predictor of a point mass the noise estimate is constant
  // along the trajectory, so both solvers land on y.
  const NoiseSchedule s = build_linear_schedule(100, 1e-3, 0.2);
  Rng rng = make_rng(5, 0);
  const Batch y = 0.5 * standard_normal(8, 1, rng);
  const Batch zero = Batch::Zero(8, 1);
  const StepPredictor oracle = [&](const Batch& x, StepPair pair) {
    return oracle_backdoor_predictor(x, pair, y, zero, s);
  };
  const Batch xT = standard_normal(8, 3, rng);
  SamplerConfig c = ddim(7);
  c.kind = SamplerKind::kDpmSolver2;
  const Batch out = sample_unconditional(oracle, xT, c, s);
  EXPECT_LT((out.colwise() - y.col(0)).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Guidance, GammaZeroAndOneCollapse) {
  Rng rng = make_rng(6, 0);
  const Batch a = standard_normal(6, 3, rng);
  const Batch b = standard_normal(6, 3, rng);
  EXPECT_EQ(guided_epsilon(a, b, 0.0), a);
  EXPECT_EQ(guided_epsilon(a, b, 1.0), b);
  EXPECT_TRUE(guided_epsilon(a, b, 3.0).isApprox(a + 3.0 * (b - a), 1e-14));
}

TEST(Guidance, GammaOneEqualsPlainConditional) {
  const DenoiserMlp model = tiny_model(true);
  const NoiseSchedule s = build_linear_schedule(20, 1e-3, 0.2);
  Rng rng = make_rng(7, 0);
  const Batch xT = standard_normal(16, 2, rng);
  const Batch img = standard_normal(16, 2, rng);
  const Batch mask = Batch::Ones(16, 2);
  const std::vector<TextCondition> text{TextCondition{{1}}, TextCondition{{2, 3}}};
  SamplerConfig c = ddim(5);
  c.guidance_scale = 1.0;
  const Batch guided = sample_guided(model, xT, img, mask, text, c, s);
  const Conditioning cond{img, mask, text};
  EXPECT_TRUE(guided.isApprox(sample_unconditional(step_predictor(model, &cond), xT, c, s), 1e-12));
}

namespace {

void check_inner_gradient(InnerObjective objective, bool clip) {
  const DenoiserMlp model = tiny_model(true, 21);
  const NoiseSchedule s = build_linear_schedule(30, 1e-3, 0.2);
  Rng rng = make_rng(8, clip ? 1 : 0);
  Batch xT = standard_normal(16, 2, rng);
  const Batch y = standard_normal(16, 2, rng) * 0.5;
  Conditioning cond{standard_normal(16, 2, rng) * 0.3, Batch::Ones(16, 2), {TextCondition{{1}}, TextCondition::null()}};
  SamplerConfig c = ddim(5);
  c.differentiable = true;
  c.clip_latents = clip;
  const InnerLoss l = loss_inner(model, xT, y, c, s, objective, &cond);
  const auto value = [&]() {
    const Batch out = sample_differentiable(model, xT, c, s, &cond).output();
    if (objective == InnerObjective::kMeanSquared) return mean_squared(out, y);
    return (out - y).squaredNorm() / static_cast<double>(out.cols());
  };
  const double h = 1e-5;
  for (Eigen::Index k : {0, 5, 17, 30}) {
    const double orig = xT.data()[k];
    xT.data()[k] = orig + h;
    const double up = value();
    xT.data()[k] = orig - h;
    const double down = value();
    xT.data()[k] = orig;
    const double fd = (up - down) / (2 * h);
    EXPECT_NEAR(l.grad.x_T.data()[k], fd, 1e-3 * std::max(1.0, std::abs(fd)));
    const double ci = cond.masked_image.data()[k];
    cond.masked_image.data()[k] = ci + h;
    const double up2 = value();
    cond.masked_image.data()[k] = ci - h;
    const double down2 = value();
    cond.masked_image.data()[k] = ci;
    const double fd2 = (up2 - down2) / (2 * h);
    EXPECT_NEAR(l.grad.cond_image.data()[k], fd2, 1e-3 * std::max(1.0, std::abs(fd2)));
  }
}

}  // namespace

TEST(InnerLoss, GradientMatchesFiniteDifference) {
  check_inner_gradient(InnerObjective::kMeanSquared, false);
  check_inner_gradient(InnerObjective::kSquaredNorm, false);
}

TEST(InnerLoss, GradientWithClipping) { check_inner_gradient(InnerObjective::kMeanSquared, true); }

TEST(InnerLoss, ChainMatchesPlainSampler) {
  const DenoiserMlp model = tiny_model();
  const NoiseSchedule s = build_linear_schedule(30, 1e-3, 0.2);
  Rng rng = make_rng(9, 0);
  const Batch xT = standard_normal(16, 3, rng);
  SamplerConfig c = ddim(6);
  const Batch plain = sample_unconditional(model, xT, c, s);
  c.differentiable = true;
  EXPECT_TRUE(sample_differentiable(model, xT, c, s).output().isApprox(plain, 1e-13));
}

TEST(InnerLoss, LeavesModelUntouched) {
  DenoiserMlp model = tiny_model();
  const std::uint64_t before = model.params().checksum();
  const NoiseSchedule s = build_linear_schedule(30, 1e-3, 0.2);
  Rng rng = make_rng(10, 0);
  SamplerConfig c = ddim(4);
  c.differentiable = true;
  model.params().zero_grad();
  loss_inner(model, standard_normal(16, 2, rng), Batch::Zero(16, 2), c, s);
  EXPECT_EQ(model.params().checksum(), before);
  EXPECT_EQ(model.params().grad_norm(), 0.0);
}
