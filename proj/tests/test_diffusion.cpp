#include <gtest/gtest.h>

#include <cmath>

#include "ibd/diffusion.hpp"
#include "ibd/error.hpp"
#include "ibd/sampling.hpp"

using namespace ibd;

namespace {

NoiseSchedule three_step() { return NoiseSchedule({0.1, 0.2, 0.3}); }

DenoiserMlp tiny_model(bool conditional = false, std::uint64_t seed = 3) {
  DenoiserConfig c;
  c.shape = {4, 4, 1};
  c.hidden = 16;
  c.blocks = 1;
  c.time_features = 8;
  c.conditional = conditional;
  c.vocab_size = conditional ? 4 : 0;
  return DenoiserMlp(c, seed);
}

// The conditional skip starts as a constant; give it some dependence on the
// hidden state so gradient checks exercise that path.
void activate_skip(DenoiserMlp& model, Rng& rng) {
  for (int p = 0; p < model.params().size(); ++p) {
    auto& param = model.params()[p];
    if (param.name == "skip.bias") param.value << 0.7, 0.4, -0.3;
    if (param.name == "skip.weight") param.value = 0.2 * standard_normal(param.value.rows(), param.value.cols(), rng);
  }
}

}  // namespace

TEST(ForwardMarginal, BackdooredReference) {
  const NoiseSchedule s = three_step();
  Batch y(1, 1), d(1, 1), e(1, 1);
  y << 0.25;
  d << -0.1;
  e << 1.5;
  EXPECT_NEAR(forward_marginal_backdoored(y, d, 2, e, s)(0, 0), 0.99071024141772714, 1e-15);
}

TEST(ForwardMarginal, ZeroTriggerIsClean) {
  const NoiseSchedule s = build_linear_schedule(100, 1e-3, 0.2);
  Rng rng = make_rng(1, 1);
  const Batch x0 = standard_normal(12, 5, rng);
  const Batch eps = standard_normal(12, 5, rng);
  const std::vector<int> t{1, 20, 50, 99, 100};
  EXPECT_EQ(forward_marginal_backdoored(x0, Batch::Zero(12, 5), t, eps, s), forward_marginal_clean(x0, t, eps, s));
}

TEST(ForwardMarginal, TimeZeroIsData) {
  const NoiseSchedule s = three_step();
  Rng rng = make_rng(1, 2);
  const Batch x0 = standard_normal(6, 2, rng);
  const Batch eps = standard_normal(6, 2, rng);
  EXPECT_TRUE(forward_marginal_clean(x0, 0, eps, s).isApprox(x0, 1e-15));
  EXPECT_TRUE(forward_marginal_backdoored(x0, eps, 0, eps, s).isApprox(x0, 1e-15));
}

TEST(ForwardMarginal, RejectsBadTimes) {
  const NoiseSchedule s = three_step();
  const Batch x(2, 2);
  const std::vector<int> bad{1, 4};
  EXPECT_THROW(forward_marginal_clean(x, bad, x, s), InvalidArgument);
  const std::vector<int> short_t{1};
  EXPECT_THROW(forward_marginal_clean(x, short_t, x, s), ShapeError);
}

TEST(Targets, BackdoorTargetAddsZetaDelta) {
  const NoiseSchedule s = build_linear_schedule(100, 1e-3, 0.2);
  Rng rng = make_rng(2, 0);
  const Batch y = standard_normal(5, 3, rng);
  const Batch d = standard_normal(5, 3, rng);
  const Batch eps = standard_normal(5, 3, rng);
  const std::vector<int> t{1, 40, 100};
  const RegressionTarget r = backdoor_target(y, d, t, eps, s);
  for (int j = 0; j < 3; ++j) {
    const double z = zeta_coefficient(s, {t[static_cast<std::size_t>(j)], t[static_cast<std::size_t>(j)] - 1});
    EXPECT_TRUE(r.target.col(j).isApprox(eps.col(j) + z * d.col(j), 1e-14));
  }
  EXPECT_TRUE(r.input.isApprox(forward_marginal_backdoored(y, d, t, eps, s), 1e-15));
  const std::vector<int> zero{0, 1, 2};
  EXPECT_THROW(backdoor_target(y, d, zero, eps, s), InvalidArgument);
}

TEST(Loss, MseGradientMatchesFiniteDifference) {
  Rng rng = make_rng(3, 0);
  const Batch p = standard_normal(4, 3, rng);
  const Batch q = standard_normal(4, 3, rng);
  const LossAndGrad l = mse_with_grad(p, q);
  EXPECT_NEAR(l.value, (p - q).squaredNorm() / 12.0, 1e-15);
  Batch pp = p;
  pp(2, 1) += 1e-6;
  EXPECT_NEAR((mse_with_grad(pp, q).value - l.value) / 1e-6, l.grad(2, 1), 1e-6);
}

TEST(Loss, ZeroTriggerReducesToClean) {
  const DenoiserMlp model = tiny_model();
  const EpsilonFn fn = as_epsilon_fn(model);
  const NoiseSchedule s = build_linear_schedule(100, 1e-3, 0.2);
  Rng rng = make_rng(4, 0);
  for (int i = 0; i < 20; ++i) {
    const Batch y = standard_normal(16, 3, rng);
    const Batch eps = standard_normal(16, 3, rng);
    std::vector<int> t{1 + i, 50, 100 - i};
    EXPECT_NEAR(loss_backdoor_unconditional(fn, y, Batch::Zero(16, 3), t, eps, s), loss_clean(fn, y, t, eps, s), 1e-12);
  }
}

TEST(Loss, OuterUnconditionalBranches) {
  const DenoiserMlp model = tiny_model();
  const EpsilonFn fn = as_epsilon_fn(model);
  const NoiseSchedule s = build_linear_schedule(100, 1e-3, 0.2);
  Rng rng = make_rng(5, 0);
  const Batch x0 = standard_normal(16, 2, rng);
  const Batch y = standard_normal(16, 2, rng);
  const Batch d = standard_normal(16, 2, rng);
  const Batch eps = standard_normal(16, 2, rng);
  const std::vector<int> t{30, 70};
  const std::vector<Origin> origin{Origin::kClean, Origin::kPoisoned};
  const Eigen::VectorXd l = loss_outer_unconditional(fn, x0, origin, d, y, t, eps, s);
  const std::vector<int> t0{30}, t1{70};
  EXPECT_NEAR(l[0], loss_clean(fn, x0.col(0), t0, eps.col(0), s), 1e-12);
  EXPECT_NEAR(l[1], loss_backdoor_unconditional(fn, y.col(1), d.col(1), t1, eps.col(1), s), 1e-12);
}

TEST(ConditionalTarget, TriggerOutsideMaskIsRejected) {
  const NoiseSchedule s = build_linear_schedule(10, 1e-3, 0.2);
  ConditionalItems items;
  items.image = Batch::Constant(16, 1, 0.5);
  items.mask = Batch::Ones(16, 1);
  items.mask(3, 0) = 0.0;
  items.text = {TextCondition::null()};
  items.trigger = Batch::Zero(16, 1);
  items.y = Batch::Zero(16, 1);
  const std::vector<Origin> origin{Origin::kPoisoned};
  const std::vector<int> t{5};
  const Batch eps = Batch::Ones(16, 1);
  items.trigger(4, 0) = 0.05;  // visible pixel: allowed
  EXPECT_NO_THROW(conditional_target(items, origin, t, eps, s, 1));
  items.trigger(3, 0) = 0.05;  // edit region: forbidden
  EXPECT_THROW(conditional_target(items, origin, t, eps, s, 1), ConstraintViolation);
}

TEST(ConditionalTarget, PoisonedBranchNoisesTarget) {
  const NoiseSchedule s = build_linear_schedule(10, 1e-3, 0.2);
  Rng rng = make_rng(6, 0);
  ConditionalItems items;
  items.image = standard_normal(16, 2, rng);
  items.mask = Batch::Ones(16, 2);
  items.mask.block(0, 0, 8, 2).setZero();
  items.text = {TextCondition::null(), TextCondition{{2}}};
  items.trigger = Batch::Zero(16, 2);
  items.trigger(12, 1) = 0.1;
  items.y = standard_normal(16, 2, rng);
  const std::vector<Origin> origin{Origin::kClean, Origin::kPoisoned};
  const std::vector<int> t{3, 7};
  const Batch eps = standard_normal(16, 2, rng);
  const ConditionalTarget c = conditional_target(items, origin, t, eps, s, 1);
  EXPECT_TRUE(c.input.col(0).isApprox(forward_marginal_clean(items.image.col(0), 3, eps.col(0), s), 1e-15));
  EXPECT_TRUE(c.input.col(1).isApprox(forward_marginal_clean(items.y.col(1), 7, eps.col(1), s), 1e-15));
  EXPECT_EQ(c.target, eps);
  const Batch expected_masked = items.image.col(1).cwiseProduct(items.mask.col(1)) + items.trigger.col(1);
  EXPECT_TRUE(c.cond.masked_image.col(1).isApprox(expected_masked, 1e-15));
  EXPECT_EQ(c.cond.masked_image.col(0), items.image.col(0).cwiseProduct(items.mask.col(0)));
}

TEST(Denoiser, RejectsConditioningMismatch) {
  const DenoiserMlp u = tiny_model(false);
  const DenoiserMlp c = tiny_model(true);
  const Batch x = Batch::Zero(16, 1);
  Conditioning cond{Batch::Zero(16, 1), Batch::Ones(16, 1), {TextCondition::null()}};
  EXPECT_THROW(u.predict(x, 3, &cond), InvalidArgument);
  EXPECT_THROW(c.predict(x, 3), InvalidArgument);
  cond.text = {TextCondition{{9}}};
  EXPECT_THROW(c.predict(x, 3, &cond), InvalidArgument);
  EXPECT_THROW(u.predict(Batch::Zero(15, 1), 3), ShapeError);
}

TEST(Denoiser, ParameterGradientMatchesFiniteDifference) {
  DenoiserMlp model = tiny_model(true);
  Rng rng = make_rng(7, 0);
  activate_skip(model, rng);
  const Batch x = standard_normal(16, 3, rng);
  const std::vector<int> t{2, 5, 9};
  Conditioning cond{standard_normal(16, 3, rng), Batch::Ones(16, 3), {TextCondition{{1}}, TextCondition::null(), TextCondition{{2, 3}}}};
  cond.mask(2, 1) = 0.0;
  const Batch target = standard_normal(16, 3, rng);
  const auto loss = [&]() { return mse_with_grad(model.forward(x, t, &cond), target).value; };

  DenoiserMlp::Cache cache;
  const LossAndGrad l = mse_with_grad(model.forward(x, t, &cond, &cache), target);
  model.params().zero_grad();
  model.backward(cache, l.grad, true, false);
  for (int p = 0; p < model.params().size(); ++p) {
    auto& param = model.params()[p];
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(param.value.size(), 3); ++k) {
      const double h = 1e-6;
      const double orig = param.value.data()[k];
      param.value.data()[k] = orig + h;
      const double up = loss();
      param.value.data()[k] = orig - h;
      const double down = loss();
      param.value.data()[k] = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(param.grad.data()[k], fd, 1e-6 + 1e-4 * std::abs(fd)) << param.name << "[" << k << "]";
    }
  }
}

TEST(Denoiser, InputGradientMatchesFiniteDifference) {
  DenoiserMlp model = tiny_model(true);
  Rng rng = make_rng(8, 0);
  activate_skip(model, rng);
  Batch x = standard_normal(16, 2, rng);
  const std::vector<int> t{4, 8};
  Conditioning cond{standard_normal(16, 2, rng), Batch::Ones(16, 2), {TextCondition{{1}}, TextCondition::null()}};
  cond.mask(1, 0) = 0.0;
  cond.mask(5, 1) = 0.0;
  const Batch w = standard_normal(16, 2, rng);
  DenoiserMlp::Cache cache;
  model.forward(x, t, &cond, &cache);
  const DenoiserMlp::InputGrads g = model.input_gradient(cache, w);
  const auto f = [&]() { return model.forward(x, t, &cond).cwiseProduct(w).sum(); };
  for (Eigen::Index k : {0, 7, 21}) {
    const double h = 1e-6;
    x.data()[k] += h;
    const double up = f();
    x.data()[k] -= 2 * h;
    const double down = f();
    x.data()[k] += h;
    EXPECT_NEAR(g.x.data()[k], (up - down) / (2 * h), 1e-7);
    cond.masked_image.data()[k] += h;
    const double up2 = f();
    cond.masked_image.data()[k] -= 2 * h;
    const double down2 = f();
    cond.masked_image.data()[k] += h;
    EXPECT_NEAR(g.masked_image.data()[k], (up2 - down2) / (2 * h), 1e-7);
  }
}
