#include <gtest/gtest.h>

#include <sstream>

#include "ibd/error.hpp"
#include "ibd/mask.hpp"
#include "ibd/trigger.hpp"

using namespace ibd;

TEST(Projection, BoundsAndIdempotence) {
  Rng rng = make_rng(1, 0);
  const Batch g = 2.0 * standard_normal(30, 4, rng);
  const Batch p = project_linf(g, 0.3);
  EXPECT_LE(p.cwiseAbs().maxCoeff(), 0.3);
  EXPECT_EQ(project_linf(p, 0.3), p);
  const Batch small = 0.01 * standard_normal(30, 4, rng);
  EXPECT_EQ(project_linf(small, 0.3), small);
  EXPECT_THROW(project_linf(g, 0.0), InvalidArgument);
  EXPECT_THROW(project_linf(g, -1.0), InvalidArgument);
}

TEST(Projection, NearestPointInBall) {
  Eigen::VectorXd v(3);
  v << 0.5, -0.05, -2.0;
  const Eigen::VectorXd p = project_linf(v, 0.1);
  EXPECT_DOUBLE_EQ(p[0], 0.1);
  EXPECT_DOUBLE_EQ(p[1], -0.05);
  EXPECT_DOUBLE_EQ(p[2], -0.1);
}

TEST(Insertion, AddsTrigger) {
  Rng rng = make_rng(2, 0);
  const Batch eps = standard_normal(8, 3, rng);
  const Batch d = standard_normal(8, 1, rng);
  EXPECT_TRUE(insert_noise_trigger(eps, d).isApprox(eps.colwise() + d.col(0), 0.0));
  const Batch full = standard_normal(8, 3, rng);
  EXPECT_EQ(insert_noise_trigger(eps, full), eps + full);
  EXPECT_THROW(insert_noise_trigger(eps, Batch::Zero(7, 1)), ShapeError);
}

TEST(Distributional, DrawsAroundMean) {
  DistributionalTrigger t{Eigen::VectorXd::Constant(4, 0.2), 0.2};
  Rng rng = make_rng(3, 0);
  const Batch d = sample_distribution_trigger(t, rng, 20000);
  const Eigen::VectorXd mean = d.rowwise().mean();
  const Batch centered = d.colwise() - mean;
  const Eigen::MatrixXd cov = centered * centered.transpose() / (d.cols() - 1.0);
  EXPECT_LT((mean.array() - 0.2).abs().maxCoeff(), 0.03);
  EXPECT_LT((cov - Eigen::MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 0.05);
}

namespace {

Shape small_shape() { return {8, 8, 3}; }

Batch mask_batch(int n, Rng& rng) {
  MaskParams p;
  return draw_mask_batch(p, 8, 8, n, rng);
}

}  // namespace

TEST(Generator, ZeroWhereMaskIsZeroAndBounded) {
  const TriggerGeneratorNet net({small_shape(), 4}, 0.1, 5);
  Rng rng = make_rng(4, 0);
  const Batch mask = mask_batch(6, rng);
  const Batch img = standard_normal(192, 6, rng).cwiseMin(1.0).cwiseMax(-1.0);
  const Batch y = standard_normal(192, 6, rng).cwiseMin(1.0).cwiseMax(-1.0);
  const Batch full = expand_mask(mask, 3);
  const Batch trig = generate_conditional_trigger(net, img.cwiseProduct(full), mask, y, 0.1);
  EXPECT_LE(trig.cwiseAbs().maxCoeff(), 0.1);
  EXPECT_EQ(trig.cwiseProduct((1.0 - full.array()).matrix()).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_GT(trig.cwiseAbs().maxCoeff(), 0.0);
  Batch bad = mask;
  bad(0, 0) = 0.5;
  EXPECT_THROW(generate_conditional_trigger(net, img, bad, y, 0.1), InvalidArgument);
}

TEST(Generator, GradientMatchesFiniteDifference) {
  TriggerGeneratorNet net({small_shape(), 4}, 0.1, 6);
  Rng rng = make_rng(5, 0);
  const Batch mask = mask_batch(2, rng);
  const Batch img = standard_normal(192, 2, rng).cwiseProduct(expand_mask(mask, 3)) * 0.5;
  const Batch y = standard_normal(192, 2, rng) * 0.5;
  const Batch w = standard_normal(192, 2, rng);
  const auto value = [&]() { return generate_conditional_trigger(net, img, mask, y, 0.1).cwiseProduct(w).sum(); };
  ConditionalTriggerCache cache;
  generate_conditional_trigger(net, img, mask, y, 0.1, &cache);
  net.params().zero_grad();
  generate_conditional_trigger_backward(net, cache, w, 0.1);
  const double h = 1e-6;
  for (int p = 0; p < net.params().size(); ++p) {
    auto& param = net.params()[p];
    for (Eigen::Index k = 0; k < std::min<Eigen::Index>(param.value.size(), 4); ++k) {
      const double orig = param.value.data()[k];
      param.value.data()[k] = orig + h;
      const double up = value();
      param.value.data()[k] = orig - h;
      const double down = value();
      param.value.data()[k] = orig;
      const double fd = (up - down) / (2 * h);
      EXPECT_NEAR(param.grad.data()[k], fd, 1e-3 * std::max(1e-3, std::abs(fd))) << param.name << "[" << k << "]";
    }
  }
}

TEST(Serialization, RoundTripsEveryKind) {
  Rng rng = make_rng(6, 0);
  const Trigger u = UniversalTrigger{standard_normal(12, rng) * 0.1, 0.2};
  const Trigger d = DistributionalTrigger{standard_normal(12, rng) * 0.1, 0.3};
  auto net = std::make_shared<TriggerGeneratorNet>(GeneratorConfig{small_shape(), 4}, 0.05, 7);
  const Trigger g = GeneratorTrigger{net, 0.05};

  std::stringstream ss;
  write_generator(ss, *net);
  write_trigger(ss, u);
  write_trigger(ss, d);
  write_trigger(ss, g);

  std::stringstream in(ss.str());
  const auto restored_net = read_generator(in);
  EXPECT_EQ(restored_net->params().checksum(), net->params().checksum());
  EXPECT_EQ(restored_net->config().width, 4);

  const Trigger u2 = read_trigger(in, restored_net);
  const Trigger d2 = read_trigger(in, restored_net);
  const Trigger g2 = read_trigger(in, restored_net);
  EXPECT_EQ(std::get<UniversalTrigger>(u2).delta, std::get<UniversalTrigger>(u).delta);
  EXPECT_EQ(std::get<UniversalTrigger>(u2).bound, 0.2);
  EXPECT_EQ(std::get<DistributionalTrigger>(d2).delta_mean, std::get<DistributionalTrigger>(d).delta_mean);
  EXPECT_EQ(std::get<GeneratorTrigger>(g2).net, restored_net);
  EXPECT_EQ(std::get<GeneratorTrigger>(g2).bound, 0.05);
  EXPECT_EQ(trigger_kind(g2), "generator");
}

TEST(Serialization, TruncatedStreamFails) {
  std::stringstream ss;
  write_trigger(ss, UniversalTrigger{Eigen::VectorXd::Ones(40), 0.2});
  std::string bytes = ss.str();
  bytes.resize(bytes.size() / 2);
  std::stringstream in(bytes);
  EXPECT_THROW(read_trigger(in, nullptr), IntegrityError);
}
