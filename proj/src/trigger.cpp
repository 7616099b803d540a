#include "ibd/trigger.hpp"

#include <cmath>

#include "ibd/error.hpp"

namespace ibd {

TriggerGeneratorNet::TriggerGeneratorNet(GeneratorConfig config, double bound, std::uint64_t seed)
    : config_(config), bound_(bound) {
  const Shape s = config_.shape;
  if (s.size() <= 0 || s.height % 2 != 0 || s.width % 2 != 0) {
    throw InvalidArgument("trigger generator: image sides must be positive and even, got " + s.str());
  }
  if (config_.width < 1) throw InvalidArgument("trigger generator: width must be positive");
  if (!(bound > 0.0) || !std::isfinite(bound)) throw InvalidArgument("trigger generator: bound must be > 0");
  Rng rng = make_rng(seed, 0x9e4);
  const int w = config_.width;
  const int c = s.channels;
  conv1_ = nn::Conv2d::create(params_, "gen.conv1", 2 * c + 1, w, 3, 1, 1, rng);
  conv2_ = nn::Conv2d::create(params_, "gen.conv2", w, 2 * w, 3, 2, 1, rng);
  conv3_ = nn::Conv2d::create(params_, "gen.conv3", 2 * w, 2 * w, 3, 1, 1, rng);
  conv4_ = nn::Conv2d::create(params_, "gen.conv4", 3 * w, w, 3, 1, 1, rng);
  conv5_ = nn::Conv2d::create(params_, "gen.conv5", w, c, 3, 1, 1, rng, 0.5);
}

Batch TriggerGeneratorNet::forward(const Batch& masked_image, const Batch& mask, const Batch& target,
                                   Cache* cache) const {
  const Shape s = config_.shape;
  const auto n = masked_image.cols();
  if (masked_image.rows() != s.size() || target.rows() != s.size() || mask.rows() != s.pixels() ||
      mask.cols() != n || target.cols() != n) {
    throw ShapeError("trigger generator: inputs do not match " + s.str());
  }
  Cache local;
  Cache& c = cache ? *cache : local;
  const int h = s.height;
  const int w = s.width;
  c.input.resize(2 * s.size() + s.pixels(), n);
  c.input << masked_image, mask, target;

  c.pre1 = conv1_.forward(params_, c.input, h, w, &c.cols1);
  const Batch a1 = nn::silu(c.pre1);
  c.pre2 = conv2_.forward(params_, a1, h, w, &c.cols2);
  c.pre3 = conv3_.forward(params_, nn::silu(c.pre2), h / 2, w / 2, &c.cols3);
  const Batch up = nn::upsample2x(nn::silu(c.pre3), 2 * config_.width, h / 2, w / 2);
  Batch cat(up.rows() + a1.rows(), n);
  cat << up, a1;
  c.pre4 = conv4_.forward(params_, cat, h, w, &c.cols4);
  const Batch raw = conv5_.forward(params_, nn::silu(c.pre4), h, w, &c.cols5);
  c.tanh_out = raw.array().tanh().matrix();
  return bound_ * c.tanh_out;
}

void TriggerGeneratorNet::backward(const Cache& c, const Batch& grad_out) {
  const int h = config_.shape.height;
  const int w = config_.shape.width;
  const int f = config_.width;
  const Batch g_raw = (grad_out.array() * bound_ * (1.0 - c.tanh_out.array().square())).matrix();
  const Batch g_a4 = conv5_.backward(params_, c.cols5, g_raw, h, w, true, true);
  const Batch g_pre4 = g_a4.cwiseProduct(nn::silu_grad(c.pre4));
  const Batch g_cat = conv4_.backward(params_, c.cols4, g_pre4, h, w, true, true);
  const Eigen::Index up_rows = static_cast<Eigen::Index>(2 * f) * h * w;
  const Batch g_a3 = nn::upsample2x_backward(g_cat.topRows(up_rows), 2 * f, h / 2, w / 2);
  const Batch g_pre3 = g_a3.cwiseProduct(nn::silu_grad(c.pre3));
  const Batch g_a2 = conv3_.backward(params_, c.cols3, g_pre3, h / 2, w / 2, true, true);
  const Batch g_pre2 = g_a2.cwiseProduct(nn::silu_grad(c.pre2));
  Batch g_a1 = conv2_.backward(params_, c.cols2, g_pre2, h, w, true, true);
  g_a1 += g_cat.bottomRows(g_cat.rows() - up_rows);
  const Batch g_pre1 = g_a1.cwiseProduct(nn::silu_grad(c.pre1));
  conv1_.backward(params_, c.cols1, g_pre1, h, w, true, false);
}

std::string trigger_kind(const Trigger& trigger) {
  switch (trigger.index()) {
    case 0: return "universal";
    case 1: return "distributional";
    default: return "generator";
  }
}

double trigger_bound(const Trigger& trigger) {
  return std::visit([](const auto& t) { return t.bound; }, trigger);
}

Batch insert_noise_trigger(const Batch& eps, const Batch& delta) {
  if (delta.rows() != eps.rows() || (delta.cols() != 1 && delta.cols() != eps.cols())) {
    throw ShapeError("insert_noise_trigger: delta does not match eps");
  }
  if (delta.cols() == eps.cols()) return eps + delta;
  Batch out = eps;
  out.colwise() += delta.col(0);
  return out;
}

Batch sample_distribution_trigger(const DistributionalTrigger& trigger, Rng& rng, int n) {
  if (n < 1) throw InvalidArgument("sample_distribution_trigger: n must be >= 1");
  Batch out = standard_normal(static_cast<int>(trigger.delta_mean.size()), n, rng);
  out.colwise() += trigger.delta_mean;
  return out;
}

namespace {

void check_bound(double bound) {
  if (!(bound > 0.0) || !std::isfinite(bound)) throw InvalidArgument("l-infinity bound must be finite and > 0");
}

}  // namespace

Batch project_linf(const Batch& grid, double bound) {
  check_bound(bound);
  return grid.cwiseMax(-bound).cwiseMin(bound);
}

Eigen::VectorXd project_linf(const Eigen::VectorXd& grid, double bound) {
  check_bound(bound);
  return grid.cwiseMax(-bound).cwiseMin(bound);
}

Batch generate_conditional_trigger(const TriggerGeneratorNet& net, const Batch& masked_image, const Batch& mask,
                                   const Batch& target, double bound, ConditionalTriggerCache* cache) {
  check_bound(bound);
  if (!((mask.array() == 0.0) || (mask.array() == 1.0)).all()) {
    throw InvalidArgument("generate_conditional_trigger: mask is not binary");
  }
  ConditionalTriggerCache local;
  ConditionalTriggerCache& c = cache ? *cache : local;
  const Batch head = net.forward(masked_image, mask, target, &c.net);
  c.mask_full = expand_mask(mask, net.config().shape.channels);
  c.masked = head.cwiseProduct(c.mask_full);
  return project_linf(c.masked, bound);
}

void generate_conditional_trigger_backward(TriggerGeneratorNet& net, const ConditionalTriggerCache& cache,
                                           const Batch& grad_trigger, double bound) {
  require_same_shape(grad_trigger, cache.masked, "generate_conditional_trigger_backward");
  const Batch inside = (cache.masked.array().abs() <= bound).cast<double>().matrix();
  net.backward(cache.net, grad_trigger.cwiseProduct(cache.mask_full).cwiseProduct(inside));
}

void write_trigger(std::ostream& out, const Trigger& trigger) {
  nn::write_pod(out, static_cast<std::uint8_t>(trigger.index()));
  nn::write_pod(out, trigger_bound(trigger));
  if (const auto* u = std::get_if<UniversalTrigger>(&trigger)) {
    nn::write_matrix(out, u->delta);
  } else if (const auto* d = std::get_if<DistributionalTrigger>(&trigger)) {
    nn::write_matrix(out, d->delta_mean);
  }
}

Trigger read_trigger(std::istream& in, const std::shared_ptr<TriggerGeneratorNet>& shared_net) {
  const auto kind = nn::read_pod<std::uint8_t>(in);
  const auto bound = nn::read_pod<double>(in);
  switch (kind) {
    case 0: {
      const Eigen::MatrixXd m = nn::read_matrix(in);
      if (m.cols() != 1) throw IntegrityError("universal trigger must be a single column");
      return UniversalTrigger{m.col(0), bound};
    }
    case 1: {
      const Eigen::MatrixXd m = nn::read_matrix(in);
      if (m.cols() != 1) throw IntegrityError("distributional trigger must be a single column");
      return DistributionalTrigger{m.col(0), bound};
    }
    case 2:
      if (!shared_net) throw IntegrityError("generator trigger stored without its network");
      return GeneratorTrigger{shared_net, bound};
    default:
      throw IntegrityError("unknown trigger kind tag " + std::to_string(kind));
  }
}

void write_generator(std::ostream& out, const TriggerGeneratorNet& net) {
  const GeneratorConfig& c = net.config();
  nn::write_pod(out, static_cast<std::int32_t>(c.shape.height));
  nn::write_pod(out, static_cast<std::int32_t>(c.shape.width));
  nn::write_pod(out, static_cast<std::int32_t>(c.shape.channels));
  nn::write_pod(out, static_cast<std::int32_t>(c.width));
  nn::write_pod(out, net.bound());
  nn::write_parameters(out, net.params());
}

std::shared_ptr<TriggerGeneratorNet> read_generator(std::istream& in) {
  GeneratorConfig c;
  c.shape.height = nn::read_pod<std::int32_t>(in);
  c.shape.width = nn::read_pod<std::int32_t>(in);
  c.shape.channels = nn::read_pod<std::int32_t>(in);
  c.width = nn::read_pod<std::int32_t>(in);
  const auto bound = nn::read_pod<double>(in);
  std::shared_ptr<TriggerGeneratorNet> net;
  try {
    net = std::make_shared<TriggerGeneratorNet>(c, bound, 0);
  } catch (const InvalidArgument& e) {
    throw IntegrityError(std::string("stored generator header is invalid: ") + e.what());
  }
  nn::read_parameters(in, net->params());
  return net;
}

}  // namespace ibd
