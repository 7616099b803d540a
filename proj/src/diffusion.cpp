#include "ibd/diffusion.hpp"

#include <cmath>

#include "ibd/error.hpp"

namespace ibd {

namespace {

void check_times(std::span<const int> t, Eigen::Index cols, const NoiseSchedule& schedule) {
  if (static_cast<Eigen::Index>(t.size()) != cols) throw ShapeError("one timestep per column required");
  for (int ti : t) {
    if (ti < 0 || ti > schedule.T()) throw InvalidArgument("timestep " + std::to_string(ti) + " outside [0, T]");
  }
}

std::vector<int> repeat(int t, Eigen::Index n) { return std::vector<int>(static_cast<std::size_t>(n), t); }

}  // namespace

Batch forward_marginal_clean(const Batch& x0, std::span<const int> t, const Batch& eps,
                             const NoiseSchedule& schedule) {
  require_same_shape(x0, eps, "forward_marginal_clean");
  check_times(t, x0.cols(), schedule);
  Batch out(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    const double ab = schedule.alpha_bar(t[static_cast<std::size_t>(j)]);
    out.col(j) = std::sqrt(ab) * x0.col(j) + std::sqrt(1.0 - ab) * eps.col(j);
  }
  return out;
}

Batch forward_marginal_clean(const Batch& x0, int t, const Batch& eps, const NoiseSchedule& schedule) {
  const auto ts = repeat(t, x0.cols());
  return forward_marginal_clean(x0, ts, eps, schedule);
}

Batch forward_marginal_backdoored(const Batch& y, const Batch& delta, std::span<const int> t, const Batch& eps,
                                  const NoiseSchedule& schedule) {
  require_same_shape(y, eps, "forward_marginal_backdoored");
  require_same_shape(delta, eps, "forward_marginal_backdoored");
  check_times(t, y.cols(), schedule);
  Batch out(y.rows(), y.cols());
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const double ab = schedule.alpha_bar(t[static_cast<std::size_t>(j)]);
    const double s = std::sqrt(ab);
    out.col(j) = s * y.col(j) + (1.0 - s) * delta.col(j) + std::sqrt(1.0 - ab) * eps.col(j);
  }
  return out;
}

Batch forward_marginal_backdoored(const Batch& y, const Batch& delta, int t, const Batch& eps,
                                  const NoiseSchedule& schedule) {
  const auto ts = repeat(t, y.cols());
  return forward_marginal_backdoored(y, delta, ts, eps, schedule);
}

double training_zeta(const NoiseSchedule& schedule, int t) { return zeta_coefficient(schedule, {t, t - 1}); }

RegressionTarget clean_target(const Batch& x0, std::span<const int> t, const Batch& eps,
                              const NoiseSchedule& schedule) {
  return {forward_marginal_clean(x0, t, eps, schedule), eps};
}

RegressionTarget backdoor_target(const Batch& y, const Batch& delta, std::span<const int> t, const Batch& eps,
                                 const NoiseSchedule& schedule) {
  RegressionTarget r{forward_marginal_backdoored(y, delta, t, eps, schedule), eps};
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const int tj = t[static_cast<std::size_t>(j)];
    if (tj < 1) throw InvalidArgument("backdoor target needs t >= 1");
    r.target.col(j) += training_zeta(schedule, tj) * delta.col(j);
  }
  return r;
}

LossAndGrad mse_with_grad(const Batch& prediction, const Batch& target) {
  require_same_shape(prediction, target, "mse");
  const double n = static_cast<double>(prediction.size());
  if (n == 0) throw InvalidArgument("mse: empty input");
  Batch diff = prediction - target;
  LossAndGrad r;
  r.value = diff.squaredNorm() / n;
  r.grad = (2.0 / n) * diff;
  return r;
}

Eigen::VectorXd per_sample_mse(const Batch& a, const Batch& b) {
  require_same_shape(a, b, "per_sample_mse");
  return (a - b).colwise().squaredNorm().transpose() / static_cast<double>(a.rows());
}

double loss_clean(const EpsilonFn& model, const Batch& x0, std::span<const int> t, const Batch& eps,
                  const NoiseSchedule& schedule) {
  const RegressionTarget r = clean_target(x0, t, eps, schedule);
  return mse_with_grad(model(r.input, t), r.target).value;
}

double loss_backdoor_unconditional(const EpsilonFn& model, const Batch& y, const Batch& delta,
                                   std::span<const int> t, const Batch& eps, const NoiseSchedule& schedule) {
  const RegressionTarget r = backdoor_target(y, delta, t, eps, schedule);
  return mse_with_grad(model(r.input, t), r.target).value;
}

Eigen::VectorXd loss_outer_unconditional(const EpsilonFn& model, const Batch& x0, std::span<const Origin> origin,
                                         const Batch& delta, const Batch& y, std::span<const int> t,
                                         const Batch& eps, const NoiseSchedule& schedule) {
  require_same_shape(x0, eps, "loss_outer_unconditional");
  require_same_shape(delta, eps, "loss_outer_unconditional");
  require_same_shape(y, eps, "loss_outer_unconditional");
  if (static_cast<Eigen::Index>(origin.size()) != x0.cols()) throw ShapeError("one origin tag per column required");
  Batch input(x0.rows(), x0.cols());
  Batch target(x0.rows(), x0.cols());
  for (Eigen::Index j = 0; j < x0.cols(); ++j) {
    const std::span<const int> tj = t.subspan(static_cast<std::size_t>(j), 1);
    RegressionTarget r;
    switch (origin[static_cast<std::size_t>(j)]) {
      case Origin::kClean:
        r = clean_target(x0.col(j), tj, eps.col(j), schedule);
        break;
      case Origin::kPoisoned:
        r = backdoor_target(y.col(j), delta.col(j), tj, eps.col(j), schedule);
        break;
      default:
        throw InvalidArgument("unknown origin tag");
    }
    input.col(j) = r.input;
    target.col(j) = r.target;
  }
  return per_sample_mse(model(input, t), target);
}

ConditionalEpsilonFn as_conditional_fn(const DenoiserMlp& model) {
  return [&model](const Batch& x_t, std::span<const int> t, const Conditioning& cond) {
    return model.forward(x_t, t, &cond, nullptr);
  };
}

ConditionalTarget conditional_target(const ConditionalItems& items, std::span<const Origin> origin,
                                     std::span<const int> t, const Batch& eps, const NoiseSchedule& schedule,
                                     int channels) {
  const auto n = items.image.cols();
  require_same_shape(items.image, eps, "conditional_target");
  require_same_shape(items.trigger, eps, "conditional_target");
  if (items.mask.cols() != n || items.mask.rows() * channels != items.image.rows() ||
      static_cast<Eigen::Index>(items.text.size()) != n || static_cast<Eigen::Index>(origin.size()) != n) {
    throw ShapeError("conditional_target: inconsistent batch");
  }
  const Batch mask_full = expand_mask(items.mask, channels);
  ConditionalTarget out;
  out.input.resize(items.image.rows(), n);
  out.target = eps;
  out.cond.mask = items.mask;
  out.cond.text = items.text;
  out.cond.masked_image = items.image.cwiseProduct(mask_full);
  for (Eigen::Index j = 0; j < n; ++j) {
    const std::span<const int> tj = t.subspan(static_cast<std::size_t>(j), 1);
    switch (origin[static_cast<std::size_t>(j)]) {
      case Origin::kClean:
        out.input.col(j) = forward_marginal_clean(items.image.col(j), tj, eps.col(j), schedule);
        break;
      case Origin::kPoisoned: {
        const auto outside = items.trigger.col(j).cwiseProduct((1.0 - mask_full.col(j).array()).matrix());
        if (outside.cwiseAbs().maxCoeff() != 0.0) {
          throw ConstraintViolation("trigger is non-zero inside the masked (edit) region");
        }
        if (items.y.cols() != n || items.y.rows() != items.image.rows()) throw ShapeError("conditional_target: y batch");
        out.input.col(j) = forward_marginal_clean(items.y.col(j), tj, eps.col(j), schedule);
        out.cond.masked_image.col(j) += items.trigger.col(j);
        break;
      }
      default:
        throw InvalidArgument("unknown origin tag");
    }
  }
  return out;
}

Eigen::VectorXd loss_outer_conditional(const ConditionalEpsilonFn& model, const ConditionalItems& items,
                                       std::span<const Origin> origin, std::span<const int> t, const Batch& eps,
                                       const NoiseSchedule& schedule, int channels) {
  const ConditionalTarget c = conditional_target(items, origin, t, eps, schedule, channels);
  return per_sample_mse(model(c.input, t, c.cond), c.target);
}

}  // namespace ibd
