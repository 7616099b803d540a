#pragma once

// Forward processes (clean and backdoored) and the training losses built on
// them. All squared-error losses use the mean over elements.

#include <span>
#include <vector>

#include "ibd/grid.hpp"
#include "ibd/model.hpp"
#include "ibd/schedule.hpp"

namespace ibd {

/// x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps, per column timestep in [0, T].
Batch forward_marginal_clean(const Batch& x0, std::span<const int> t, const Batch& eps,
                             const NoiseSchedule& schedule);
Batch forward_marginal_clean(const Batch& x0, int t, const Batch& eps, const NoiseSchedule& schedule);

/// x'_t = sqrt(ab_t) y + (1 - sqrt(ab_t)) delta + sqrt(1 - ab_t) eps.
Batch forward_marginal_backdoored(const Batch& y, const Batch& delta, std::span<const int> t, const Batch& eps,
                                  const NoiseSchedule& schedule);
Batch forward_marginal_backdoored(const Batch& y, const Batch& delta, int t, const Batch& eps,
                                  const NoiseSchedule& schedule);

/// zeta for the training-time convention: consecutive pair (t - 1, t).
double training_zeta(const NoiseSchedule& schedule, int t);

/// Network input and the noise it should predict.
struct RegressionTarget {
  Batch input;
  Batch target;
};

RegressionTarget clean_target(const Batch& x0, std::span<const int> t, const Batch& eps,
                              const NoiseSchedule& schedule);
/// Target eps + zeta_t delta with zeta at (t - 1, t).
RegressionTarget backdoor_target(const Batch& y, const Batch& delta, std::span<const int> t, const Batch& eps,
                                 const NoiseSchedule& schedule);

struct LossAndGrad {
  double value = 0.0;
  Batch grad;  // d value / d prediction
};

/// Mean over all elements of (prediction - target)^2 and its gradient.
LossAndGrad mse_with_grad(const Batch& prediction, const Batch& target);

/// Per-column mean squared error.
Eigen::VectorXd per_sample_mse(const Batch& a, const Batch& b);

double loss_clean(const EpsilonFn& model, const Batch& x0, std::span<const int> t, const Batch& eps,
                  const NoiseSchedule& schedule);
double loss_backdoor_unconditional(const EpsilonFn& model, const Batch& y, const Batch& delta,
                                   std::span<const int> t, const Batch& eps, const NoiseSchedule& schedule);

enum class Origin { kClean, kPoisoned };

/// Two-branch outer loss. Column j uses x0.col(j) when clean, and
/// (y.col(j), delta.col(j)) when poisoned. Returns one loss per column.
Eigen::VectorXd loss_outer_unconditional(const EpsilonFn& model, const Batch& x0, std::span<const Origin> origin,
                                         const Batch& delta, const Batch& y, std::span<const int> t,
                                         const Batch& eps, const NoiseSchedule& schedule);

using ConditionalEpsilonFn =
    std::function<Batch(const Batch& x_t, std::span<const int> t, const Conditioning& cond)>;

ConditionalEpsilonFn as_conditional_fn(const DenoiserMlp& model);

/// Inputs for one conditional outer-loss evaluation. For a clean column,
/// `image` is the training image x0; for a poisoned column it is the clean
/// donor x_c whose masked version carries the trigger, and the noised image
/// is the target y.
struct ConditionalItems {
  Batch image;
  Batch mask;                      // (H*W) x N
  std::vector<TextCondition> text;
  Batch trigger;                   // zero columns for clean items
  Batch y;                         // target per column (ignored for clean)
};

struct ConditionalTarget {
  Batch input;
  Conditioning cond;
  Batch target;
};

/// Builds the network inputs for both branches. Throws ConstraintViolation
/// when a trigger is non-zero where the mask is 0.
ConditionalTarget conditional_target(const ConditionalItems& items, std::span<const Origin> origin,
                                     std::span<const int> t, const Batch& eps, const NoiseSchedule& schedule,
                                     int channels);

Eigen::VectorXd loss_outer_conditional(const ConditionalEpsilonFn& model, const ConditionalItems& items,
                                       std::span<const Origin> origin, std::span<const int> t, const Batch& eps,
                                       const NoiseSchedule& schedule, int channels);

}  // namespace ibd
