#include "ibd/schedule.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "ibd/error.hpp"

namespace ibd {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw InvalidArgument("schedule: T must be at least 1");
  alphas_.reserve(betas_.size());
  alpha_bars_.reserve(betas_.size() + 1);
  alpha_bars_.push_back(1.0);
  for (double b : betas_) {
    if (!std::isfinite(b) || b <= 0.0 || b >= 1.0) {
      throw InvalidArgument("schedule: beta " + std::to_string(b) + " outside (0, 1)");
    }
    alphas_.push_back(1.0 - b);
    alpha_bars_.push_back(alpha_bars_.back() * alphas_.back());
  }
}

NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw InvalidArgument("build_linear_schedule: T must be >= 1");
  if (!std::isfinite(beta_start) || !std::isfinite(beta_end)) {
    throw InvalidArgument("build_linear_schedule: non-finite beta bound");
  }
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw InvalidArgument("build_linear_schedule: require 0 < beta_start <= beta_end < 1");
  }
  std::vector<double> betas(static_cast<std::size_t>(T));
  if (T == 1) {
    betas[0] = beta_start;
  } else {
    for (int i = 0; i < T; ++i) {
      betas[i] = beta_start + (beta_end - beta_start) * static_cast<double>(i) / static_cast<double>(T - 1);
    }
    betas.back() = beta_end;
  }
  return NoiseSchedule(std::move(betas));
}

double zeta_coefficient(double alpha_bar_prev, double alpha_bar_t, double epsilon) {
  const double sp = std::sqrt(alpha_bar_prev);
  const double st = std::sqrt(alpha_bar_t);
  const double denom = sp * std::sqrt(1.0 - alpha_bar_t) - st * std::sqrt(1.0 - alpha_bar_prev);
  if (!(std::abs(denom) >= epsilon)) {
    throw DegenerateStep("zeta: denominator " + std::to_string(denom) + " below epsilon (alpha_bar_prev=" +
                         std::to_string(alpha_bar_prev) + ", alpha_bar_t=" + std::to_string(alpha_bar_t) + ")");
  }
  return (sp - st) / denom;
}

void validate_pair(const NoiseSchedule& schedule, StepPair pair) {
  if (pair.t_prev < 0 || pair.t_prev >= pair.t || pair.t > schedule.T()) {
    throw InvalidArgument("step pair (" + std::to_string(pair.t) + ", " + std::to_string(pair.t_prev) +
                          ") violates 0 <= t_prev < t <= T");
  }
}

double zeta_coefficient(const NoiseSchedule& schedule, StepPair pair, double epsilon) {
  validate_pair(schedule, pair);
  return zeta_coefficient(schedule.alpha_bar(pair.t_prev), schedule.alpha_bar(pair.t), epsilon);
}

std::vector<StepPair> ddim_subsequence(int T, int n_steps) {
  if (T < 1) throw InvalidArgument("ddim_subsequence: T must be >= 1");
  if (n_steps < 1 || n_steps > T) {
    throw InvalidArgument("ddim_subsequence: need 1 <= n_steps <= T (got " + std::to_string(n_steps) + ")");
  }
  std::vector<int> points;
  points.reserve(static_cast<std::size_t>(n_steps) + 1);
  for (int i = 0; i <= n_steps; ++i) {
    const double real_index = static_cast<double>(T) * static_cast<double>(i) / static_cast<double>(n_steps);
    points.push_back(static_cast<int>(std::floor(real_index)));
  }
  points.back() = T;
  points.erase(std::unique(points.begin(), points.end()), points.end());

  std::vector<StepPair> pairs;
  for (std::size_t i = points.size() - 1; i > 0; --i) pairs.push_back({points[i], points[i - 1]});
  return pairs;
}

}  // namespace ibd
