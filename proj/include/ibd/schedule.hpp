#pragma once

#include <vector>

namespace ibd {

/// Discrete noise schedule over t = 1..T with the convention alpha_bar(0) = 1.
/// Immutable once built.
class NoiseSchedule {
 public:
  /// Builds from explicit betas (beta_1..beta_T). Each beta must lie in (0, 1).
  explicit NoiseSchedule(std::vector<double> betas);

  int T() const { return static_cast<int>(betas_.size()); }
  double beta(int t) const { return betas_.at(t - 1); }
  double alpha(int t) const { return alphas_.at(t - 1); }
  double alpha_bar(int t) const { return alpha_bars_.at(t); }

  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alphas() const { return alphas_; }
  /// Index 0..T, alpha_bars()[0] == 1.
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }

 private:
  std::vector<double> betas_;
  std::vector<double> alphas_;
  std::vector<double> alpha_bars_;
};

struct StepPair {
  int t = 0;
  int t_prev = 0;
  bool operator==(const StepPair&) const = default;
};

struct ScheduleParams {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

inline constexpr double kDegenerateStepEpsilon = 1e-12;

/// Linear betas from beta_start to beta_end inclusive.
NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end);
inline NoiseSchedule build_linear_schedule(const ScheduleParams& p) {
  return build_linear_schedule(p.T, p.beta_start, p.beta_end);
}

/// Coefficient on delta in the backdoored noise target eps + zeta * delta:
///   (sqrt(ab_prev) - sqrt(ab_t)) / (sqrt(ab_prev) sqrt(1-ab_t) - sqrt(ab_t) sqrt(1-ab_prev)).
/// Throws DegenerateStep when |denominator| < epsilon.
double zeta_coefficient(double alpha_bar_prev, double alpha_bar_t,
                        double epsilon = kDegenerateStepEpsilon);
double zeta_coefficient(const NoiseSchedule& schedule, StepPair pair,
                        double epsilon = kDegenerateStepEpsilon);

/// n_steps pairs descending from T to 0 over floor(linspace(0, T, n_steps + 1)).
std::vector<StepPair> ddim_subsequence(int T, int n_steps);

void validate_pair(const NoiseSchedule& schedule, StepPair pair);

}  // namespace ibd
