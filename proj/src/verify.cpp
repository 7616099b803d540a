#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "ibd/diffusion.hpp"
#include "ibd/error.hpp"
#include "ibd/eval.hpp"

namespace ibd {

bool VerifyReport::all_passed() const {
  return !checks.empty() && std::all_of(checks.begin(), checks.end(), [](const CheckResult& c) { return c.passed; });
}

double lemma_composition_error(const NoiseSchedule& schedule, const Eigen::VectorXd& x0, const Eigen::VectorXd& delta,
                               const std::vector<double>& sigma_fraction) {
  const int T = schedule.T();
  const auto d = x0.size();
  if (delta.size() != d) throw ShapeError("lemma check: x0 and delta differ in size");
  if (static_cast<int>(sigma_fraction.size()) != T) throw InvalidArgument("lemma check: one sigma per step");
  const auto shifted_mean = [&](int t) -> Eigen::VectorXd {
    const double s = std::sqrt(schedule.alpha_bar(t));
    return s * x0 + (1.0 - s) * delta;
  };
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(d, d);
  const auto rel = [](const auto& diff, const auto& ref) {
    const double r = ref.norm();
    return diff.norm() / (r > 0.0 ? r : 1.0);
  };

  Eigen::VectorXd mean = shifted_mean(T);
  Eigen::MatrixXd cov = (1.0 - schedule.alpha_bar(T)) * I;
  double worst = 0.0;
  for (int t = T; t >= 1; --t) {
    const double ab_t = schedule.alpha_bar(t);
    const double ab_p = schedule.alpha_bar(t - 1);
    const double frac = sigma_fraction[static_cast<std::size_t>(t - 1)];
    if (frac < 0.0 || frac >= 1.0) throw InvalidArgument("lemma check: sigma fraction must lie in [0, 1)");
    const double sigma2 = frac * (1.0 - ab_p);
    const double k = std::sqrt(1.0 - ab_p - sigma2) / std::sqrt(1.0 - ab_t);
    // x_{t-1} | x_t ~ N(A x_t + b, sigma^2 I) with A = k I; marginalize x_t.
    const Eigen::MatrixXd A = k * I;
    const Eigen::VectorXd b = shifted_mean(t - 1) - k * shifted_mean(t);
    mean = A * mean + b;
    cov = A * cov * A.transpose() + sigma2 * I;
    const Eigen::VectorXd mean_ref = shifted_mean(t - 1);
    const Eigen::MatrixXd cov_ref = (1.0 - ab_p) * I;
    worst = std::max({worst, rel(mean - mean_ref, mean_ref), rel(cov - cov_ref, cov_ref)});
  }
  return worst;
}

double oracle_reconstruction_error(const NoiseSchedule& schedule, int n_steps, const Batch& y, const Batch& delta,
                                   const Batch& eps, double zeta_scale) {
  const StepPredictor predictor = [&](const Batch& x_t, StepPair pair) {
    Batch out = oracle_backdoor_predictor(x_t, pair, y, delta, schedule);
    if (zeta_scale != 1.0) out += (zeta_scale - 1.0) * zeta_coefficient(schedule, pair) * delta;
    return out;
  };
  SamplerConfig cfg;
  cfg.n_steps = n_steps;
  const Batch out = sample_unconditional(predictor, insert_noise_trigger(eps, delta), cfg, schedule);
  return (out - y).cwiseAbs().maxCoeff();
}

namespace {

std::vector<double> uniform_vector(int n, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = u(rng);
  return v;
}

Batch uniform_batch(int rows, int cols, double lo, double hi, Rng& rng) {
  std::uniform_real_distribution<double> u(lo, hi);
  Batch b(rows, cols);
  for (Eigen::Index j = 0; j < b.cols(); ++j) {
    for (Eigen::Index i = 0; i < b.rows(); ++i) b(i, j) = u(rng);
  }
  return b;
}

std::string describe(const ScheduleParams& p) {
  std::ostringstream s;
  s << "T=" << p.T << " beta=[" << p.beta_start << "," << p.beta_end << "]";
  return s.str();
}

CheckResult make(std::string name, double err, double tol, std::string detail) {
  return {std::move(name), err <= tol && std::isfinite(err), err, tol, std::move(detail)};
}

}  // namespace

VerifyReport verify_derivations(const VerifyOptions& options) {
  if (options.schedules.empty()) throw InvalidArgument("verify_derivations: no schedules given");
  Rng rng = make_rng(options.seed, 0x7e5);
  std::vector<NoiseSchedule> schedules;
  std::vector<std::string> names;
  for (const ScheduleParams& p : options.schedules) {
    schedules.push_back(build_linear_schedule(p));
    names.push_back(describe(p));
  }
  VerifyReport report;

  // (a) Gaussian composition reproduces the shifted marginal.
  {
    std::vector<NoiseSchedule> small;
    std::vector<std::string> small_names;
    for (std::size_t i = 0; i < schedules.size(); ++i) {
      if (schedules[i].T() <= 10) {
        small.push_back(schedules[i]);
        small_names.push_back(names[i]);
      }
    }
    std::uniform_int_distribution<int> pick_T(2, 10);
    for (int i = 0; i < options.random_small_schedules; ++i) {
      const int T = pick_T(rng);
      std::vector<double> betas = uniform_vector(T, 1e-3, 0.5, rng);
      std::sort(betas.begin(), betas.end());
      small.emplace_back(betas);
      small_names.push_back("random T=" + std::to_string(T));
    }
    double worst = 0.0;
    for (const NoiseSchedule& s : small) {
      const int d = 6;
      const Eigen::VectorXd x0 = uniform_batch(d, 1, -1, 1, rng).col(0);
      const Eigen::VectorXd delta = uniform_batch(d, 1, -1, 1, rng).col(0);
      std::vector<double> frac = uniform_vector(s.T(), 0.0, 0.9, rng);
      worst = std::max(worst, lemma_composition_error(s, x0, delta, frac));
    }
    std::string detail = std::to_string(small.size()) + " schedules with T <= 10";
    report.checks.push_back(make("a_marginal_composition", worst, 1e-9, detail));
  }

  // (b) Oracle predictor + unmodified DDIM reconstructs y.
  {
    double worst = 0.0;
    std::string detail;
    for (std::size_t i = 0; i < schedules.size(); ++i) {
      const NoiseSchedule& s = schedules[i];
      std::set<int> steps;
      for (int n : {1, 3, 10, s.T()}) steps.insert(std::min(n, s.T()));
      const int d = 8;
      const int n = 4;
      const Batch y = uniform_batch(d, n, -1, 1, rng);
      const Batch delta = uniform_batch(d, n, -1, 1, rng);
      const Batch eps = standard_normal(d, n, rng);
      for (int k : steps) {
        worst = std::max(worst, oracle_reconstruction_error(s, k, y, delta, eps, options.zeta_scale));
      }
      detail += (detail.empty() ? "" : "; ") + names[i];
    }
    report.checks.push_back(make("b_oracle_reconstruction", worst, 1e-4, detail));
  }

  // (c) delta = 0 makes the backdoor loss the clean loss.
  {
    DenoiserConfig mc;
    mc.shape = {4, 4, 1};
    mc.hidden = 16;
    mc.blocks = 1;
    mc.time_features = 8;
    const DenoiserMlp model(mc, options.seed + 1);
    const EpsilonFn fn = as_epsilon_fn(model);
    double worst = 0.0;
    for (int inst = 0; inst < 100; ++inst) {
      const NoiseSchedule& s = schedules[static_cast<std::size_t>(inst) % schedules.size()];
      std::uniform_int_distribution<int> pick_t(1, s.T());
      const int n = 3;
      std::vector<int> t(n);
      for (int& ti : t) ti = pick_t(rng);
      const Batch y = uniform_batch(mc.shape.size(), n, -1, 1, rng);
      const Batch eps = standard_normal(mc.shape.size(), n, rng);
      const Batch zero = Batch::Zero(y.rows(), n);
      const double a = loss_backdoor_unconditional(fn, y, zero, t, eps, s);
      const double b = loss_clean(fn, y, t, eps, s);
      worst = std::max(worst, std::abs(a - b));
    }
    report.checks.push_back(make("c_zero_trigger_reduction", worst, 1e-6, "100 random instances"));
  }

  // (d) zeta at ab_prev = 1 equals (1 - sqrt(ab_t)) / sqrt(1 - ab_t).
  {
    double worst = 0.0;
    const std::vector<double> abs = uniform_vector(200, 1e-6, 1.0 - 1e-6, rng);
    for (double ab : abs) {
      const double ref = (1.0 - std::sqrt(ab)) / std::sqrt(1.0 - ab);
      worst = std::max(worst, std::abs(zeta_coefficient(1.0, ab) - ref) / std::abs(ref));
    }
    for (const NoiseSchedule& s : schedules) {
      for (int t = 1; t <= s.T(); t = t < 16 ? t + 1 : t * 2) {
        const double ab = s.alpha_bar(t);
        const double ref = (1.0 - std::sqrt(ab)) / std::sqrt(1.0 - ab);
        worst = std::max(worst, std::abs(zeta_coefficient(s, {t, 0}) - ref) / std::abs(ref));
      }
    }
    report.checks.push_back(make("d_zeta_boundary", worst, 1e-12, "random alpha_bar and schedule pairs (t, 0)"));
  }

  // (e) DDIM update with eps + zeta delta equals the rearranged backdoored transition.
  {
    double worst = 0.0;
    const int d = 8;
    for (const NoiseSchedule& s : schedules) {
      std::uniform_int_distribution<int> pick_t(1, s.T());
      for (int trial = 0; trial < 20; ++trial) {
        int t = pick_t(rng);
        int tp = std::uniform_int_distribution<int>(0, t - 1)(rng);
        if (trial == 0) tp = t - 1;
        const StepPair pair{t, tp};
        const double ab_t = s.alpha_bar(t);
        const double ab_p = s.alpha_bar(tp);
        const Batch x_t = standard_normal(d, 1, rng);
        const Batch eps = standard_normal(d, 1, rng);
        const Batch delta = uniform_batch(d, 1, -1, 1, rng);
        const double zeta = options.zeta_scale * zeta_coefficient(s, pair);

        const Batch x0 = (x_t - std::sqrt(1.0 - ab_t) * eps - (1.0 - std::sqrt(ab_t)) * delta) / std::sqrt(ab_t);
        const Batch truth = std::sqrt(ab_p) * x0 + (1.0 - std::sqrt(ab_p)) * delta +
                            std::sqrt(1.0 - ab_p) *
                                (x_t - std::sqrt(ab_t) * x0 - (1.0 - std::sqrt(ab_t)) * delta) / std::sqrt(1.0 - ab_t);
        const Batch via_ddim = ddim_step(x_t, eps + zeta * delta, pair, s);
        const double c = (std::sqrt(ab_p) * std::sqrt(1.0 - ab_t) - std::sqrt(ab_t) * std::sqrt(1.0 - ab_p)) /
                         std::sqrt(ab_p);
        const Batch rearranged = std::sqrt(ab_p) / std::sqrt(ab_t) * (x_t - c * (eps + zeta * delta));
        const double scale = std::max(1.0, truth.norm());
        worst = std::max({worst, (via_ddim - truth).norm() / scale, (rearranged - truth).norm() / scale});
      }
    }
    report.checks.push_back(make("e_ddim_matches_backdoor_transition", worst, 1e-9, "20 random pairs per schedule"));
  }
  return report;
}

}  // namespace ibd
