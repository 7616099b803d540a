#include "ibd/sampling.hpp"

#include <cmath>

#include "ibd/error.hpp"

namespace ibd {

void validate_sampler(const SamplerConfig& cfg, const NoiseSchedule& schedule) {
  if (cfg.n_steps < 1 || cfg.n_steps > schedule.T()) {
    throw InvalidArgument("sampler: n_steps must lie in [1, T]");
  }
  if (!std::isfinite(cfg.eta) || cfg.eta < 0.0) throw InvalidArgument("sampler: eta must be finite and >= 0");
  if (!std::isfinite(cfg.guidance_scale)) throw InvalidArgument("sampler: guidance scale must be finite");
  if (cfg.differentiable && cfg.eta != 0.0) {
    throw InvalidArgument("sampler: the differentiable path requires eta = 0");
  }
  if (cfg.kind == SamplerKind::kDpmSolver2 && cfg.n_steps < 2) {
    throw InvalidArgument("sampler: DPM-Solver-2 needs n_steps >= 2");
  }
}

DdimCoefficients ddim_coefficients(const NoiseSchedule& schedule, StepPair pair) {
  validate_pair(schedule, pair);
  const double ab_t = schedule.alpha_bar(pair.t);
  const double ab_p = schedule.alpha_bar(pair.t_prev);
  const double ratio = std::sqrt(ab_p) / std::sqrt(ab_t);
  return {ratio, std::sqrt(1.0 - ab_p) - ratio * std::sqrt(1.0 - ab_t)};
}

namespace {

void clamp_unit(Batch& x) { x = x.cwiseMax(-1.0).cwiseMin(1.0); }

}  // namespace

Batch ddim_step(const Batch& x_t, const Batch& eps_hat, StepPair pair, const NoiseSchedule& schedule, bool clip) {
  require_same_shape(x_t, eps_hat, "ddim_step");
  const double ab_t = schedule.alpha_bar(pair.t);
  const double ab_p = schedule.alpha_bar(pair.t_prev);
  validate_pair(schedule, pair);
  Batch out = std::sqrt(ab_p) * (x_t - std::sqrt(1.0 - ab_t) * eps_hat) / std::sqrt(ab_t) +
              std::sqrt(1.0 - ab_p) * eps_hat;
  if (clip) clamp_unit(out);
  return out;
}

StepPredictor step_predictor(const DenoiserMlp& model, const Conditioning* cond) {
  return [&model, cond](const Batch& x_t, StepPair pair) { return model.predict(x_t, pair.t, cond); };
}

Batch sample_unconditional(const StepPredictor& predictor, const Batch& x_T, const SamplerConfig& cfg,
                           const NoiseSchedule& schedule, const LatentHook& hook, Rng* rng) {
  validate_sampler(cfg, schedule);
  if (cfg.kind == SamplerKind::kDpmSolver2) return dpmsolver2_sample(predictor, x_T, cfg, schedule, hook);
  if (cfg.eta != 0.0 && rng == nullptr) throw InvalidArgument("sampler: eta > 0 needs a random source");

  Batch x = x_T;
  for (const StepPair pair : ddim_subsequence(schedule.T(), cfg.n_steps)) {
    const Batch eps_hat = predictor(x, pair);
    require_same_shape(x, eps_hat, "sample_unconditional");
    if (cfg.eta == 0.0) {
      x = ddim_step(x, eps_hat, pair, schedule, cfg.clip_latents);
    } else {
      const double ab_t = schedule.alpha_bar(pair.t);
      const double ab_p = schedule.alpha_bar(pair.t_prev);
      const double sigma =
          cfg.eta * std::sqrt((1.0 - ab_p) / (1.0 - ab_t)) * std::sqrt(std::max(0.0, 1.0 - ab_t / ab_p));
      const Batch x0_hat = (x - std::sqrt(1.0 - ab_t) * eps_hat) / std::sqrt(ab_t);
      x = std::sqrt(ab_p) * x0_hat + std::sqrt(std::max(0.0, 1.0 - ab_p - sigma * sigma)) * eps_hat +
          sigma * standard_normal(static_cast<int>(x.rows()), static_cast<int>(x.cols()), *rng);
      if (cfg.clip_latents) clamp_unit(x);
    }
    if (hook) hook(x, pair);
  }
  return x;
}

Batch sample_unconditional(const DenoiserMlp& model, const Batch& x_T, const SamplerConfig& cfg,
                           const NoiseSchedule& schedule, const LatentHook& hook) {
  if (model.conditional()) throw InvalidArgument("sample_unconditional: model is conditional");
  return sample_unconditional(step_predictor(model), x_T, cfg, schedule, hook);
}

Batch oracle_backdoor_predictor(const Batch& x_t, StepPair pair, const Batch& y, const Batch& delta,
                                const NoiseSchedule& schedule) {
  validate_pair(schedule, pair);
  const double ab_t = schedule.alpha_bar(pair.t);
  if (!(ab_t < 1.0)) throw InvalidArgument("oracle predictor: alpha_bar_t must be < 1");
  const auto broadcast = [&x_t](const Batch& v) -> Batch {
    if (v.rows() != x_t.rows() || (v.cols() != 1 && v.cols() != x_t.cols())) {
      throw ShapeError("oracle predictor: operand does not match x_t");
    }
    return v.cols() == x_t.cols() ? v : tile(v.col(0), static_cast<int>(x_t.cols()));
  };
  const Batch yy = broadcast(y);
  const Batch dd = broadcast(delta);
  const double s = std::sqrt(ab_t);
  const Batch eps_implied = (x_t - s * yy - (1.0 - s) * dd) / std::sqrt(1.0 - ab_t);
  return eps_implied + zeta_coefficient(schedule, pair) * dd;
}

ConditionalStepPredictor conditional_step_predictor(const DenoiserMlp& model) {
  return [&model](const Batch& x_t, StepPair pair, const Conditioning& cond) {
    return model.predict(x_t, pair.t, &cond);
  };
}

Batch guided_epsilon(const Batch& eps_null, const Batch& eps_text, double gamma) {
  require_same_shape(eps_null, eps_text, "guided_epsilon");
  return (1.0 - gamma) * eps_null + gamma * eps_text;
}

Batch sample_guided(const ConditionalStepPredictor& predictor, const Batch& x_T, const Batch& masked_image,
                    const Batch& mask, const std::vector<TextCondition>& text, const SamplerConfig& cfg,
                    const NoiseSchedule& schedule, const LatentHook& hook) {
  validate_sampler(cfg, schedule);
  if (cfg.eta != 0.0) throw InvalidArgument("sample_guided: only the deterministic sampler is supported");
  if (cfg.kind != SamplerKind::kDdim) throw InvalidArgument("sample_guided: guidance uses the DDIM update");
  Conditioning with_text{masked_image, mask, text};
  Conditioning with_null{masked_image, mask, std::vector<TextCondition>(text.size(), TextCondition::null())};

  Batch x = x_T;
  for (const StepPair pair : ddim_subsequence(schedule.T(), cfg.n_steps)) {
    const Batch eps_null = predictor(x, pair, with_null);
    const Batch eps_text = predictor(x, pair, with_text);
    x = ddim_step(x, guided_epsilon(eps_null, eps_text, cfg.guidance_scale), pair, schedule, cfg.clip_latents);
    if (hook) hook(x, pair);
  }
  return x;
}

Batch sample_guided(const DenoiserMlp& model, const Batch& x_T, const Batch& masked_image, const Batch& mask,
                    const std::vector<TextCondition>& text, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                    const LatentHook& hook) {
  if (!model.conditional()) throw InvalidArgument("sample_guided: model is unconditional");
  return sample_guided(conditional_step_predictor(model), x_T, masked_image, mask, text, cfg, schedule, hook);
}

Batch dpmsolver2_sample(const StepPredictor& predictor, const Batch& x_T, const SamplerConfig& cfg,
                        const NoiseSchedule& schedule, const LatentHook& hook) {
  validate_sampler(cfg, schedule);
  if (cfg.n_steps < 2) throw InvalidArgument("DPM-Solver-2 needs n_steps >= 2");
  const auto alpha = [&](int t) { return std::sqrt(schedule.alpha_bar(t)); };
  const auto sigma = [&](int t) { return std::sqrt(1.0 - schedule.alpha_bar(t)); };
  const auto lambda = [&](int t) { return std::log(alpha(t)) - std::log(sigma(t)); };

  Batch x = x_T;
  Batch eps_prev;
  int t_older = -1;
  for (const StepPair pair : ddim_subsequence(schedule.T(), cfg.n_steps)) {
    const int s = pair.t;
    const int t = pair.t_prev;
    const Batch eps = predictor(x, pair);
    require_same_shape(x, eps, "dpmsolver2_sample");
    // sigma_t * expm1(h) written without lambda(t) so t = 0 stays finite.
    const double phi = alpha(t) * sigma(s) / alpha(s) - sigma(t);
    Batch next = (alpha(t) / alpha(s)) * x - phi * eps;
    if (t_older >= 0 && t > 0) {
      const double h = lambda(t) - lambda(s);
      const double h0 = lambda(s) - lambda(t_older);
      const double r0 = h0 / h;
      next -= 0.5 * phi * (eps - eps_prev) / r0;
    }
    x = std::move(next);
    if (cfg.clip_latents) clamp_unit(x);
    if (hook) hook(x, pair);
    eps_prev = eps;
    t_older = s;
  }
  return x;
}

DifferentiableChain::DifferentiableChain(const DenoiserMlp& model, const Batch& x_T, const SamplerConfig& cfg,
                                         const NoiseSchedule& schedule, const Conditioning* cond)
    : model_(model), clip_(cfg.clip_latents) {
  validate_sampler(cfg, schedule);
  if (cfg.eta != 0.0) throw InvalidArgument("differentiable sampling rejects stochastic steps (eta != 0)");
  if (cfg.kind != SamplerKind::kDdim) throw InvalidArgument("differentiable sampling uses the DDIM update");
  if (cond) cond_ = *cond;
  pairs_ = ddim_subsequence(schedule.T(), cfg.n_steps);
  latents_.reserve(pairs_.size() + 1);
  caches_.resize(pairs_.size());
  latents_.push_back(x_T);
  for (std::size_t i = 0; i < pairs_.size(); ++i) {
    const Batch& x = latents_.back();
    std::vector<int> ts(static_cast<std::size_t>(x.cols()), pairs_[i].t);
    const Batch eps_hat = model_.forward(x, ts, cond_ ? &*cond_ : nullptr, &caches_[i]);
    coeffs_.push_back(ddim_coefficients(schedule, pairs_[i]));
    // Same expression as ddim_step so both paths agree bit for bit.
    latents_.push_back(ddim_step(x, eps_hat, pairs_[i], schedule, false));
    if (clip_) {
      unclipped_.push_back(latents_.back());
      clamp_unit(latents_.back());
    }
  }
}

DifferentiableChain::Gradients DifferentiableChain::backward(const Batch& grad_output) const {
  require_same_shape(grad_output, latents_.back(), "DifferentiableChain::backward");
  Gradients g;
  Batch g_x = grad_output;
  if (cond_) g.cond_image = Batch::Zero(cond_->masked_image.rows(), cond_->masked_image.cols());
  for (std::size_t k = pairs_.size(); k-- > 0;) {
    if (clip_) {
      const Batch& pre = unclipped_[k];
      g_x = (pre.array().abs() < 1.0).select(g_x, 0.0);
    }
    const DenoiserMlp::InputGrads ig = model_.input_gradient(caches_[k], coeffs_[k].noise * g_x);
    if (cond_) g.cond_image += ig.masked_image;
    g_x = coeffs_[k].keep * g_x + ig.x;
  }
  g.x_T = std::move(g_x);
  return g;
}

DifferentiableChain sample_differentiable(const DenoiserMlp& model, const Batch& x_T, const SamplerConfig& cfg,
                                          const NoiseSchedule& schedule, const Conditioning* cond) {
  if (!cfg.differentiable) throw InvalidArgument("sample_differentiable: config must set differentiable = true");
  return DifferentiableChain(model, x_T, cfg, schedule, cond);
}

InnerLoss loss_inner(const DenoiserMlp& model, const Batch& x_T, const Batch& y, const SamplerConfig& cfg,
                     const NoiseSchedule& schedule, InnerObjective objective, const Conditioning* cond) {
  SamplerConfig c = cfg;
  c.differentiable = true;
  DifferentiableChain chain(model, x_T, c, schedule, cond);
  const Batch& out = chain.output();
  const Batch target = y.cols() == out.cols() ? y : tile(y.col(0), static_cast<int>(out.cols()));
  require_same_shape(out, target, "loss_inner");
  InnerLoss r;
  r.output = out;
  const Batch diff = out - target;
  r.mse = diff.squaredNorm() / static_cast<double>(diff.size());
  const double scale = objective == InnerObjective::kMeanSquared ? 2.0 / static_cast<double>(diff.size())
                                                                 : 2.0 / static_cast<double>(diff.cols());
  r.grad = chain.backward(scale * diff);
  return r;
}

}  // namespace ibd
