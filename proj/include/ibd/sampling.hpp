#pragma once

// Deterministic DDIM, second-order multistep DPM-Solver, classifier-free
// guidance, inference-time clipping, and the differentiable unrolled chain
// used by the inner (trigger) optimization.

#include <functional>
#include <optional>

#include "ibd/grid.hpp"
#include "ibd/model.hpp"
#include "ibd/schedule.hpp"

namespace ibd {

enum class SamplerKind { kDdim, kDpmSolver2 };

struct SamplerConfig {
  SamplerKind kind = SamplerKind::kDdim;
  int n_steps = 10;
  double eta = 0.0;             // sigma_t scale; 0 for every backdoor path
  double guidance_scale = 1.0;  // gamma
  bool clip_latents = false;    // inference-time clipping defense
  bool differentiable = false;

  bool operator==(const SamplerConfig&) const = default;
};

/// x_prev = keep * x_t + noise * eps_hat for the deterministic update.
struct DdimCoefficients {
  double keep = 0.0;
  double noise = 0.0;
};
DdimCoefficients ddim_coefficients(const NoiseSchedule& schedule, StepPair pair);

/// x_prev = sqrt(ab_prev) (x_t - sqrt(1 - ab_t) eps_hat) / sqrt(ab_t) + sqrt(1 - ab_prev) eps_hat,
/// clamped to [-1, 1] when `clip` is set.
Batch ddim_step(const Batch& x_t, const Batch& eps_hat, StepPair pair, const NoiseSchedule& schedule,
                bool clip = false);

/// Noise prediction for a whole step (every column shares the pair).
using StepPredictor = std::function<Batch(const Batch& x_t, StepPair pair)>;
/// Called with every latent produced by an update (not with x_T).
using LatentHook = std::function<void(const Batch& latent, StepPair pair)>;

StepPredictor step_predictor(const DenoiserMlp& model, const Conditioning* cond = nullptr);

/// Runs the configured sampler over ddim_subsequence(T, n_steps). With
/// eta > 0 (clean-model comparison only) `rng` supplies the fresh noise.
Batch sample_unconditional(const StepPredictor& predictor, const Batch& x_T, const SamplerConfig& cfg,
                           const NoiseSchedule& schedule, const LatentHook& hook = {}, Rng* rng = nullptr);
Batch sample_unconditional(const DenoiserMlp& model, const Batch& x_T, const SamplerConfig& cfg,
                           const NoiseSchedule& schedule, const LatentHook& hook = {});

/// The ideal backdoored prediction eps_implied + zeta(pair) delta, where
/// eps_implied = (x_t - sqrt(ab_t) y - (1 - sqrt(ab_t)) delta) / sqrt(1 - ab_t).
/// y and delta may be single columns (broadcast) or full batches.
Batch oracle_backdoor_predictor(const Batch& x_t, StepPair pair, const Batch& y, const Batch& delta,
                                const NoiseSchedule& schedule);

/// Conditional predictor used by guided sampling.
using ConditionalStepPredictor = std::function<Batch(const Batch& x_t, StepPair pair, const Conditioning& cond)>;
ConditionalStepPredictor conditional_step_predictor(const DenoiserMlp& model);

/// Classifier-free guidance: eps_hat = (1 - gamma) eps(null) + gamma eps(text).
Batch guided_epsilon(const Batch& eps_null, const Batch& eps_text, double gamma);

Batch sample_guided(const ConditionalStepPredictor& predictor, const Batch& x_T, const Batch& masked_image,
                    const Batch& mask, const std::vector<TextCondition>& text, const SamplerConfig& cfg,
                    const NoiseSchedule& schedule, const LatentHook& hook = {});
Batch sample_guided(const DenoiserMlp& model, const Batch& x_T, const Batch& masked_image, const Batch& mask,
                    const std::vector<TextCondition>& text, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                    const LatentHook& hook = {});

/// Second-order multistep DPM-Solver on the subsequence grid (noise
/// prediction form, first-order first and final steps).
Batch dpmsolver2_sample(const StepPredictor& predictor, const Batch& x_T, const SamplerConfig& cfg,
                        const NoiseSchedule& schedule, const LatentHook& hook = {});

/// Unrolled deterministic DDIM chain that keeps every intermediate so the
/// output can be differentiated with respect to x_T and, for conditional
/// models, the conditioning image. Model parameters never receive gradient.
class DifferentiableChain {
 public:
  DifferentiableChain(const DenoiserMlp& model, const Batch& x_T, const SamplerConfig& cfg,
                      const NoiseSchedule& schedule, const Conditioning* cond = nullptr);

  const Batch& output() const { return latents_.back(); }

  struct Gradients {
    Batch x_T;
    Batch cond_image;  // empty for unconditional chains
  };
  Gradients backward(const Batch& grad_output) const;

 private:
  const DenoiserMlp& model_;
  std::optional<Conditioning> cond_;
  std::vector<StepPair> pairs_;
  std::vector<DdimCoefficients> coeffs_;
  std::vector<Batch> latents_;  // x_T, then one entry per step
  std::vector<Batch> unclipped_;
  std::vector<DenoiserMlp::Cache> caches_;
  bool clip_ = false;
};

DifferentiableChain sample_differentiable(const DenoiserMlp& model, const Batch& x_T, const SamplerConfig& cfg,
                                          const NoiseSchedule& schedule, const Conditioning* cond = nullptr);

/// How the inner objective is reduced. kMeanSquared is the per-element mean;
/// kSquaredNorm is the squared norm per sample, averaged over the batch.
enum class InnerObjective { kMeanSquared, kSquaredNorm };

struct InnerLoss {
  double mse = 0.0;  // mean over elements, always reported
  Batch output;
  DifferentiableChain::Gradients grad;  // gradient of the chosen objective
};

/// || S(eps_theta, x_T) - y ||^2 for an unconditional chain, gradient w.r.t. x_T.
InnerLoss loss_inner(const DenoiserMlp& model, const Batch& x_T, const Batch& y, const SamplerConfig& cfg,
                     const NoiseSchedule& schedule, InnerObjective objective = InnerObjective::kMeanSquared,
                     const Conditioning* cond = nullptr);

void validate_sampler(const SamplerConfig& cfg, const NoiseSchedule& schedule);

}  // namespace ibd
