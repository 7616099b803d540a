#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ibd/grid.hpp"
#include "ibd/mask.hpp"
#include "ibd/model.hpp"
#include "ibd/nn.hpp"
#include "ibd/sampling.hpp"
#include "ibd/schedule.hpp"
#include "ibd/trigger.hpp"

namespace ibd {

/// Mean over samples and elements of (sample - y)^2.
double mse_to_target(const Batch& samples, const Eigen::VectorXd& y);

struct AttackReport {
  double attack_mse = 0.0;
  int n_samples = 0;
  SamplerKind sampler = SamplerKind::kDdim;
  bool clip = false;
};

/// Initial noise for a noise-space trigger: eps + delta (universal) or
/// eps + delta' with delta' ~ N(delta, I) (distributional).
Batch triggered_noise(const Trigger& trigger, int dim, int n, Rng& rng);

/// Samples n triggered chains and reports MSE to the pair's target.
AttackReport evaluate_attack(const DenoiserMlp& model, const TriggerTargetPair& pair, const SamplerConfig& cfg,
                             const NoiseSchedule& schedule, int n_samples, std::uint64_t seed,
                             Batch* samples = nullptr);

/// Clean samples from N(0, I).
Batch sample_clean(const DenoiserMlp& model, const SamplerConfig& cfg, const NoiseSchedule& schedule, int n,
                   std::uint64_t seed);

struct ClipDefenseReport {
  AttackReport unclipped;
  AttackReport clipped;
};

/// Both arms see identical initial noise.
ClipDefenseReport eval_clip_defense(const DenoiserMlp& model, const TriggerTargetPair& pair, SamplerConfig cfg,
                                    const NoiseSchedule& schedule, int n_samples, std::uint64_t seed);

/// Frozen random conv feature map: conv(C->16, stride 2), relu,
/// conv(16->32, stride 2), relu, global mean pool. Weights depend only on the
/// seed and the image shape.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(Shape shape, std::uint64_t seed = 0xfea7);

  Batch features(const Batch& images) const;
  int dim() const { return 32; }
  std::string id() const;
  const nn::ParameterSet& params() const { return params_; }

 private:
  Shape shape_;
  std::uint64_t seed_;
  nn::ParameterSet params_;
  nn::Conv2d conv1_, conv2_;
};

/// ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}) over feature columns.
/// Needs more samples than feature dimensions in each set.
double frechet_distance(const Batch& features_a, const Batch& features_b);
double frechet_feature_distance(const Batch& set_a, const Batch& set_b, const FeatureExtractor& extractor);

struct UtilityReport {
  double frechet_distance = 0.0;
  std::string extractor_id;
  int n_samples = 0;
};

UtilityReport evaluate_utility(const DenoiserMlp& model, const Batch& reference, const FeatureExtractor& extractor,
                               const SamplerConfig& cfg, const NoiseSchedule& schedule, int n_samples,
                               std::uint64_t seed);

// Watermark verification treats the model as a black box.

/// Inpaints one (triggered) masked image under a mask and text.
using WatermarkQuery =
    std::function<Eigen::VectorXd(const Eigen::VectorXd& masked_input, const BinaryMask& mask, const TextCondition&)>;
/// Returns the triggered masked image for a clean masked image.
using TriggerSource = std::function<Eigen::VectorXd(const Eigen::VectorXd& masked_image, const BinaryMask& mask)>;

struct WatermarkVerdict {
  double mse_mean = 0.0;
  double mse_variance = 0.0;
  int n_queries = 0;
  int failed_queries = 0;
  double threshold = 0.1;
  bool is_derived = false;
};

struct WatermarkProbe {
  Batch images;  // held-out clean images, cycled
  Shape shape;
  MaskParams masks;
  std::vector<TextCondition> texts;  // cycled over queries
};

/// Issues queries until n_queries succeed (at most 2 n_queries attempts).
/// Throws Error("watermark") when too few queries succeed.
WatermarkVerdict watermark_verify(const WatermarkQuery& query, const TriggerSource& trigger, const WatermarkProbe& probe,
                                  const Eigen::VectorXd& y, int n_queries, double threshold, Rng& rng);

/// Query backed by guided sampling from fresh N(0, I) noise.
WatermarkQuery model_query(const DenoiserMlp& model, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                           std::uint64_t seed);
/// masked + generate_conditional_trigger(net, masked, mask, y, C).
TriggerSource generator_source(const TriggerGeneratorNet& net, const Eigen::VectorXd& y, double bound);

/// Per-text MSE to y of guided inpainting with triggered masked inputs (or
/// plain masked inputs when `trigger` is empty). `inputs` and `outputs`, when
/// given, receive every query in text order.
struct ConditionalAttackReport {
  std::vector<double> mse_per_text;
  double mean_mse = 0.0;
  int n_samples = 0;
};
ConditionalAttackReport evaluate_conditional_attack(const DenoiserMlp& model, const TriggerSource& trigger,
                                                    const WatermarkProbe& probe, const Eigen::VectorXd& y,
                                                    const SamplerConfig& cfg, const NoiseSchedule& schedule,
                                                    int samples_per_text, std::uint64_t seed, Batch* inputs = nullptr,
                                                    Batch* outputs = nullptr);

// Derivation checks.

struct CheckResult {
  std::string name;
  bool passed = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

struct VerifyReport {
  std::vector<CheckResult> checks;
  bool all_passed() const;
};

struct VerifyOptions {
  std::vector<ScheduleParams> schedules{ScheduleParams{}};
  int random_small_schedules = 5;  // extra T in [2, 10] schedules for the composition check
  double zeta_scale = 1.0;         // != 1 corrupts zeta (sensitivity canary)
  std::uint64_t seed = 0;
};

VerifyReport verify_derivations(const VerifyOptions& options);

/// Composes the backdoored reverse transitions from the shifted q(x'_T | x'_0)
/// down to t = 0 and returns the largest norm-relative deviation of the mean
/// and covariance from the closed-form marginal over all t. sigma_fraction[t-1]
/// in [0, 1) sets sigma_t^2 = fraction * (1 - ab_{t-1}).
double lemma_composition_error(const NoiseSchedule& schedule, const Eigen::VectorXd& x0, const Eigen::VectorXd& delta,
                               const std::vector<double>& sigma_fraction);

/// Max-abs error of DDIM with the oracle predictor (zeta scaled by zeta_scale)
/// started from x_T = delta + eps.
double oracle_reconstruction_error(const NoiseSchedule& schedule, int n_steps, const Batch& y, const Batch& delta,
                                   const Batch& eps, double zeta_scale = 1.0);

}  // namespace ibd
