#include "ibd/eval.hpp"

#include <cmath>
#include <memory>

#include "ibd/error.hpp"

namespace ibd {

double mse_to_target(const Batch& samples, const Eigen::VectorXd& y) {
  if (samples.cols() == 0) throw InvalidArgument("mse_to_target: empty batch");
  if (samples.rows() != y.size()) throw ShapeError("mse_to_target: target does not match samples");
  return (samples.colwise() - y).squaredNorm() / static_cast<double>(samples.size());
}

Batch triggered_noise(const Trigger& trigger, int dim, int n, Rng& rng) {
  const Batch eps = standard_normal(dim, n, rng);
  if (const auto* u = std::get_if<UniversalTrigger>(&trigger)) {
    if (u->delta.size() != dim) throw ShapeError("triggered_noise: trigger does not match image size");
    return insert_noise_trigger(eps, u->delta);
  }
  if (const auto* d = std::get_if<DistributionalTrigger>(&trigger)) {
    if (d->delta_mean.size() != dim) throw ShapeError("triggered_noise: trigger does not match image size");
    return insert_noise_trigger(eps, sample_distribution_trigger(*d, rng, n));
  }
  throw InvalidArgument("triggered_noise: generator triggers act on the masked image, not on noise");
}

AttackReport evaluate_attack(const DenoiserMlp& model, const TriggerTargetPair& pair, const SamplerConfig& cfg,
                             const NoiseSchedule& schedule, int n_samples, std::uint64_t seed, Batch* samples) {
  if (n_samples < 1) throw InvalidArgument("evaluate_attack: n_samples must be >= 1");
  Rng rng = make_rng(seed, 0xa77);
  const Batch x_T = triggered_noise(pair.trigger, model.shape().size(), n_samples, rng);
  const Batch out = sample_unconditional(model, x_T, cfg, schedule);
  if (samples) *samples = out;
  return {mse_to_target(out, pair.target), n_samples, cfg.kind, cfg.clip_latents};
}

Batch sample_clean(const DenoiserMlp& model, const SamplerConfig& cfg, const NoiseSchedule& schedule, int n,
                   std::uint64_t seed) {
  Rng rng = make_rng(seed, 0xc1e);
  const Batch x_T = standard_normal(model.shape().size(), n, rng);
  if (cfg.eta == 0.0) return sample_unconditional(model, x_T, cfg, schedule);
  return sample_unconditional(step_predictor(model), x_T, cfg, schedule, {}, &rng);
}

ClipDefenseReport eval_clip_defense(const DenoiserMlp& model, const TriggerTargetPair& pair, SamplerConfig cfg,
                                    const NoiseSchedule& schedule, int n_samples, std::uint64_t seed) {
  ClipDefenseReport r;
  cfg.clip_latents = false;
  r.unclipped = evaluate_attack(model, pair, cfg, schedule, n_samples, seed);
  cfg.clip_latents = true;
  r.clipped = evaluate_attack(model, pair, cfg, schedule, n_samples, seed);
  return r;
}

FeatureExtractor::FeatureExtractor(Shape shape, std::uint64_t seed) : shape_(shape), seed_(seed) {
  if (shape.height < 4 || shape.width < 4) throw InvalidArgument("feature extractor needs images of at least 4x4");
  Rng rng = make_rng(seed, 0xfe);
  conv1_ = nn::Conv2d::create(params_, "feat.conv1", shape.channels, 16, 3, 2, 1, rng, std::sqrt(2.0));
  conv2_ = nn::Conv2d::create(params_, "feat.conv2", 16, 32, 3, 2, 1, rng, std::sqrt(2.0));
}

std::string FeatureExtractor::id() const {
  return "randconv2-" + shape_.str() + "-seed" + std::to_string(seed_);
}

Batch FeatureExtractor::features(const Batch& images) const {
  if (images.rows() != shape_.size()) throw ShapeError("feature extractor: images do not match " + shape_.str());
  const int h1 = conv1_.out_size(shape_.height);
  const int w1 = conv1_.out_size(shape_.width);
  const Batch a1 = conv1_.forward(params_, images, shape_.height, shape_.width, nullptr).cwiseMax(0.0);
  const Batch a2 = conv2_.forward(params_, a1, h1, w1, nullptr).cwiseMax(0.0);
  const int positions = conv2_.out_size(h1) * conv2_.out_size(w1);
  Batch f(32, images.cols());
  for (int c = 0; c < 32; ++c) {
    f.row(c) = a2.middleRows(static_cast<Eigen::Index>(c) * positions, positions).colwise().mean();
  }
  return f;
}

namespace {

void mean_cov(const Batch& f, Eigen::VectorXd& mu, Eigen::MatrixXd& cov) {
  mu = f.rowwise().mean();
  const Batch centered = f.colwise() - mu;
  cov = centered * centered.transpose() / static_cast<double>(f.cols() - 1);
}

}  // namespace

double frechet_distance(const Batch& a, const Batch& b) {
  if (a.rows() != b.rows()) throw ShapeError("frechet_distance: feature dimensions differ");
  if (a.cols() <= a.rows() || b.cols() <= b.rows()) {
    throw InvalidArgument("frechet_distance: each set needs more samples than feature dimensions (" +
                          std::to_string(a.rows()) + ")");
  }
  Eigen::VectorXd mu_a, mu_b;
  Eigen::MatrixXd cov_a, cov_b;
  mean_cov(a, mu_a, cov_a);
  mean_cov(b, mu_b, cov_b);
  // Tr (S_a S_b)^{1/2} = Tr (S_a^{1/2} S_b S_a^{1/2})^{1/2}, a symmetric PSD product.
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ea(cov_a);
  const Eigen::MatrixXd root_a =
      ea.eigenvectors() * ea.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * ea.eigenvectors().transpose();
  Eigen::MatrixXd m = root_a * cov_b * root_a;
  m = 0.5 * (m + m.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> em(m, Eigen::EigenvaluesOnly);
  const Eigen::VectorXd lambda = em.eigenvalues();
  const double scale = std::max(1.0, lambda.cwiseAbs().maxCoeff());
  if (lambda.minCoeff() < -1e-8 * scale) {
    throw NumericalError("frechet_distance: covariance product has a significantly negative eigenvalue");
  }
  const double trace_root = lambda.cwiseMax(0.0).cwiseSqrt().sum();
  const double d = (mu_a - mu_b).squaredNorm() + cov_a.trace() + cov_b.trace() - 2.0 * trace_root;
  return std::max(0.0, d);
}

double frechet_feature_distance(const Batch& set_a, const Batch& set_b, const FeatureExtractor& extractor) {
  return frechet_distance(extractor.features(set_a), extractor.features(set_b));
}

UtilityReport evaluate_utility(const DenoiserMlp& model, const Batch& reference, const FeatureExtractor& extractor,
                               const SamplerConfig& cfg, const NoiseSchedule& schedule, int n_samples,
                               std::uint64_t seed) {
  const Batch samples = sample_clean(model, cfg, schedule, n_samples, seed);
  return {frechet_feature_distance(samples, reference, extractor), extractor.id(), n_samples};
}

WatermarkVerdict watermark_verify(const WatermarkQuery& query, const TriggerSource& trigger, const WatermarkProbe& probe,
                                  const Eigen::VectorXd& y, int n_queries, double threshold, Rng& rng) {
  if (n_queries < 1) throw InvalidArgument("watermark_verify: n_queries must be >= 1");
  if (probe.images.cols() == 0 || probe.texts.empty()) throw InvalidArgument("watermark_verify: empty probe set");
  if (probe.images.rows() != probe.shape.size() || y.size() != probe.shape.size()) {
    throw ShapeError("watermark_verify: probe images, shape and target disagree");
  }
  WatermarkVerdict v;
  v.threshold = threshold;
  std::vector<double> mses;
  const int max_attempts = 2 * n_queries;
  for (int attempt = 0; attempt < max_attempts && static_cast<int>(mses.size()) < n_queries; ++attempt) {
    const Eigen::VectorXd image = probe.images.col(attempt % probe.images.cols());
    const BinaryMask mask = draw_training_mask(probe.masks, probe.shape.height, probe.shape.width, rng);
    const TextCondition& text = probe.texts[static_cast<std::size_t>(attempt) % probe.texts.size()];
    const Eigen::VectorXd masked = image.cwiseProduct(expand_mask(mask.values, probe.shape.channels).col(0));
    try {
      const Eigen::VectorXd out = query(trigger(masked, mask), mask, text);
      if (out.size() != y.size() || !out.allFinite()) {
        ++v.failed_queries;
        continue;
      }
      mses.push_back((out - y).squaredNorm() / static_cast<double>(y.size()));
    } catch (const std::exception&) {
      ++v.failed_queries;
    }
  }
  if (static_cast<int>(mses.size()) < n_queries) {
    throw Error("watermark", "only " + std::to_string(mses.size()) + " of " + std::to_string(n_queries) +
                                 " queries succeeded (" + std::to_string(v.failed_queries) + " failures)");
  }
  v.n_queries = n_queries;
  const Eigen::Map<const Eigen::VectorXd> m(mses.data(), static_cast<Eigen::Index>(mses.size()));
  v.mse_mean = m.mean();
  v.mse_variance = n_queries > 1 ? (m.array() - v.mse_mean).square().sum() / (n_queries - 1) : 0.0;
  v.is_derived = v.mse_mean < threshold;
  return v;
}

WatermarkQuery model_query(const DenoiserMlp& model, const SamplerConfig& cfg, const NoiseSchedule& schedule,
                           std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(make_rng(seed, 0x9e7));
  return [&model, cfg, &schedule, rng](const Eigen::VectorXd& input, const BinaryMask& mask,
                                       const TextCondition& text) -> Eigen::VectorXd {
    const Batch x_T = standard_normal(model.shape().size(), 1, *rng);
    const Batch out = sample_guided(model, x_T, input, mask.values, {text}, cfg, schedule);
    return out.col(0);
  };
}

TriggerSource generator_source(const TriggerGeneratorNet& net, const Eigen::VectorXd& y, double bound) {
  return [&net, y, bound](const Eigen::VectorXd& masked, const BinaryMask& mask) -> Eigen::VectorXd {
    const Batch trig = generate_conditional_trigger(net, masked, mask.values, y, bound);
    return masked + trig.col(0);
  };
}

ConditionalAttackReport evaluate_conditional_attack(const DenoiserMlp& model, const TriggerSource& trigger,
                                                    const WatermarkProbe& probe, const Eigen::VectorXd& y,
                                                    const SamplerConfig& cfg, const NoiseSchedule& schedule,
                                                    int samples_per_text, std::uint64_t seed, Batch* inputs_out,
                                                    Batch* outputs_out) {
  if (samples_per_text < 1) throw InvalidArgument("evaluate_conditional_attack: samples_per_text must be >= 1");
  if (probe.images.cols() == 0 || probe.texts.empty()) throw InvalidArgument("evaluate_conditional_attack: empty probe");
  const Shape s = probe.shape;
  Rng rng = make_rng(seed, 0xca7);
  ConditionalAttackReport r;
  double total = 0.0;
  const auto total_cols = static_cast<Eigen::Index>(samples_per_text) * static_cast<Eigen::Index>(probe.texts.size());
  if (inputs_out) inputs_out->resize(s.size(), total_cols);
  if (outputs_out) outputs_out->resize(s.size(), total_cols);
  for (std::size_t ti = 0; ti < probe.texts.size(); ++ti) {
    const int n = samples_per_text;
    Batch masks(s.pixels(), n);
    Batch inputs(s.size(), n);
    for (int j = 0; j < n; ++j) {
      const BinaryMask m = draw_training_mask(probe.masks, s.height, s.width, rng);
      const Eigen::VectorXd image = probe.images.col((static_cast<Eigen::Index>(ti) * n + j) % probe.images.cols());
      const Eigen::VectorXd masked = image.cwiseProduct(expand_mask(m.values, s.channels).col(0));
      masks.col(j) = m.values;
      inputs.col(j) = trigger ? trigger(masked, m) : masked;
    }
    const Batch x_T = standard_normal(s.size(), n, rng);
    const std::vector<TextCondition> texts(static_cast<std::size_t>(n), probe.texts[ti]);
    const Batch out = sample_guided(model, x_T, inputs, masks, texts, cfg, schedule);
    const auto first = static_cast<Eigen::Index>(ti) * n;
    if (inputs_out) inputs_out->middleCols(first, n) = inputs;
    if (outputs_out) outputs_out->middleCols(first, n) = out;
    const double mse = mse_to_target(out, y);
    r.mse_per_text.push_back(mse);
    total += mse;
  }
  r.mean_mse = total / static_cast<double>(probe.texts.size());
  r.n_samples = samples_per_text * static_cast<int>(probe.texts.size());
  return r;
}

}  // namespace ibd
