#include "ibd/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>

#include "ibd/diffusion.hpp"
#include "ibd/error.hpp"

namespace ibd {

namespace {

enum StreamKind : std::uint64_t { kPermutation = 1, kOuter = 2, kInner = 3 };

std::uint64_t mix(std::uint64_t h, std::uint64_t v) {
  // splitmix64 finalizer over a running combination
  std::uint64_t z = h ^ (v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t stream(StreamKind kind, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return mix(mix(mix(mix(0x1bd, kind), a), b), c);
}

std::vector<int> uniform_times(int n, int T, Rng& rng) {
  std::uniform_int_distribution<int> pick(1, T);
  std::vector<int> t(static_cast<std::size_t>(n));
  for (int& ti : t) ti = pick(rng);
  return t;
}

bool is_noise_trigger(const Trigger& t) {
  return std::holds_alternative<UniversalTrigger>(t) || std::holds_alternative<DistributionalTrigger>(t);
}

Eigen::VectorXd& noise_delta(Trigger& t) {
  if (auto* u = std::get_if<UniversalTrigger>(&t)) return u->delta;
  return std::get<DistributionalTrigger>(t).delta_mean;
}

}  // namespace

void validate_train_config(const TrainConfig& cfg, const NoiseSchedule& schedule) {
  const auto fail = [](const std::string& field, const std::string& why) {
    throw InvalidArgument("train config: " + field + " " + why);
  };
  if (cfg.outer_iterations < 0) fail("outer_iterations", "must be >= 0");
  if (cfg.inner_steps < 1) fail("inner_steps", "must be >= 1");
  if (!(cfg.inner_lr >= 0.0) || !std::isfinite(cfg.inner_lr)) fail("inner_lr", "must be finite and >= 0");
  if (!(cfg.outer_lr >= 0.0) || !std::isfinite(cfg.outer_lr)) fail("outer_lr", "must be finite and >= 0");
  if (cfg.batch_size < 1) fail("batch_size", "must be >= 1");
  if (!(cfg.poison_rate >= 0.0 && cfg.poison_rate <= 1.0)) fail("poison_rate", "must lie in [0, 1]");
  if (cfg.inner_sample_steps < 1 || cfg.inner_sample_steps > schedule.T()) fail("inner_sample_steps", "must lie in [1, T]");
  if (cfg.inner_batch < 1) fail("inner_batch", "must be >= 1");
  if (!(cfg.null_text_prob >= 0.0 && cfg.null_text_prob <= 1.0)) fail("null_text_prob", "must lie in [0, 1]");
  if (!std::isfinite(cfg.grad_clip)) fail("grad_clip", "must be finite");
  if (!std::isfinite(cfg.inner_grad_clip)) fail("inner_grad_clip", "must be finite");
}

double outer_lr_at(const TrainConfig& cfg, std::int64_t iteration) {
  if (cfg.outer_lr_schedule == LrSchedule::kConstant || cfg.outer_iterations <= 0) return cfg.outer_lr;
  const double progress = std::min(1.0, static_cast<double>(iteration) / cfg.outer_iterations);
  return 0.5 * cfg.outer_lr * (1.0 + std::cos(std::acos(-1.0) * progress));
}

PoisonedDataset assemble_poisoned_dataset(const Dataset& source, double rho, int num_pairs, std::uint64_t seed) {
  if (!(rho >= 0.0 && rho <= 1.0)) throw InvalidArgument("poison rate must lie in [0, 1]");
  if (num_pairs < 0) throw InvalidArgument("negative pair count");
  const int n = source.size();
  const int n_poison = static_cast<int>(std::lround(rho * n));
  if (n_poison > 0 && num_pairs == 0) throw InvalidArgument("poison rate > 0 needs at least one trigger-target pair");
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  Rng rng = make_rng(seed, 0xd9);
  std::shuffle(order.begin(), order.end(), rng);
  PoisonedDataset pd;
  pd.source = source;
  pd.pair_of.assign(static_cast<std::size_t>(n), -1);
  for (int k = 0; k < n_poison; ++k) pd.pair_of[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = k % num_pairs;
  for (int i = 0; i < n; ++i) (pd.pair_of[static_cast<std::size_t>(i)] < 0 ? pd.clean : pd.poisoned).push_back(i);
  return pd;
}

Trainer::Trainer(DenoiserMlp& model, std::vector<TriggerTargetPair>& pairs, const PoisonedDataset& data, TrainConfig cfg,
                 const NoiseSchedule& schedule, MaskParams masks)
    : model_(model), pairs_(pairs), data_(data), cfg_(cfg), schedule_(schedule), masks_(masks) {
  validate_train_config(cfg_, schedule_);
  const Shape s = model_.shape();
  if (!(data_.source.shape == s)) {
    throw ShapeError("dataset shape " + data_.source.shape.str() + " does not match model shape " + s.str());
  }
  if (data_.size() < 1) throw DataError("training needs a non-empty dataset");
  for (int p : data_.pair_of) {
    if (p >= static_cast<int>(pairs_.size())) throw InvalidArgument("poisoned item refers to a missing pair");
  }
  for (const auto& pair : pairs_) {
    if (pair.target.size() != s.size()) throw ShapeError("target of pair '" + pair.id + "' does not match " + s.str());
    if (model_.conditional()) {
      const auto* g = std::get_if<GeneratorTrigger>(&pair.trigger);
      if (!g || !g->net) throw InvalidArgument("conditional backdoor needs generator triggers (pair '" + pair.id + "')");
      if (generator_ && generator_ != g->net) throw InvalidArgument("conditional pairs must share one generator");
      generator_ = g->net;
      if (!(generator_->config().shape == s)) throw ShapeError("generator shape does not match the model");
      if (!(g->bound > 0.0)) throw InvalidArgument("trigger bound must be > 0");
      if (g->bound != std::get<GeneratorTrigger>(pairs_.front().trigger).bound) {
        throw InvalidArgument("conditional pairs must share one bound");
      }
    } else {
      if (!is_noise_trigger(pair.trigger)) {
        throw InvalidArgument("unconditional backdoor needs universal or distributional triggers (pair '" + pair.id + "')");
      }
      if (noise_delta(const_cast<Trigger&>(pair.trigger)).size() != s.size()) {
        throw ShapeError("trigger of pair '" + pair.id + "' does not match " + s.str());
      }
      if (!(trigger_bound(pair.trigger) > 0.0)) throw InvalidArgument("trigger bound must be > 0");
    }
  }
  if (model_.conditional()) {
    if (!data_.source.captioned()) throw DataError("conditional training needs captions");
    validate_mask_params(masks_, s.height, s.width);
    if (!pairs_.empty() && data_.clean.empty()) throw DataError("conditional backdoor needs a non-empty clean split");
  }
  state_.outer_opt = nn::Adam(model_.params(), cfg_.outer_lr);
  if (cfg_.inner_optimizer == InnerOptimizer::kAdam) {
    if (generator_) {
      state_.inner_opts.emplace_back(generator_->params(), cfg_.inner_lr);
    } else {
      for (const auto& pair : pairs_) {
        nn::ParameterSet block;
        block.add("delta", noise_delta(const_cast<Trigger&>(pair.trigger)));
        state_.inner_opts.emplace_back(block, cfg_.inner_lr);
      }
    }
  }
}

int Trainer::steps_per_epoch() const { return (data_.size() + cfg_.batch_size - 1) / cfg_.batch_size; }

double Trainer::epochs() const { return static_cast<double>(state_.iteration) / steps_per_epoch(); }

std::vector<int> Trainer::batch_indices(std::int64_t iteration) const {
  const int spe = steps_per_epoch();
  const auto epoch = static_cast<std::uint64_t>(iteration / spe);
  const int pos = static_cast<int>(iteration % spe);
  std::vector<int> perm(static_cast<std::size_t>(data_.size()));
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = make_rng(cfg_.seed, stream(kPermutation, epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto begin = static_cast<std::size_t>(pos) * static_cast<std::size_t>(cfg_.batch_size);
  const auto end = std::min(perm.size(), begin + static_cast<std::size_t>(cfg_.batch_size));
  return {perm.begin() + static_cast<std::ptrdiff_t>(begin), perm.begin() + static_cast<std::ptrdiff_t>(end)};
}

void Trainer::apply_inner_update(nn::ParameterSet& params, std::size_t opt_index) {
  // Early chains through an untrained model can return gradients of 1e13,
  // which would pin Adam's second moment for thousands of steps.
  const double norm = params.grad_norm();
  if (cfg_.inner_grad_clip > 0.0 && norm > cfg_.inner_grad_clip) params.scale_grad(cfg_.inner_grad_clip / norm);
  if (cfg_.inner_optimizer == InnerOptimizer::kSgd) {
    nn::sgd_step(params, cfg_.inner_lr);
  } else {
    state_.inner_opts.at(opt_index).step(params);
  }
}

double Trainer::inner_universal(std::size_t i, int d) {
  TriggerTargetPair& pair = pairs_[i];
  Rng rng = make_rng(cfg_.seed, stream(kInner, static_cast<std::uint64_t>(state_.iteration), i, static_cast<std::uint64_t>(d)));
  const int dim = model_.shape().size();
  const Batch x_T = triggered_noise(pair.trigger, dim, cfg_.inner_batch, rng);

  SamplerConfig sc;
  sc.n_steps = cfg_.inner_sample_steps;
  sc.differentiable = true;
  const InnerLoss loss = loss_inner(model_, x_T, pair.target, sc, schedule_, cfg_.inner_objective);
  if (!std::isfinite(loss.mse)) throw NumericalError("inner loss became non-finite at iteration " + std::to_string(state_.iteration));

  // x_T = eps + delta (or eps + delta_mean + xi): d x_T / d delta = I per column.
  nn::ParameterSet block;
  Eigen::VectorXd& delta = noise_delta(pair.trigger);
  const int idx = block.add("delta", delta);
  block.grad(idx) = loss.grad.x_T.rowwise().sum();
  apply_inner_update(block, i);
  delta = project_linf(Eigen::VectorXd(block.value(idx).col(0)), trigger_bound(pair.trigger));
  return loss.mse;
}

double Trainer::inner_generator(std::size_t i, int d) {
  const TriggerTargetPair& pair = pairs_[i];
  const double bound = std::get<GeneratorTrigger>(pair.trigger).bound;
  Rng rng = make_rng(cfg_.seed, stream(kInner, static_cast<std::uint64_t>(state_.iteration), i, static_cast<std::uint64_t>(d)));
  const Shape s = model_.shape();
  const int n = cfg_.inner_batch;
  std::uniform_int_distribution<std::size_t> pick(0, data_.clean.size() - 1);
  std::bernoulli_distribution use_null(cfg_.null_text_prob);
  Batch images(s.size(), n);
  std::vector<TextCondition> texts;
  for (int j = 0; j < n; ++j) {
    const int item = data_.clean[pick(rng)];
    images.col(j) = data_.source.images.col(item);
    texts.push_back(use_null(rng) ? TextCondition::null() : data_.source.captions[static_cast<std::size_t>(item)]);
  }
  const Batch masks = draw_mask_batch(masks_, s.height, s.width, n, rng);
  const Batch masked = images.cwiseProduct(expand_mask(masks, s.channels));
  const Batch targets = tile(pair.target, n);

  ConditionalTriggerCache cache;
  const Batch trig = generate_conditional_trigger(*generator_, masked, masks, targets, bound, &cache);
  const Conditioning cond{masked + trig, masks, texts};
  const Batch x_T = standard_normal(s.size(), n, rng);

  SamplerConfig sc;
  sc.n_steps = cfg_.inner_sample_steps;
  sc.differentiable = true;
  const InnerLoss loss = loss_inner(model_, x_T, pair.target, sc, schedule_, cfg_.inner_objective, &cond);
  if (!std::isfinite(loss.mse)) throw NumericalError("inner loss became non-finite at iteration " + std::to_string(state_.iteration));

  generator_->params().zero_grad();
  generate_conditional_trigger_backward(*generator_, cache, loss.grad.cond_image, bound);
  apply_inner_update(generator_->params(), 0);
  return loss.mse;
}

double Trainer::inner_phase() {
  if (pairs_.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < pairs_.size(); ++i) {
    for (int d = 0; d < cfg_.inner_steps; ++d) total += generator_ ? inner_generator(i, d) : inner_universal(i, d);
  }
  return total / static_cast<double>(pairs_.size() * static_cast<std::size_t>(cfg_.inner_steps));
}

double Trainer::outer_phase() {
  const std::vector<int> idx = batch_indices(state_.iteration);
  const int n = static_cast<int>(idx.size());
  const Shape s = model_.shape();
  const int dim = s.size();
  Rng rng = make_rng(cfg_.seed, stream(kOuter, static_cast<std::uint64_t>(state_.iteration)));

  Batch input;
  Batch target;
  std::optional<Conditioning> cond;
  std::vector<int> t;
  if (!model_.conditional()) {
    t = uniform_times(n, schedule_.T(), rng);
    const Batch eps = standard_normal(dim, n, rng);
    input.resize(dim, n);
    target = eps;
    for (int j = 0; j < n; ++j) {
      const int item = idx[static_cast<std::size_t>(j)];
      const int p = data_.pair_of[static_cast<std::size_t>(item)];
      const std::span<const int> tj(&t[static_cast<std::size_t>(j)], 1);
      RegressionTarget r;
      if (p < 0) {
        r = clean_target(data_.source.images.col(item), tj, eps.col(j), schedule_);
      } else {
        const TriggerTargetPair& pair = pairs_[static_cast<std::size_t>(p)];
        Eigen::VectorXd delta;
        if (const auto* u = std::get_if<UniversalTrigger>(&pair.trigger)) {
          delta = u->delta;
        } else {
          delta = sample_distribution_trigger(std::get<DistributionalTrigger>(pair.trigger), rng, 1).col(0);
        }
        r = backdoor_target(pair.target, delta, tj, eps.col(j), schedule_);
      }
      input.col(j) = r.input;
      target.col(j) = r.target;
    }
  } else {
    std::bernoulli_distribution use_null(cfg_.null_text_prob);
    ConditionalItems items;
    items.image.resize(dim, n);
    items.trigger = Batch::Zero(dim, n);
    items.y = Batch::Zero(dim, n);
    items.mask = draw_mask_batch(masks_, s.height, s.width, n, rng);
    std::vector<Origin> origin;
    std::vector<int> poisoned_cols;
    for (int j = 0; j < n; ++j) {
      const int item = idx[static_cast<std::size_t>(j)];
      const int p = data_.pair_of[static_cast<std::size_t>(item)];
      items.text.push_back(use_null(rng) ? TextCondition::null() : data_.source.captions[static_cast<std::size_t>(item)]);
      if (p < 0) {
        origin.push_back(Origin::kClean);
        items.image.col(j) = data_.source.images.col(item);
      } else {
        origin.push_back(Origin::kPoisoned);
        const int donor = data_.clean[std::uniform_int_distribution<std::size_t>(0, data_.clean.size() - 1)(rng)];
        items.image.col(j) = data_.source.images.col(donor);
        items.y.col(j) = pairs_[static_cast<std::size_t>(p)].target;
        poisoned_cols.push_back(j);
      }
    }
    if (!poisoned_cols.empty()) {
      const auto k = static_cast<Eigen::Index>(poisoned_cols.size());
      Batch donors(dim, k), pmasks(s.pixels(), k), ys(dim, k);
      for (Eigen::Index c = 0; c < k; ++c) {
        const int j = poisoned_cols[static_cast<std::size_t>(c)];
        pmasks.col(c) = items.mask.col(j);
        donors.col(c) = items.image.col(j);
        ys.col(c) = items.y.col(j);
      }
      const Batch masked = donors.cwiseProduct(expand_mask(pmasks, s.channels));
      const double bound = std::get<GeneratorTrigger>(pairs_.front().trigger).bound;
      const Batch trig = generate_conditional_trigger(*generator_, masked, pmasks, ys, bound);
      for (Eigen::Index c = 0; c < k; ++c) items.trigger.col(poisoned_cols[static_cast<std::size_t>(c)]) = trig.col(c);
    }
    t = uniform_times(n, schedule_.T(), rng);
    const Batch eps = standard_normal(dim, n, rng);
    ConditionalTarget ct = conditional_target(items, origin, t, eps, schedule_, s.channels);
    input = std::move(ct.input);
    target = std::move(ct.target);
    cond = std::move(ct.cond);
  }

  DenoiserMlp::Cache cache;
  const Batch pred = model_.forward(input, t, cond ? &*cond : nullptr, &cache);
  const LossAndGrad loss = mse_with_grad(pred, target);
  if (!std::isfinite(loss.value)) {
    throw NumericalError("outer loss became non-finite at iteration " + std::to_string(state_.iteration));
  }
  nn::ParameterSet& params = model_.params();
  params.zero_grad();
  model_.backward(cache, loss.grad, true, false);
  const double norm = params.grad_norm();
  if (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) params.scale_grad(cfg_.grad_clip / norm);
  state_.outer_opt.set_lr(outer_lr_at(cfg_, state_.iteration));
  state_.outer_opt.step(params);
  return loss.value;
}

StepRecord Trainer::step() {
  StepRecord r;
  r.iteration = state_.iteration;
  r.inner_mse = inner_phase();
  r.outer_loss = outer_phase();
  state_.loss_trace.push_back(r.outer_loss);
  state_.inner_trace.push_back(r.inner_mse);
  ++state_.iteration;
  return r;
}

void Trainer::run_until(std::int64_t target, const std::function<void(const StepRecord&)>& on_step) {
  while (state_.iteration < target) {
    const StepRecord r = step();
    if (on_step) on_step(r);
  }
}

namespace {

TrainResult run_trainer(DenoiserMlp& model, std::vector<TriggerTargetPair>& pairs, const Dataset& data,
                        const TrainConfig& cfg, const NoiseSchedule& schedule, const MaskParams& masks) {
  validate_train_config(cfg, schedule);
  const PoisonedDataset pd =
      assemble_poisoned_dataset(data, pairs.empty() ? 0.0 : cfg.poison_rate, static_cast<int>(pairs.size()), cfg.seed);
  Trainer trainer(model, pairs, pd, cfg, schedule, masks);
  trainer.run_until(cfg.outer_iterations);
  return {trainer.state().loss_trace, trainer.state().inner_trace, trainer.state().iteration, trainer.epochs()};
}

}  // namespace

TrainResult train_clean(DenoiserMlp& model, const Dataset& data, const TrainConfig& cfg, const NoiseSchedule& schedule,
                        const MaskParams& masks) {
  std::vector<TriggerTargetPair> none;
  return run_trainer(model, none, data, cfg, schedule, masks);
}

TrainResult train_unconditional_backdoor(DenoiserMlp& model, std::vector<TriggerTargetPair>& pairs, const Dataset& data,
                                         const TrainConfig& cfg, const NoiseSchedule& schedule) {
  if (model.conditional()) throw InvalidArgument("train_unconditional_backdoor: model is conditional");
  if (pairs.empty()) throw InvalidArgument("train_unconditional_backdoor: no trigger-target pairs");
  return run_trainer(model, pairs, data, cfg, schedule, {});
}

TrainResult train_conditional_backdoor(DenoiserMlp& model, std::vector<TriggerTargetPair>& pairs, const Dataset& data,
                                       const TrainConfig& cfg, const NoiseSchedule& schedule, const MaskParams& masks) {
  if (!model.conditional()) throw InvalidArgument("train_conditional_backdoor: model is unconditional");
  if (pairs.empty()) throw InvalidArgument("train_conditional_backdoor: no trigger-target pairs");
  return run_trainer(model, pairs, data, cfg, schedule, masks);
}

void check_finetune_schedule(const ScheduleParams& pretrained, const ScheduleParams& configured) {
  if (pretrained.T != configured.T || pretrained.beta_start != configured.beta_start ||
      pretrained.beta_end != configured.beta_end) {
    throw InvalidArgument("fine-tune: checkpoint schedule does not match the configured schedule");
  }
}

TrainResult finetune_pretrained_backdoor(DenoiserMlp& model, const ScheduleParams& pretrained_schedule,
                                         std::vector<TriggerTargetPair>& pairs, const Dataset& data,
                                         const TrainConfig& cfg, const ScheduleParams& schedule_params,
                                         const MaskParams& masks) {
  check_finetune_schedule(pretrained_schedule, schedule_params);
  if (cfg.mode != TrainMode::kFinetune) throw InvalidArgument("fine-tune: train config mode must be finetune");
  const NoiseSchedule schedule = build_linear_schedule(schedule_params);
  if (model.conditional()) return train_conditional_backdoor(model, pairs, data, cfg, schedule, masks);
  return train_unconditional_backdoor(model, pairs, data, cfg, schedule);
}

DefenseReport finetune_clean_defense(DenoiserMlp& model, const TriggerTargetPair& pair, const Dataset& clean_data,
                                     int epochs, TrainConfig cfg, const NoiseSchedule& schedule,
                                     const SamplerConfig& sampler, int n_eval, double success_bar) {
  if (epochs < 0) throw InvalidArgument("defense: epochs must be >= 0");
  DefenseReport r;
  r.epochs = epochs;
  const std::uint64_t eval_seed = cfg.seed ^ 0xde7e45eULL;
  r.before = evaluate_attack(model, pair, sampler, schedule, n_eval, eval_seed);
  if (epochs > 0) {
    const int spe = (clean_data.size() + cfg.batch_size - 1) / cfg.batch_size;
    cfg.outer_iterations = epochs * spe;
    cfg.poison_rate = 0.0;
    train_clean(model, clean_data, cfg, schedule);
  }
  r.after = evaluate_attack(model, pair, sampler, schedule, n_eval, eval_seed);
  r.defense_failed = r.after.attack_mse < success_bar;
  return r;
}

}  // namespace ibd
