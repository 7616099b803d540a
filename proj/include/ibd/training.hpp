#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ibd/dataset.hpp"
#include "ibd/eval.hpp"
#include "ibd/mask.hpp"
#include "ibd/model.hpp"
#include "ibd/nn.hpp"
#include "ibd/sampling.hpp"
#include "ibd/schedule.hpp"
#include "ibd/trigger.hpp"

namespace ibd {

enum class TrainMode { kScratch, kFinetune };
enum class InnerOptimizer { kSgd, kAdam };
enum class LrSchedule { kConstant, kCosine };

struct TrainConfig {
  int outer_iterations = 2000;  // K
  int inner_steps = 2;          // D, per pair and outer iteration
  double inner_lr = 1e-3;       // alpha
  double outer_lr = 2e-4;       // beta
  int batch_size = 32;
  double poison_rate = 0.1;     // rho
  int inner_sample_steps = 10;
  int inner_batch = 4;          // chains per inner step
  double null_text_prob = 0.5;  // conditional only
  std::uint64_t seed = 0;
  TrainMode mode = TrainMode::kScratch;
  InnerObjective inner_objective = InnerObjective::kSquaredNorm;
  InnerOptimizer inner_optimizer = InnerOptimizer::kSgd;
  double grad_clip = 1.0;  // global norm for the outer step; <= 0 disables
  double inner_grad_clip = 0.0;  // same, for the trigger step
  LrSchedule outer_lr_schedule = LrSchedule::kConstant;  // cosine decays to 0 at outer_iterations

  bool operator==(const TrainConfig&) const = default;
};

void validate_train_config(const TrainConfig& cfg, const NoiseSchedule& schedule);

/// Outer learning rate used at a given iteration.
double outer_lr_at(const TrainConfig& cfg, std::int64_t iteration);

/// Clean split D_c and poisoned split D_p over one source dataset. Poisoned
/// items are replaced by their pair's target during training.
struct PoisonedDataset {
  Dataset source;
  std::vector<int> clean;     // indices into source
  std::vector<int> poisoned;  // indices into source
  std::vector<int> pair_of;   // per source item: -1 clean, else pair index

  int size() const { return source.size(); }
};

/// |D_p| = round(rho N); poisoned items chosen by a seeded shuffle and assigned
/// to pairs round-robin.
PoisonedDataset assemble_poisoned_dataset(const Dataset& source, double rho, int num_pairs, std::uint64_t seed);

struct StepRecord {
  std::int64_t iteration = 0;
  double outer_loss = 0.0;
  double inner_mse = 0.0;  // mean over pairs and inner steps; 0 without pairs
};

/// Everything needed to resume a run exactly. Randomness is a pure function
/// of (seed, iteration), so no generator state is stored.
struct TrainState {
  std::int64_t iteration = 0;
  nn::Adam outer_opt;
  std::vector<nn::Adam> inner_opts;  // one per trigger parameter block, Adam only
  std::vector<double> loss_trace;
  std::vector<double> inner_trace;
};

/// One bi-level trainer for clean, unconditional and conditional runs.
/// Inner steps touch only trigger parameters; outer steps touch only model
/// parameters.
class Trainer {
 public:
  Trainer(DenoiserMlp& model, std::vector<TriggerTargetPair>& pairs, const PoisonedDataset& data, TrainConfig cfg,
          const NoiseSchedule& schedule, MaskParams masks = {});

  /// Inner loop for every pair (D steps each); returns the mean inner MSE.
  double inner_phase();
  /// One outer model step; returns the outer loss.
  double outer_phase();
  /// inner_phase + outer_phase, bookkeeping included.
  StepRecord step();
  /// Runs until state().iteration == target.
  void run_until(std::int64_t target, const std::function<void(const StepRecord&)>& on_step = {});

  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  int steps_per_epoch() const;
  double epochs() const;
  const TrainConfig& config() const { return cfg_; }

 private:
  std::vector<int> batch_indices(std::int64_t iteration) const;
  double inner_universal(std::size_t pair_index, int d);
  double inner_generator(std::size_t pair_index, int d);
  void apply_inner_update(nn::ParameterSet& params, std::size_t opt_index);

  DenoiserMlp& model_;
  std::vector<TriggerTargetPair>& pairs_;
  const PoisonedDataset& data_;
  TrainConfig cfg_;
  const NoiseSchedule& schedule_;
  MaskParams masks_;
  TrainState state_;
  std::shared_ptr<TriggerGeneratorNet> generator_;
};

struct TrainResult {
  std::vector<double> loss_trace;
  std::vector<double> inner_trace;
  std::int64_t iterations = 0;
  double epochs = 0.0;
};

/// Standard noise-prediction training; conditional models need `masks`.
TrainResult train_clean(DenoiserMlp& model, const Dataset& data, const TrainConfig& cfg, const NoiseSchedule& schedule,
                        const MaskParams& masks = {});

/// Algorithm 1. Every pair must hold a universal or distributional trigger.
TrainResult train_unconditional_backdoor(DenoiserMlp& model, std::vector<TriggerTargetPair>& pairs, const Dataset& data,
                                         const TrainConfig& cfg, const NoiseSchedule& schedule);

/// Algorithm 2. Every pair must hold a generator trigger sharing one network.
TrainResult train_conditional_backdoor(DenoiserMlp& model, std::vector<TriggerTargetPair>& pairs, const Dataset& data,
                                       const TrainConfig& cfg, const NoiseSchedule& schedule, const MaskParams& masks);

/// Throws InvalidArgument unless both schedules are identical.
void check_finetune_schedule(const ScheduleParams& pretrained, const ScheduleParams& configured);

/// Same loop as training from scratch, started from a pretrained model whose
/// schedule must match. Dispatches on the model kind.
TrainResult finetune_pretrained_backdoor(DenoiserMlp& model, const ScheduleParams& pretrained_schedule,
                                         std::vector<TriggerTargetPair>& pairs, const Dataset& data,
                                         const TrainConfig& cfg, const ScheduleParams& schedule_params,
                                         const MaskParams& masks = {});

struct DefenseReport {
  AttackReport before;
  AttackReport after;
  int epochs = 0;
  bool defense_failed = false;  // post-defense MSE still below the success bar
};

/// Clean fine-tuning for `epochs` passes over `clean_data`, with attack MSE
/// measured before and after under identical sampling seeds.
DefenseReport finetune_clean_defense(DenoiserMlp& model, const TriggerTargetPair& pair, const Dataset& clean_data,
                                     int epochs, TrainConfig cfg, const NoiseSchedule& schedule,
                                     const SamplerConfig& sampler, int n_eval, double success_bar);

}  // namespace ibd
