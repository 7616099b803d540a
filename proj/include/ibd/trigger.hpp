#pragma once

// Trigger parameterizations, the insertion function A(eps, delta) = delta + eps,
// l-infinity projection and the mask-constrained conditional generator.

#include <iosfwd>
#include <memory>
#include <string>
#include <variant>
#include <vector>

#include "ibd/grid.hpp"
#include "ibd/nn.hpp"

namespace ibd {

/// Fixed perturbation added to every initial noise draw.
struct UniversalTrigger {
  Eigen::VectorXd delta;
  double bound = 0.0;
};

/// Mean of the trigger law: each use draws delta' = delta_mean + xi, xi ~ N(0, I).
struct DistributionalTrigger {
  Eigen::VectorXd delta_mean;
  double bound = 0.0;
};

struct GeneratorConfig {
  Shape shape{16, 16, 3};
  int width = 16;  // feature channels of the first stage; the bottleneck uses 2x
};

/// Small conv encoder-decoder: (masked image, mask, target) -> perturbation.
/// The head is bound * tanh(raw), so outputs already lie strictly inside the
/// l-infinity ball; masking and projection are applied by
/// generate_conditional_trigger.
class TriggerGeneratorNet {
 public:
  struct Cache {
    Batch input;
    Eigen::MatrixXd cols1, cols2, cols3, cols4, cols5;
    Batch pre1, pre2, pre3, pre4;
    Batch tanh_out;
  };

  TriggerGeneratorNet(GeneratorConfig config, double bound, std::uint64_t seed);

  const GeneratorConfig& config() const { return config_; }
  double bound() const { return bound_; }
  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  /// masked_image and target are (C*H*W) x N, mask is (H*W) x N.
  Batch forward(const Batch& masked_image, const Batch& mask, const Batch& target, Cache* cache = nullptr) const;
  /// Accumulates parameter gradients for dL/d(forward output).
  void backward(const Cache& cache, const Batch& grad_out);

 private:
  GeneratorConfig config_;
  double bound_;
  nn::ParameterSet params_;
  nn::Conv2d conv1_, conv2_, conv3_, conv4_, conv5_;
};

/// Shared generator plus the bound it is evaluated under.
struct GeneratorTrigger {
  std::shared_ptr<TriggerGeneratorNet> net;
  double bound = 0.0;
};

using Trigger = std::variant<UniversalTrigger, DistributionalTrigger, GeneratorTrigger>;

std::string trigger_kind(const Trigger& trigger);
double trigger_bound(const Trigger& trigger);

/// One trigger-target pair. Several pairs may live in one model.
struct TriggerTargetPair {
  std::string id;
  Trigger trigger;
  Eigen::VectorXd target;  // y, flattened CHW in [-1, 1]
};

/// A(eps, delta) = delta + eps. delta may be one column (broadcast) or a batch.
Batch insert_noise_trigger(const Batch& eps, const Batch& delta);

/// n draws of delta' = delta_mean + N(0, I), one per column.
Batch sample_distribution_trigger(const DistributionalTrigger& trigger, Rng& rng, int n = 1);

/// Elementwise clamp to [-C, C]. Throws InvalidArgument for C <= 0.
Batch project_linf(const Batch& grid, double bound);
Eigen::VectorXd project_linf(const Eigen::VectorXd& grid, double bound);

struct ConditionalTriggerCache {
  TriggerGeneratorNet::Cache net;
  Batch mask_full;
  Batch masked;  // net output times mask, before projection
};

/// project_linf(net(masked_image, mask, target) * mask, C). Zero wherever the
/// mask is 0. Throws InvalidArgument on a non-binary mask.
Batch generate_conditional_trigger(const TriggerGeneratorNet& net, const Batch& masked_image, const Batch& mask,
                                   const Batch& target, double bound, ConditionalTriggerCache* cache = nullptr);
/// Back-propagates dL/d(trigger) into the generator's parameter gradients.
void generate_conditional_trigger_backward(TriggerGeneratorNet& net, const ConditionalTriggerCache& cache,
                                           const Batch& grad_trigger, double bound);

/// Generator triggers serialize only their bound; the shared network is
/// written once with write_generator and handed back to read_trigger.
void write_trigger(std::ostream& out, const Trigger& trigger);
Trigger read_trigger(std::istream& in, const std::shared_ptr<TriggerGeneratorNet>& shared_net);

void write_generator(std::ostream& out, const TriggerGeneratorNet& net);
std::shared_ptr<TriggerGeneratorNet> read_generator(std::istream& in);

}  // namespace ibd
