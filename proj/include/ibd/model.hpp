#pragma once

#include <functional>
#include <span>
#include <vector>

#include "ibd/grid.hpp"
#include "ibd/nn.hpp"

namespace ibd {

/// Token sequence over a small fixed vocabulary. Token 0 is the null token and
/// the sequence {0} stands for the empty prompt.
struct TextCondition {
  std::vector<int> tokens{0};

  static TextCondition null() { return TextCondition{}; }
  bool is_null() const { return tokens.size() == 1 && tokens[0] == 0; }
  bool operator==(const TextCondition&) const = default;
};

/// Per-sample conditioning for the inpainting model.
struct Conditioning {
  Batch masked_image;  // (C*H*W) x N, already multiplied by the mask
  Batch mask;          // (H*W) x N, binary
  std::vector<TextCondition> text;

  Eigen::Index size() const { return masked_image.cols(); }
};

struct DenoiserConfig {
  Shape shape{16, 16, 3};
  int hidden = 384;
  int blocks = 2;
  int time_features = 64;
  bool conditional = false;
  int vocab_size = 0;  // conditional only; includes the null token

  bool operator==(const DenoiserConfig&) const = default;
};

/// Noise-prediction network eps_theta. A residual MLP over the flattened grid
/// plus a learned per-timestep skip s(t) x_t; in the conditional variant the masked image and mask are concatenated to
/// x_t as extra channels, and a learned text embedding is added to the
/// timestep embedding. The conditional skip also carries b masked_image and
/// c (mask * x_t), so visible pixels are denoised without the MLP; its three
/// coefficients come from the last hidden state rather than t alone. A
/// separate encoder of (masked_image, mask) feeds the block embedding.
class DenoiserMlp {
 public:
  struct Cache {
    Batch input;
    Batch time_features;
    Batch time_pre;
    Batch embed;
    std::vector<Batch> z;     // residual stream, blocks + 1 entries
    std::vector<Batch> pre1;  // first pre-activation inside each block
    std::vector<std::vector<int>> tokens;
    Batch skip;  // 1 x N, or 3 x N when conditional
    Batch mask_full;
    Batch cond_pre;
  };

  DenoiserMlp(DenoiserConfig config, std::uint64_t seed);

  const DenoiserConfig& config() const { return config_; }
  Shape shape() const { return config_.shape; }
  bool conditional() const { return config_.conditional; }

  nn::ParameterSet& params() { return params_; }
  const nn::ParameterSet& params() const { return params_; }

  /// Predicts noise for each column of x_t at its timestep. `cond` must be
  /// given iff the model is conditional. `cache` (optional) retains the
  /// activations needed by backward().
  Batch forward(const Batch& x_t, std::span<const int> t, const Conditioning* cond = nullptr,
                Cache* cache = nullptr) const;
  Batch predict(const Batch& x_t, std::span<const int> t, const Conditioning* cond = nullptr) const {
    return forward(x_t, t, cond, nullptr);
  }
  Batch predict(const Batch& x_t, int t, const Conditioning* cond = nullptr) const;

  struct InputGrads {
    Batch x;             // dL/dx_t
    Batch masked_image;  // dL/d masked_image (conditional only)
  };

  /// Back-propagates grad_out. Parameter gradients are accumulated into
  /// params().grad only when `param_grads` is set; the model is otherwise
  /// left untouched.
  InputGrads backward(const Cache& cache, const Batch& grad_out, bool param_grads, bool input_grads);

  /// Input gradients only; never touches parameter gradients.
  InputGrads input_gradient(const Cache& cache, const Batch& grad_out) const;

 private:
  InputGrads backward_impl(const Cache& cache, const Batch& grad_out, nn::ParameterSet* grads_into,
                           bool input_grads) const;
  Batch sinusoidal(std::span<const int> t) const;

  DenoiserConfig config_;
  nn::ParameterSet params_;
  nn::Linear in_;
  nn::Linear time_;
  int text_embedding_ = -1;
  struct Block {
    nn::Linear fc1;
    nn::Linear embed_proj;
    nn::Linear fc2;
  };
  std::vector<Block> blocks_;
  nn::Linear out_;
  nn::Linear skip_;
  nn::Linear cond_;
};

/// Time-indexed noise predictor over unconditional inputs; used by losses and
/// by test doubles that stand in for a trained network.
using EpsilonFn = std::function<Batch(const Batch& x_t, std::span<const int> t)>;

EpsilonFn as_epsilon_fn(const DenoiserMlp& model, const Conditioning* cond = nullptr);

}  // namespace ibd
