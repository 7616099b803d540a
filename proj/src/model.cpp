#include "ibd/model.hpp"

#include <cmath>

#include "ibd/error.hpp"
#include "ibd/grid.hpp"

namespace ibd {

DenoiserMlp::DenoiserMlp(DenoiserConfig config, std::uint64_t seed) : config_(config) {
  if (config_.shape.size() <= 0 || config_.hidden <= 0 || config_.blocks < 0 || config_.time_features < 2 ||
      config_.time_features % 2 != 0) {
    throw InvalidArgument("denoiser: invalid architecture");
  }
  if (config_.conditional && config_.vocab_size < 1) {
    throw InvalidArgument("denoiser: conditional model needs a vocabulary (at least the null token)");
  }
  Rng rng = make_rng(seed, 0xde0);
  const int d = config_.shape.size();
  const int in_rows = config_.conditional ? 2 * d + config_.shape.pixels() : d;
  const int h = config_.hidden;
  in_ = nn::Linear::create(params_, "in", in_rows, h, rng);
  time_ = nn::Linear::create(params_, "time", config_.time_features, h, rng);
  if (config_.conditional) {
    text_embedding_ = params_.add("text_embedding", standard_normal(h, config_.vocab_size, rng) * 0.1);
  }
  for (int b = 0; b < config_.blocks; ++b) {
    const std::string name = "block" + std::to_string(b);
    Block blk;
    blk.fc1 = nn::Linear::create(params_, name + ".fc1", h, h, rng);
    blk.embed_proj = nn::Linear::create(params_, name + ".embed", h, h, rng, 0.5);
    blk.fc2 = nn::Linear::create(params_, name + ".fc2", h, h, rng, 0.3);
    blocks_.push_back(blk);
  }
  out_ = nn::Linear::create(params_, "out", h, d, rng, 0.1);
  // eps_hat = out(...) + s(t) x_t; s starts at 1, the high-noise limit.
  // Conditional skip coefficients are read from the last hidden state, so a
  // recognised trigger can switch off the copy of the known pixels.
  skip_ = config_.conditional ? nn::Linear::create(params_, "skip", h, 3, rng)
                              : nn::Linear::create(params_, "skip", config_.time_features, 1, rng);
  params_[skip_.weight].value.setZero();
  params_[skip_.bias].value.setZero();
  params_[skip_.bias].value(0, 0) = 1.0;
  // The conditioning also gets its own encoder into the block embedding, away
  // from x_t, whose noise otherwise swamps a small trigger at high t.
  if (config_.conditional) cond_ = nn::Linear::create(params_, "cond", d + config_.shape.pixels(), h, rng);
}

Batch DenoiserMlp::sinusoidal(std::span<const int> t) const {
  const int half = config_.time_features / 2;
  Batch f(config_.time_features, static_cast<Eigen::Index>(t.size()));
  for (std::size_t j = 0; j < t.size(); ++j) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(-std::log(1000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double arg = static_cast<double>(t[j]) * freq;
      f(k, static_cast<Eigen::Index>(j)) = std::sin(arg);
      f(half + k, static_cast<Eigen::Index>(j)) = std::cos(arg);
    }
  }
  return f;
}

Batch DenoiserMlp::forward(const Batch& x_t, std::span<const int> t, const Conditioning* cond, Cache* cache) const {
  const int d = config_.shape.size();
  const auto n = x_t.cols();
  if (x_t.rows() != d) throw ShapeError("denoiser: x_t has " + std::to_string(x_t.rows()) + " rows, expected " + std::to_string(d));
  if (static_cast<Eigen::Index>(t.size()) != n) throw ShapeError("denoiser: one timestep per column required");
  if (config_.conditional != (cond != nullptr)) {
    throw InvalidArgument(config_.conditional ? "denoiser: conditional model called without conditioning"
                                              : "denoiser: unconditional model given conditioning");
  }

  Cache local;
  Cache& c = cache ? *cache : local;
  if (config_.conditional) {
    if (cond->masked_image.rows() != d || cond->masked_image.cols() != n || cond->mask.rows() != config_.shape.pixels() ||
        cond->mask.cols() != n || static_cast<Eigen::Index>(cond->text.size()) != n) {
      throw ShapeError("denoiser: conditioning does not match batch");
    }
    c.input.resize(2 * d + config_.shape.pixels(), n);
    c.input << x_t, cond->masked_image, cond->mask;
    c.mask_full = expand_mask(cond->mask, config_.shape.channels);
  } else {
    c.input = x_t;
  }

  c.time_features = sinusoidal(t);
  c.time_pre = time_.forward(params_, c.time_features);
  c.embed = nn::silu(c.time_pre);
  c.tokens.clear();
  if (config_.conditional) {
    const Eigen::MatrixXd& table = params_.value(text_embedding_);
    for (Eigen::Index j = 0; j < n; ++j) {
      const auto& toks = cond->text[static_cast<std::size_t>(j)].tokens;
      if (toks.empty()) throw InvalidArgument("denoiser: empty token sequence (use the null token)");
      for (int tok : toks) {
        if (tok < 0 || tok >= config_.vocab_size) throw InvalidArgument("denoiser: token out of vocabulary");
        c.embed.col(j) += table.col(tok) / static_cast<double>(toks.size());
      }
      c.tokens.push_back(toks);
    }
    c.cond_pre = cond_.forward(params_, c.input.bottomRows(d + config_.shape.pixels()));
    c.embed += nn::silu(c.cond_pre);
  }

  c.z.assign(1, in_.forward(params_, c.input) + c.embed);
  c.pre1.clear();
  for (const Block& blk : blocks_) {
    const Batch& z = c.z.back();
    Batch pre = blk.fc1.forward(params_, nn::silu(z)) + params_.value(blk.embed_proj.weight) * c.embed;
    pre.colwise() += params_.value(blk.embed_proj.bias).col(0);
    Batch next = z + blk.fc2.forward(params_, nn::silu(pre));
    c.pre1.push_back(std::move(pre));
    c.z.push_back(std::move(next));
  }
  const Batch s_last = nn::silu(c.z.back());
  c.skip = skip_.forward(params_, config_.conditional ? s_last : c.time_features);
  Batch out = out_.forward(params_, s_last);
  out += x_t * c.skip.row(0).asDiagonal();
  if (config_.conditional) {
    out += cond->masked_image * c.skip.row(1).asDiagonal();
    out += x_t.cwiseProduct(c.mask_full) * c.skip.row(2).asDiagonal();
  }
  return out;
}

Batch DenoiserMlp::predict(const Batch& x_t, int t, const Conditioning* cond) const {
  std::vector<int> ts(static_cast<std::size_t>(x_t.cols()), t);
  return forward(x_t, ts, cond, nullptr);
}

DenoiserMlp::InputGrads DenoiserMlp::backward(const Cache& cache, const Batch& grad_out, bool param_grads,
                                              bool input_grads) {
  return backward_impl(cache, grad_out, param_grads ? &params_ : nullptr, input_grads);
}

DenoiserMlp::InputGrads DenoiserMlp::input_gradient(const Cache& cache, const Batch& grad_out) const {
  return backward_impl(cache, grad_out, nullptr, true);
}

DenoiserMlp::InputGrads DenoiserMlp::backward_impl(const Cache& c, const Batch& grad_out, nn::ParameterSet* g,
                                                   bool input_grads) const {
  const auto W = [this](const nn::Linear& l) -> const Eigen::MatrixXd& { return params_.value(l.weight); };
  const auto accumulate = [g](const nn::Linear& l, const Batch& x, const Batch& gy) {
    g->grad(l.weight).noalias() += gy * x.transpose();
    g->grad(l.bias).col(0) += gy.rowwise().sum();
  };

  const int d = config_.shape.size();
  const bool need_embed_grad = g != nullptr || (input_grads && config_.conditional);
  const Batch s_last = nn::silu(c.z.back());
  Batch g_skip(c.skip.rows(), c.skip.cols());
  g_skip.row(0) = c.input.topRows(d).cwiseProduct(grad_out).colwise().sum();
  if (config_.conditional) {
    g_skip.row(1) = c.input.middleRows(d, d).cwiseProduct(grad_out).colwise().sum();
    g_skip.row(2) = c.input.topRows(d).cwiseProduct(c.mask_full).cwiseProduct(grad_out).colwise().sum();
  }
  if (g) accumulate(skip_, config_.conditional ? s_last : c.time_features, g_skip);
  if (g) accumulate(out_, s_last, grad_out);
  Batch g_s = W(out_).transpose() * grad_out;
  if (config_.conditional) g_s.noalias() += W(skip_).transpose() * g_skip;
  Batch g_z = g_s.cwiseProduct(nn::silu_grad(c.z.back()));
  Batch g_embed;
  if (need_embed_grad) g_embed = Batch::Zero(c.embed.rows(), c.embed.cols());

  for (int b = static_cast<int>(blocks_.size()) - 1; b >= 0; --b) {
    const Block& blk = blocks_[static_cast<std::size_t>(b)];
    const Batch& z = c.z[static_cast<std::size_t>(b)];
    const Batch& pre = c.pre1[static_cast<std::size_t>(b)];
    if (g) accumulate(blk.fc2, nn::silu(pre), g_z);
    const Batch g_pre = (W(blk.fc2).transpose() * g_z).cwiseProduct(nn::silu_grad(pre));
    if (g) {
      accumulate(blk.fc1, nn::silu(z), g_pre);
      accumulate(blk.embed_proj, c.embed, g_pre);
    }
    if (need_embed_grad) g_embed.noalias() += W(blk.embed_proj).transpose() * g_pre;
    g_z += (W(blk.fc1).transpose() * g_pre).cwiseProduct(nn::silu_grad(z));
  }

  InputGrads result;
  if (need_embed_grad) g_embed += g_z;
  Batch g_cond_pre;
  if (config_.conditional && need_embed_grad) g_cond_pre = g_embed.cwiseProduct(nn::silu_grad(c.cond_pre));
  if (g) {
    accumulate(in_, c.input, g_z);
    if (config_.conditional) {
      accumulate(cond_, c.input.bottomRows(d + config_.shape.pixels()), g_cond_pre);
      Eigen::MatrixXd& table_grad = g->grad(text_embedding_);
      for (std::size_t j = 0; j < c.tokens.size(); ++j) {
        for (int tok : c.tokens[j]) {
          table_grad.col(tok) += g_embed.col(static_cast<Eigen::Index>(j)) / static_cast<double>(c.tokens[j].size());
        }
      }
    }
    const Batch g_time_pre = g_embed.cwiseProduct(nn::silu_grad(c.time_pre));
    accumulate(time_, c.time_features, g_time_pre);
  }
  if (input_grads) {
    const Batch g_in = W(in_).transpose() * g_z;
    result.x = g_in.topRows(d) + grad_out * c.skip.row(0).asDiagonal();
    if (config_.conditional) {
      result.x += grad_out.cwiseProduct(c.mask_full) * c.skip.row(2).asDiagonal();
      result.masked_image = g_in.middleRows(d, d) + grad_out * c.skip.row(1).asDiagonal() +
                            (W(cond_).transpose() * g_cond_pre).topRows(d);
    }
  }
  return result;
}

EpsilonFn as_epsilon_fn(const DenoiserMlp& model, const Conditioning* cond) {
  return [&model, cond](const Batch& x_t, std::span<const int> t) { return model.forward(x_t, t, cond, nullptr); };
}

}  // namespace ibd
