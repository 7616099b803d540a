#pragma once

// Minimal dense/convolutional building blocks with hand-written backward
// passes. Activations are batches with one sample per column.

#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "ibd/error.hpp"
#include "ibd/grid.hpp"

namespace ibd::nn {

struct Parameter {
  std::string name;
  Eigen::MatrixXd value;
  Eigen::MatrixXd grad;
};

class ParameterSet {
 public:
  int add(std::string name, Eigen::MatrixXd init);

  Parameter& operator[](int i) { return params_.at(static_cast<std::size_t>(i)); }
  const Parameter& operator[](int i) const { return params_.at(static_cast<std::size_t>(i)); }
  const Eigen::MatrixXd& value(int i) const { return (*this)[i].value; }
  Eigen::MatrixXd& grad(int i) { return (*this)[i].grad; }

  int size() const { return static_cast<int>(params_.size()); }
  std::int64_t scalar_count() const;
  void zero_grad();
  double grad_norm() const;
  void scale_grad(double factor);
  std::uint64_t checksum() const;

  /// Copies values from another set with identical names and shapes.
  void assign_values(const ParameterSet& other);

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

Eigen::MatrixXd lecun_normal(int rows, int cols, Rng& rng, double gain = 1.0);

inline Eigen::MatrixXd silu(const Eigen::MatrixXd& a) {
  return (a.array() / (1.0 + (-a.array()).exp())).matrix();
}
/// d silu(a) / da, elementwise.
Eigen::MatrixXd silu_grad(const Eigen::MatrixXd& a);

/// Dense affine map y = W x + b with W stored as (out x in) and b as (out x 1).
struct Linear {
  int weight = -1;
  int bias = -1;

  static Linear create(ParameterSet& params, const std::string& name, int in, int out, Rng& rng,
                       double gain = 1.0);
  Batch forward(const ParameterSet& params, const Batch& x) const;
  /// Accumulates parameter grads (if requested) and returns dL/dx (if requested).
  Batch backward(ParameterSet& params, const Batch& x, const Batch& grad_y, bool param_grads,
                 bool input_grad) const;
};

/// 2-D convolution over CHW-flattened columns with zero padding.
struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int weight = -1;  // (out_channels) x (in_channels * kernel * kernel)
  int bias = -1;

  static Conv2d create(ParameterSet& params, const std::string& name, int in_channels, int out_channels,
                       int kernel, int stride, int pad, Rng& rng, double gain = 1.0);
  int out_size(int in) const { return (in + 2 * pad - kernel) / stride + 1; }

  /// `cols` receives the unfolded input (needed by backward); may be null.
  Batch forward(const ParameterSet& params, const Batch& x, int height, int width, Eigen::MatrixXd* cols) const;
  Batch backward(ParameterSet& params, const Eigen::MatrixXd& cols, const Batch& grad_y, int height, int width,
                 bool param_grads, bool input_grad) const;
};

/// Nearest-neighbour 2x upsampling of CHW columns.
Batch upsample2x(const Batch& x, int channels, int height, int width);
Batch upsample2x_backward(const Batch& grad_y, int channels, int height, int width);

/// Adaptive moment optimizer.
class Adam {
 public:
  Adam() = default;
  Adam(const ParameterSet& params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  void step(ParameterSet& params);
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  std::int64_t steps() const { return t_; }

  void save(std::ostream& out) const;
  void load(std::istream& in);

 private:
  double lr_ = 1e-3;
  double beta1_ = 0.9;
  double beta2_ = 0.999;
  double eps_ = 1e-8;
  std::int64_t t_ = 0;
  std::vector<Eigen::MatrixXd> m_;
  std::vector<Eigen::MatrixXd> v_;
};

void sgd_step(ParameterSet& params, double lr);

// Binary helpers shared by checkpointing.
template <typename T>
void write_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
/// Throws IntegrityError on a short read.
template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IntegrityError("unexpected end of stream");
  return v;
}
void write_matrix(std::ostream& out, const Eigen::MatrixXd& m);
Eigen::MatrixXd read_matrix(std::istream& in);
void write_string(std::ostream& out, const std::string& s);
std::string read_string(std::istream& in);
void write_parameters(std::ostream& out, const ParameterSet& params);
/// Reads values into an existing set; names and shapes must match.
void read_parameters(std::istream& in, ParameterSet& params);

}  // namespace ibd::nn
