#include "ibd/nn.hpp"

#include <cmath>
#include <cstring>
#include <istream>
#include <ostream>

#include "ibd/error.hpp"

namespace ibd::nn {

int ParameterSet::add(std::string name, Eigen::MatrixXd init) {
  Parameter p;
  p.name = std::move(name);
  p.grad = Eigen::MatrixXd::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

std::int64_t ParameterSet::scalar_count() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : params_) p.grad.setZero();
}

double ParameterSet::grad_norm() const {
  double s = 0.0;
  for (const auto& p : params_) s += p.grad.squaredNorm();
  return std::sqrt(s);
}

void ParameterSet::scale_grad(double factor) {
  for (auto& p : params_) p.grad *= factor;
}

std::uint64_t ParameterSet::checksum() const {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& p : params_) h = ibd::checksum(p.value, h);
  return h;
}

void ParameterSet::assign_values(const ParameterSet& other) {
  if (other.size() != size()) throw ShapeError("assign_values: parameter count mismatch");
  for (int i = 0; i < size(); ++i) {
    if (other[i].name != (*this)[i].name || other[i].value.rows() != (*this)[i].value.rows() ||
        other[i].value.cols() != (*this)[i].value.cols()) {
      throw ShapeError("assign_values: parameter '" + (*this)[i].name + "' mismatch");
    }
    (*this)[i].value = other[i].value;
  }
}

Eigen::MatrixXd lecun_normal(int rows, int cols, Rng& rng, double gain) {
  return standard_normal(rows, cols, rng) * (gain / std::sqrt(static_cast<double>(cols)));
}

Eigen::MatrixXd silu_grad(const Eigen::MatrixXd& a) {
  const Eigen::ArrayXXd s = 1.0 / (1.0 + (-a.array()).exp());
  return (s * (1.0 + a.array() * (1.0 - s))).matrix();
}

Linear Linear::create(ParameterSet& params, const std::string& name, int in, int out, Rng& rng, double gain) {
  Linear l;
  l.weight = params.add(name + ".weight", lecun_normal(out, in, rng, gain));
  l.bias = params.add(name + ".bias", Eigen::MatrixXd::Zero(out, 1));
  return l;
}

Batch Linear::forward(const ParameterSet& params, const Batch& x) const {
  Batch y = params.value(weight) * x;
  y.colwise() += params.value(bias).col(0);
  return y;
}

Batch Linear::backward(ParameterSet& params, const Batch& x, const Batch& grad_y, bool param_grads,
                       bool input_grad) const {
  if (param_grads) {
    params.grad(weight).noalias() += grad_y * x.transpose();
    params.grad(bias).col(0) += grad_y.rowwise().sum();
  }
  if (!input_grad) return {};
  return params.value(weight).transpose() * grad_y;
}

Conv2d Conv2d::create(ParameterSet& params, const std::string& name, int in_channels, int out_channels,
                      int kernel, int stride, int pad, Rng& rng, double gain) {
  Conv2d c;
  c.in_channels = in_channels;
  c.out_channels = out_channels;
  c.kernel = kernel;
  c.stride = stride;
  c.pad = pad;
  c.weight = params.add(name + ".weight", lecun_normal(out_channels, in_channels * kernel * kernel, rng, gain));
  c.bias = params.add(name + ".bias", Eigen::MatrixXd::Zero(out_channels, 1));
  return c;
}

namespace {

// Unfolds one CHW sample into (Cin*k*k) x (Ho*Wo).
void im2col(const double* x, const Conv2d& c, int height, int width, Eigen::Ref<Eigen::MatrixXd> cols) {
  const int ho = c.out_size(height);
  const int wo = c.out_size(width);
  for (int ci = 0; ci < c.in_channels; ++ci) {
    for (int ky = 0; ky < c.kernel; ++ky) {
      for (int kx = 0; kx < c.kernel; ++kx) {
        const int row = (ci * c.kernel + ky) * c.kernel + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * c.stride - c.pad + ky;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * c.stride - c.pad + kx;
            const bool inside = iy >= 0 && iy < height && ix >= 0 && ix < width;
            cols(row, oy * wo + ox) = inside ? x[(ci * height + iy) * width + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im(const Eigen::Ref<const Eigen::MatrixXd>& cols, const Conv2d& c, int height, int width, double* x) {
  const int ho = c.out_size(height);
  const int wo = c.out_size(width);
  for (int ci = 0; ci < c.in_channels; ++ci) {
    for (int ky = 0; ky < c.kernel; ++ky) {
      for (int kx = 0; kx < c.kernel; ++kx) {
        const int row = (ci * c.kernel + ky) * c.kernel + kx;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * c.stride - c.pad + ky;
          if (iy < 0 || iy >= height) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * c.stride - c.pad + kx;
            if (ix < 0 || ix >= width) continue;
            x[(ci * height + iy) * width + ix] += cols(row, oy * wo + ox);
          }
        }
      }
    }
  }
}

}  // namespace

Batch Conv2d::forward(const ParameterSet& params, const Batch& x, int height, int width,
                      Eigen::MatrixXd* cols) const {
  if (x.rows() != static_cast<Eigen::Index>(in_channels) * height * width) {
    throw ShapeError("conv2d: input rows do not match channels x height x width");
  }
  const int ho = out_size(height);
  const int wo = out_size(width);
  const int positions = ho * wo;
  const int k = in_channels * kernel * kernel;
  const auto n = x.cols();
  Eigen::MatrixXd unfolded(k, positions * n);
  for (Eigen::Index j = 0; j < n; ++j) {
    im2col(x.col(j).data(), *this, height, width, unfolded.middleCols(j * positions, positions));
  }
  const Eigen::MatrixXd y_all = params.value(weight) * unfolded;  // Cout x (P*N)
  Batch y(static_cast<Eigen::Index>(out_channels) * positions, n);
  const Eigen::VectorXd& b = params.value(bias).col(0);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (int co = 0; co < out_channels; ++co) {
      y.col(j).segment(co * positions, positions) =
          y_all.row(co).segment(j * positions, positions).transpose().array() + b[co];
    }
  }
  if (cols) *cols = std::move(unfolded);
  return y;
}

Batch Conv2d::backward(ParameterSet& params, const Eigen::MatrixXd& cols, const Batch& grad_y, int height,
                       int width, bool param_grads, bool input_grad) const {
  const int ho = out_size(height);
  const int wo = out_size(width);
  const int positions = ho * wo;
  const auto n = grad_y.cols();
  Eigen::MatrixXd g_all(out_channels, positions * n);
  for (Eigen::Index j = 0; j < n; ++j) {
    for (int co = 0; co < out_channels; ++co) {
      g_all.row(co).segment(j * positions, positions) = grad_y.col(j).segment(co * positions, positions).transpose();
    }
  }
  if (param_grads) {
    params.grad(weight).noalias() += g_all * cols.transpose();
    params.grad(bias).col(0) += g_all.rowwise().sum();
  }
  if (!input_grad) return {};
  const Eigen::MatrixXd g_cols = params.value(weight).transpose() * g_all;
  Batch gx = Batch::Zero(static_cast<Eigen::Index>(in_channels) * height * width, n);
  for (Eigen::Index j = 0; j < n; ++j) {
    col2im(g_cols.middleCols(j * positions, positions), *this, height, width, gx.col(j).data());
  }
  return gx;
}

Batch upsample2x(const Batch& x, int channels, int height, int width) {
  Batch y(static_cast<Eigen::Index>(channels) * height * width * 4, x.cols());
  const int w2 = width * 2;
  const int h2 = height * 2;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    for (int c = 0; c < channels; ++c) {
      for (int yy = 0; yy < h2; ++yy) {
        for (int xx = 0; xx < w2; ++xx) {
          y((c * h2 + yy) * w2 + xx, j) = x((c * height + yy / 2) * width + xx / 2, j);
        }
      }
    }
  }
  return y;
}

Batch upsample2x_backward(const Batch& grad_y, int channels, int height, int width) {
  Batch g = Batch::Zero(static_cast<Eigen::Index>(channels) * height * width, grad_y.cols());
  const int w2 = width * 2;
  const int h2 = height * 2;
  for (Eigen::Index j = 0; j < grad_y.cols(); ++j) {
    for (int c = 0; c < channels; ++c) {
      for (int yy = 0; yy < h2; ++yy) {
        for (int xx = 0; xx < w2; ++xx) {
          g((c * height + yy / 2) * width + xx / 2, j) += grad_y((c * h2 + yy) * w2 + xx, j);
        }
      }
    }
  }
  return g;
}

Adam::Adam(const ParameterSet& params, double lr, double beta1, double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params) {
    m_.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Eigen::MatrixXd::Zero(p.value.rows(), p.value.cols()));
  }
}

void Adam::step(ParameterSet& params) {
  if (static_cast<int>(m_.size()) != params.size()) throw ShapeError("adam: optimizer/parameter mismatch");
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (int i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * p.grad;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * p.grad.cwiseProduct(p.grad);
    p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

void sgd_step(ParameterSet& params, double lr) {
  for (auto& p : params) p.value -= lr * p.grad;
}

void Adam::save(std::ostream& out) const {
  write_pod(out, lr_);
  write_pod(out, beta1_);
  write_pod(out, beta2_);
  write_pod(out, eps_);
  write_pod(out, t_);
  write_pod(out, static_cast<std::uint64_t>(m_.size()));
  for (std::size_t i = 0; i < m_.size(); ++i) {
    write_matrix(out, m_[i]);
    write_matrix(out, v_[i]);
  }
}

void Adam::load(std::istream& in) {
  lr_ = read_pod<double>(in);
  beta1_ = read_pod<double>(in);
  beta2_ = read_pod<double>(in);
  eps_ = read_pod<double>(in);
  t_ = read_pod<std::int64_t>(in);
  const auto n = read_pod<std::uint64_t>(in);
  m_.clear();
  v_.clear();
  for (std::uint64_t i = 0; i < n; ++i) {
    m_.push_back(read_matrix(in));
    v_.push_back(read_matrix(in));
  }
}

void write_matrix(std::ostream& out, const Eigen::MatrixXd& m) {
  write_pod(out, static_cast<std::int64_t>(m.rows()));
  write_pod(out, static_cast<std::int64_t>(m.cols()));
  out.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
}

Eigen::MatrixXd read_matrix(std::istream& in) {
  const auto rows = read_pod<std::int64_t>(in);
  const auto cols = read_pod<std::int64_t>(in);
  if (rows < 0 || cols < 0 || rows * cols > (std::int64_t{1} << 32)) throw IntegrityError("implausible matrix size");
  Eigen::MatrixXd m(rows, cols);
  in.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(double)));
  if (!in) throw IntegrityError("unexpected end of stream in matrix");
  return m;
}

void write_string(std::ostream& out, const std::string& s) {
  write_pod(out, static_cast<std::uint64_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string read_string(std::istream& in) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n > (1ULL << 30)) throw IntegrityError("implausible string length");
  std::string s(n, '\0');
  in.read(s.data(), static_cast<std::streamsize>(n));
  if (!in) throw IntegrityError("unexpected end of stream in string");
  return s;
}

void write_parameters(std::ostream& out, const ParameterSet& params) {
  write_pod(out, static_cast<std::uint64_t>(params.size()));
  for (const auto& p : params) {
    write_string(out, p.name);
    write_matrix(out, p.value);
  }
}

void read_parameters(std::istream& in, ParameterSet& params) {
  const auto n = read_pod<std::uint64_t>(in);
  if (n != static_cast<std::uint64_t>(params.size())) throw IntegrityError("parameter count mismatch");
  for (int i = 0; i < params.size(); ++i) {
    const std::string name = read_string(in);
    Eigen::MatrixXd value = read_matrix(in);
    auto& p = params[i];
    if (name != p.name || value.rows() != p.value.rows() || value.cols() != p.value.cols()) {
      throw IntegrityError("parameter '" + name + "' does not match architecture");
    }
    p.value = std::move(value);
  }
}

}  // namespace ibd::nn
