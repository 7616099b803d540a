#include "ibd/grid.hpp"

#include <cstring>

#include "ibd/error.hpp"

namespace ibd {

std::string Shape::str() const {
  return std::to_string(height) + "x" + std::to_string(width) + "x" + std::to_string(channels);
}

Grid::Grid(Shape s, Eigen::VectorXd v) : shape(s), values(std::move(v)) {
  if (values.size() != s.size()) {
    throw ShapeError("grid of shape " + s.str() + " given " + std::to_string(values.size()) + " values");
  }
}

Grid Grid::constant(Shape s, double value) {
  return Grid(s, Eigen::VectorXd::Constant(s.size(), value));
}

bool BinaryMask::is_binary() const {
  if (values.size() != static_cast<Eigen::Index>(height) * width) return false;
  for (Eigen::Index i = 0; i < values.size(); ++i) {
    if (values[i] != 0.0 && values[i] != 1.0) return false;
  }
  return true;
}

int BinaryMask::zeros() const { return static_cast<int>((values.array() == 0.0).count()); }

double BinaryMask::zero_fraction() const {
  return values.size() == 0 ? 0.0 : static_cast<double>(zeros()) / static_cast<double>(values.size());
}

Rng make_rng(std::uint64_t root_seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(root_seed), static_cast<std::uint32_t>(root_seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32), 0x1bdu};
  return Rng(seq);
}

Batch standard_normal(int rows, int cols, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Batch out(rows, cols);
  // Column-major fill order keeps draws for sample j contiguous.
  for (int j = 0; j < cols; ++j) {
    for (int i = 0; i < rows; ++i) out(i, j) = normal(rng);
  }
  return out;
}

Eigen::VectorXd standard_normal(int n, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::VectorXd out(n);
  for (int i = 0; i < n; ++i) out[i] = normal(rng);
  return out;
}

void require_same_shape(const Batch& a, const Batch& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(what) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()) + ")");
  }
}

Batch expand_mask(const Batch& masks, int channels) {
  const Eigen::Index pixels = masks.rows();
  Batch out(pixels * channels, masks.cols());
  for (int c = 0; c < channels; ++c) out.middleRows(c * pixels, pixels) = masks;
  return out;
}

Batch tile(const Eigen::VectorXd& v, int n) { return v.replicate(1, n); }

double mean_squared(const Batch& a, const Batch& b) {
  require_same_shape(a, b, "mean_squared");
  if (a.size() == 0) throw InvalidArgument("mean_squared: empty input");
  return (a - b).squaredNorm() / static_cast<double>(a.size());
}

std::uint64_t checksum(const Eigen::MatrixXd& m, std::uint64_t seed) {
  std::uint64_t h = seed;
  const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
  const std::size_t n = static_cast<std::size_t>(m.size()) * sizeof(double);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace ibd
