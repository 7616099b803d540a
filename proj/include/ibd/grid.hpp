#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace ibd {

/// Image geometry. Grids are stored flattened channel-major (CHW):
/// index = (c * height + y) * width + x.
struct Shape {
  int height = 0;
  int width = 0;
  int channels = 0;

  int pixels() const { return height * width; }
  int size() const { return height * width * channels; }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

/// A batch of grids: one flattened grid per column. Images live in [-1, 1];
/// noise and perturbations are unbounded.
using Batch = Eigen::MatrixXd;

/// A single grid with its geometry attached.
struct Grid {
  Shape shape;
  Eigen::VectorXd values;

  Grid() = default;
  explicit Grid(Shape s) : shape(s), values(Eigen::VectorXd::Zero(s.size())) {}
  Grid(Shape s, Eigen::VectorXd v);

  static Grid constant(Shape s, double value);
  double& at(int c, int y, int x) { return values[(c * shape.height + y) * shape.width + x]; }
  double at(int c, int y, int x) const { return values[(c * shape.height + y) * shape.width + x]; }
};

using ImageGrid = Grid;
using NoiseGrid = Grid;

/// Binary mask over H x W pixels; 1 keeps a pixel visible, 0 marks the region
/// to be edited.
struct BinaryMask {
  int height = 0;
  int width = 0;
  Eigen::VectorXd values;  // entries exactly 0.0 or 1.0

  bool is_binary() const;
  int zeros() const;
  double zero_fraction() const;
};

/// Random source used throughout. Streams are derived from one root seed so
/// independent parts of a run never perturb each other's draws.
using Rng = std::mt19937_64;
Rng make_rng(std::uint64_t root_seed, std::uint64_t stream);

Batch standard_normal(int rows, int cols, Rng& rng);
Eigen::VectorXd standard_normal(int n, Rng& rng);

void require_same_shape(const Batch& a, const Batch& b, const char* what);

/// Expands an (H*W) x N mask batch to (C*H*W) x N by repeating per channel.
Batch expand_mask(const Batch& masks, int channels);

/// Tiles a single column across n columns.
Batch tile(const Eigen::VectorXd& v, int n);

/// Mean over all entries of (a - b)^2.
double mean_squared(const Batch& a, const Batch& b);

/// FNV-1a over the raw bytes of a matrix; used for parameter checksums.
std::uint64_t checksum(const Eigen::MatrixXd& m, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace ibd
