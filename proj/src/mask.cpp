#include "ibd/mask.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "ibd/error.hpp"

namespace ibd {

namespace {

BinaryMask ones(int height, int width) {
  if (height < 1 || width < 1) throw InvalidArgument("mask: dimensions must be positive");
  return BinaryMask{height, width, Eigen::VectorXd::Ones(static_cast<Eigen::Index>(height) * width)};
}

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }
int uniform_int(Rng& rng, int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); }

// Zeros every pixel centre within `radius` of segment (ax, ay)-(bx, by).
void stamp_segment(BinaryMask& m, double ax, double ay, double bx, double by, double radius) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - radius)));
  const int y1 = std::min(m.height - 1, static_cast<int>(std::ceil(std::max(ay, by) + radius)));
  const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - radius)));
  const int x1 = std::min(m.width - 1, static_cast<int>(std::ceil(std::max(ax, bx) + radius)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double px = x + 0.5;
      const double py = y + 0.5;
      double u = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
      u = std::clamp(u, 0.0, 1.0);
      const double ex = ax + u * dx - px;
      const double ey = ay + u * dy - py;
      if (ex * ex + ey * ey <= radius * radius) m.values[y * m.width + x] = 0.0;
    }
  }
}

}  // namespace

BinaryMask random_rect_mask(int height, int width, double min_area_frac, double max_area_frac, Rng& rng) {
  if (!(min_area_frac > 0.0) || !(min_area_frac <= max_area_frac) || !(max_area_frac < 1.0)) {
    throw InvalidArgument("random_rect_mask: need 0 < min <= max < 1");
  }
  BinaryMask m = ones(height, width);
  const double total = static_cast<double>(height) * width;
  constexpr double kTol = 1e-12;
  std::vector<std::pair<int, int>> feasible;
  for (int h = 1; h <= height; ++h) {
    for (int w = 1; w <= width; ++w) {
      const double f = h * w / total;
      if (f >= min_area_frac - kTol && f <= max_area_frac + kTol) feasible.emplace_back(h, w);
    }
  }
  if (feasible.empty()) {
    throw InvalidArgument("random_rect_mask: no rectangle on a " + std::to_string(height) + "x" +
                          std::to_string(width) + " grid has area fraction in the requested range");
  }
  const auto [rh, rw] = feasible[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(feasible.size()) - 1))];
  const int top = uniform_int(rng, 0, height - rh);
  const int left = uniform_int(rng, 0, width - rw);
  for (int y = top; y < top + rh; ++y) {
    for (int x = left; x < left + rw; ++x) m.values[y * width + x] = 0.0;
  }
  return m;
}

BinaryMask free_form_mask(int height, int width, const FreeFormParams& p, Rng& rng) {
  if (p.min_strokes < 0 || p.max_strokes < p.min_strokes || p.max_vertices < 1 || !(p.min_width_frac > 0.0) ||
      p.max_width_frac < p.min_width_frac || p.max_angle < 0.0 || !(p.max_length_frac > 0.0)) {
    throw InvalidArgument("free_form_mask: invalid stroke parameters");
  }
  BinaryMask m = ones(height, width);
  const double side = std::min(height, width);
  const int strokes = uniform_int(rng, p.min_strokes, p.max_strokes);
  for (int s = 0; s < strokes; ++s) {
    const double radius = 0.5 * std::max(1.0, uniform(rng, p.min_width_frac, p.max_width_frac) * side);
    double x = uniform(rng, 0.0, width);
    double y = uniform(rng, 0.0, height);
    double angle = uniform(rng, 0.0, 2.0 * std::numbers::pi);
    const int vertices = uniform_int(rng, 1, p.max_vertices);
    stamp_segment(m, x, y, x, y, radius);
    for (int v = 0; v < vertices; ++v) {
      angle += uniform(rng, -p.max_angle, p.max_angle);
      const double len = uniform(rng, 0.25, 1.0) * p.max_length_frac * side;
      const double nx = std::clamp(x + len * std::cos(angle), 0.0, static_cast<double>(width));
      const double ny = std::clamp(y + len * std::sin(angle), 0.0, static_cast<double>(height));
      stamp_segment(m, x, y, nx, ny, radius);
      x = nx;
      y = ny;
    }
  }
  return m;
}

void validate_mask_params(const MaskParams& params, int height, int width) {
  Rng probe = make_rng(0, 0);
  if (params.kind != MaskKind::kFreeForm) random_rect_mask(height, width, params.rect_min_area, params.rect_max_area, probe);
  if (params.kind != MaskKind::kRect) {
    if (params.free_form.max_strokes < 1) throw InvalidArgument("mask: free-form masks need at least one stroke");
    free_form_mask(height, width, params.free_form, probe);
  }
}

void validate_training_mask(const BinaryMask& mask) {
  if (!mask.is_binary()) throw InvalidArgument("training mask is not binary");
  const int z = mask.zeros();
  if (z == 0) throw InvalidArgument("training mask has no edited (zero) pixel");
  if (z == mask.values.size()) throw InvalidArgument("training mask has no kept (one) pixel");
}

BinaryMask draw_training_mask(const MaskParams& params, int height, int width, Rng& rng) {
  constexpr int kAttempts = 100;
  for (int i = 0; i < kAttempts; ++i) {
    bool rect = params.kind == MaskKind::kRect;
    if (params.kind == MaskKind::kMixed) rect = std::bernoulli_distribution(0.5)(rng);
    BinaryMask m = rect ? random_rect_mask(height, width, params.rect_min_area, params.rect_max_area, rng)
                        : free_form_mask(height, width, params.free_form, rng);
    const int z = m.zeros();
    if (z > 0 && z < m.values.size()) return m;
  }
  throw InvalidArgument("mask parameters keep producing all-ones or all-zeros masks");
}

Batch masks_to_batch(const std::vector<BinaryMask>& masks) {
  if (masks.empty()) throw InvalidArgument("masks_to_batch: empty list");
  Batch b(masks.front().values.size(), static_cast<Eigen::Index>(masks.size()));
  for (std::size_t j = 0; j < masks.size(); ++j) {
    if (masks[j].values.size() != b.rows()) throw ShapeError("masks_to_batch: masks differ in size");
    b.col(static_cast<Eigen::Index>(j)) = masks[j].values;
  }
  return b;
}

Batch draw_mask_batch(const MaskParams& params, int height, int width, int n, Rng& rng) {
  std::vector<BinaryMask> masks;
  masks.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) masks.push_back(draw_training_mask(params, height, width, rng));
  return masks_to_batch(masks);
}

}  // namespace ibd
