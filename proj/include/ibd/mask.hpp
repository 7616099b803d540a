#pragma once

#include <vector>

#include "ibd/grid.hpp"

namespace ibd {

/// One axis-aligned rectangle of zeros whose area fraction lies in
/// [min_area_frac, max_area_frac]. The rectangle size is drawn uniformly over
/// all feasible (height, width) pairs, then the position uniformly.
BinaryMask random_rect_mask(int height, int width, double min_area_frac, double max_area_frac, Rng& rng);

struct FreeFormParams {
  int min_strokes = 4;
  int max_strokes = 8;
  double min_width_frac = 0.10;  // brush diameter as a fraction of the shorter side
  double max_width_frac = 0.25;
  int max_vertices = 8;
  double max_angle = 0.6;        // radians of turn allowed per vertex
  double max_length_frac = 0.3;  // segment length as a fraction of the shorter side

  bool operator==(const FreeFormParams&) const = default;
};

/// Random-walk polyline strokes drawn with a circular brush.
BinaryMask free_form_mask(int height, int width, const FreeFormParams& params, Rng& rng);

enum class MaskKind { kRect, kFreeForm, kMixed };

struct MaskParams {
  MaskKind kind = MaskKind::kMixed;
  double rect_min_area = 0.1;
  double rect_max_area = 0.4;
  FreeFormParams free_form;

  bool operator==(const MaskParams&) const = default;
};

void validate_mask_params(const MaskParams& params, int height, int width);

/// Training masks need at least one kept and one edited pixel.
void validate_training_mask(const BinaryMask& mask);

/// Draws one mask of the configured kind (mixed: rect or free-form with equal
/// probability), redrawing degenerate ones.
BinaryMask draw_training_mask(const MaskParams& params, int height, int width, Rng& rng);

/// (H*W) x N batch of masks.
Batch masks_to_batch(const std::vector<BinaryMask>& masks);
Batch draw_mask_batch(const MaskParams& params, int height, int width, int n, Rng& rng);

}  // namespace ibd
