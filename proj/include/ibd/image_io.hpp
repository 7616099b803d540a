#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ibd/grid.hpp"

namespace ibd {

/// 8-bit interleaved pixels (row-major, channels last).
struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 or 3
  std::vector<std::uint8_t> pixels;
};

/// Decodes a PNG, converting palette/alpha/16-bit inputs to 8-bit gray or RGB.
/// Throws DataError on anything undecodable.
RawImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RawImage& image);

/// Resizes (bilinear) and converts channel count, then maps [0, 255] to [-1, 1].
Eigen::VectorXd raw_to_grid(const RawImage& image, Shape shape);
/// Maps [-1, 1] to [0, 255] with clamping.
RawImage grid_to_raw(const Eigen::VectorXd& values, Shape shape);

/// Tiles the columns of `images` into a grid `columns` wide with a 1-pixel gap.
RawImage tile_images(const Batch& images, Shape shape, int columns = 8);
void write_image_grid(const std::filesystem::path& path, const Batch& images, Shape shape, int columns = 8);
/// Two grids next to each other, separated by a 4-pixel white band.
void write_side_by_side(const std::filesystem::path& path, const Batch& left, const Batch& right, Shape shape,
                        int columns = 8);

}  // namespace ibd
