#include "ibd/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "ibd/error.hpp"

namespace ibd {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

RawImage read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw DataError("cannot open " + path.string());
  png_byte header[8];
  if (std::fread(header, 1, 8, file.get()) != 8 || png_sig_cmp(header, 0, 8) != 0) {
    throw DataError(path.string() + " is not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw DataError("libpng initialisation failed");
  }
  RawImage img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG data in " + path.string());
  }
  png_init_io(png, file.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  if (img.channels != 1 && img.channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError(path.string() + ": unsupported channel layout");
  }
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) {
    rows[static_cast<std::size_t>(y)] = img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels;
  }
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png(const std::filesystem::path& path, const RawImage& image) {
  if (image.channels != 1 && image.channels != 3) throw InvalidArgument("write_png: 1 or 3 channels required");
  if (image.pixels.size() != static_cast<std::size_t>(image.width) * image.height * image.channels) {
    throw ShapeError("write_png: pixel buffer does not match dimensions");
  }
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error("io", "cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw Error("io", "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("io", "failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               image.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < image.height; ++y) {
    png_write_row(png, image.pixels.data() + static_cast<std::size_t>(y) * image.width * image.channels);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

Eigen::VectorXd raw_to_grid(const RawImage& image, Shape shape) {
  if (image.width < 1 || image.height < 1) throw DataError("empty image");
  Eigen::VectorXd out(shape.size());
  const auto sample = [&](int c, int y, int x) -> double {
    const int src_c = image.channels == 1 ? 0 : c;
    const double v = image.pixels[(static_cast<std::size_t>(y) * image.width + x) * image.channels + src_c];
    return v;
  };
  for (int c = 0; c < shape.channels; ++c) {
    for (int y = 0; y < shape.height; ++y) {
      const double sy = std::clamp((y + 0.5) * image.height / shape.height - 0.5, 0.0, image.height - 1.0);
      const int y0 = static_cast<int>(sy);
      const int y1 = std::min(y0 + 1, image.height - 1);
      const double fy = sy - y0;
      for (int x = 0; x < shape.width; ++x) {
        const double sx = std::clamp((x + 0.5) * image.width / shape.width - 0.5, 0.0, image.width - 1.0);
        const int x0 = static_cast<int>(sx);
        const int x1 = std::min(x0 + 1, image.width - 1);
        const double fx = sx - x0;
        double v;
        if (shape.channels == 1 && image.channels == 3) {
          const auto lum = [&](int yy, int xx) {
            return 0.299 * sample(0, yy, xx) + 0.587 * sample(1, yy, xx) + 0.114 * sample(2, yy, xx);
          };
          v = (1 - fy) * ((1 - fx) * lum(y0, x0) + fx * lum(y0, x1)) + fy * ((1 - fx) * lum(y1, x0) + fx * lum(y1, x1));
        } else {
          v = (1 - fy) * ((1 - fx) * sample(c, y0, x0) + fx * sample(c, y0, x1)) +
              fy * ((1 - fx) * sample(c, y1, x0) + fx * sample(c, y1, x1));
        }
        out[(c * shape.height + y) * shape.width + x] = v / 127.5 - 1.0;
      }
    }
  }
  return out;
}

RawImage grid_to_raw(const Eigen::VectorXd& values, Shape shape) {
  if (values.size() != shape.size()) throw ShapeError("grid_to_raw: size does not match " + shape.str());
  RawImage img{shape.width, shape.height, shape.channels, {}};
  img.pixels.resize(static_cast<std::size_t>(shape.size()));
  for (int c = 0; c < shape.channels; ++c) {
    for (int y = 0; y < shape.height; ++y) {
      for (int x = 0; x < shape.width; ++x) {
        const double v = std::clamp(values[(c * shape.height + y) * shape.width + x], -1.0, 1.0);
        img.pixels[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c] =
            static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
      }
    }
  }
  return img;
}

RawImage tile_images(const Batch& images, Shape shape, int columns) {
  if (images.rows() != shape.size()) throw ShapeError("tile_images: rows do not match " + shape.str());
  if (columns < 1) throw InvalidArgument("tile_images: columns must be positive");
  const int n = static_cast<int>(images.cols());
  const int cols = std::max(1, std::min(columns, n));
  const int rows = std::max(1, (n + cols - 1) / cols);
  RawImage out{cols * (shape.width + 1) + 1, rows * (shape.height + 1) + 1, shape.channels, {}};
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * out.channels, 255);
  for (int i = 0; i < n; ++i) {
    const RawImage tile = grid_to_raw(images.col(i), shape);
    const int oy = 1 + (i / cols) * (shape.height + 1);
    const int ox = 1 + (i % cols) * (shape.width + 1);
    for (int y = 0; y < shape.height; ++y) {
      std::copy_n(tile.pixels.begin() + static_cast<std::ptrdiff_t>(y) * shape.width * shape.channels,
                  shape.width * shape.channels,
                  out.pixels.begin() + (static_cast<std::ptrdiff_t>(oy + y) * out.width + ox) * out.channels);
    }
  }
  return out;
}

void write_image_grid(const std::filesystem::path& path, const Batch& images, Shape shape, int columns) {
  write_png(path, tile_images(images, shape, columns));
}

void write_side_by_side(const std::filesystem::path& path, const Batch& left, const Batch& right, Shape shape,
                        int columns) {
  const RawImage a = tile_images(left, shape, columns);
  const RawImage b = tile_images(right, shape, columns);
  constexpr int kGap = 4;
  RawImage out{a.width + kGap + b.width, std::max(a.height, b.height), shape.channels, {}};
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height * out.channels, 255);
  const auto paste = [&](const RawImage& img, int ox) {
    for (int y = 0; y < img.height; ++y) {
      std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>(y) * img.width * img.channels, img.width * img.channels,
                  out.pixels.begin() + (static_cast<std::ptrdiff_t>(y) * out.width + ox) * out.channels);
    }
  };
  paste(a, 0);
  paste(b, a.width + kGap);
  write_png(path, out);
}

}  // namespace ibd
