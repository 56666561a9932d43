#pragma once

// 8-bit RGB frames, PNG I/O and the float-image helpers used by
// preprocessing (bilinear resize, translation with zero fill).

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sbnet/tensor.hpp"

namespace sbnet {

/// Interleaved RGB, row-major, 8 bits per channel.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h) : width(w), height(h), rgb(w * h * 3, 0) {}

  std::uint8_t* pixel(std::size_t x, std::size_t y) { return rgb.data() + (y * width + x) * 3; }
  const std::uint8_t* pixel(std::size_t x, std::size_t y) const { return rgb.data() + (y * width + x) * 3; }

  bool operator==(const Image&) const = default;
};

/// Planar float image (3, H, W) in [0, 1].
struct PlanarImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<float> values;
};

inline PlanarImage to_planar(const Image& image) {
  PlanarImage out{image.width, image.height, std::vector<float>(3 * image.width * image.height)};
  const std::size_t plane = image.width * image.height;
  for (std::size_t i = 0; i < plane; ++i) {
    for (std::size_t c = 0; c < 3; ++c) out.values[c * plane + i] = image.rgb[i * 3 + c] / 255.0f;
  }
  return out;
}

/// Half-pixel-centre bilinear resampling with edge clamping.
inline PlanarImage resize_bilinear(const PlanarImage& in, std::size_t out_w, std::size_t out_h) {
  if (in.width == out_w && in.height == out_h) return in;
  const std::size_t channels = in.values.size() / (in.width * in.height);
  PlanarImage out{out_w, out_h, std::vector<float>(channels * out_w * out_h)};
  const double sx = static_cast<double>(in.width) / out_w;
  const double sy = static_cast<double>(in.height) / out_h;
  for (std::size_t y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(in.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, in.height - 1);
    const double wy = fy - y0;
    for (std::size_t x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(in.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, in.width - 1);
      const double wx = fx - x0;
      for (std::size_t c = 0; c < channels; ++c) {
        const float* p = in.values.data() + c * in.width * in.height;
        const double top = p[y0 * in.width + x0] * (1 - wx) + p[y0 * in.width + x1] * wx;
        const double bottom = p[y1 * in.width + x0] * (1 - wx) + p[y1 * in.width + x1] * wx;
        out.values[(c * out_h + y) * out_w + x] = static_cast<float>(top * (1 - wy) + bottom * wy);
      }
    }
  }
  return out;
}

/// Shifts content by (dx, dy) pixels; uncovered pixels become zero.
inline PlanarImage translate(const PlanarImage& in, long dx, long dy) {
  PlanarImage out{in.width, in.height, std::vector<float>(in.values.size(), 0.0f)};
  const std::size_t channels = in.values.size() / (in.width * in.height);
  const long w = static_cast<long>(in.width), h = static_cast<long>(in.height);
  for (std::size_t c = 0; c < channels; ++c) {
    for (long y = 0; y < h; ++y) {
      const long sy = y - dy;
      if (sy < 0 || sy >= h) continue;
      for (long x = 0; x < w; ++x) {
        const long sx = x - dx;
        if (sx < 0 || sx >= w) continue;
        out.values[(c * h + y) * w + x] = in.values[(c * h + sy) * w + sx];
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> to_tensor(const PlanarImage& image) {
  const std::size_t channels = image.values.size() / (image.width * image.height);
  return Tensor<T>({channels, image.height, image.width}, std::vector<T>(image.values.begin(), image.values.end()));
}

// ---------------------------------------------------------------------------
// PNG

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void write_png(const std::string& path, const Image& image) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!file) throw ImageError("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("failed to encode '" + path + "'");
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height; ++y) {
    png_write_row(png, const_cast<png_bytep>(image.rgb.data() + y * image.width * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Decodes any PNG into 8-bit RGB.
inline Image read_png(const std::string& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> file(std::fopen(path.c_str(), "rb"), &std::fclose);
  if (!file) throw ImageError("cannot open '" + path + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ImageError("failed to decode '" + path + "'");
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_expand(png);
  const auto color = png_get_color_type(png, info);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  Image image(png_get_image_width(png, info), png_get_image_height(png, info));
  for (std::size_t y = 0; y < image.height; ++y) png_read_row(png, image.rgb.data() + y * image.width * 3, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

/// Writes a single-channel map in [0, 1] as an RGB grayscale PNG.
inline void write_gray_png(const std::string& path, const std::vector<float>& values, std::size_t width,
                           std::size_t height) {
  Image image(width, height);
  for (std::size_t i = 0; i < width * height; ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(values[i], 0.0f, 1.0f) * 255.0f));
    image.rgb[i * 3] = image.rgb[i * 3 + 1] = image.rgb[i * 3 + 2] = v;
  }
  write_png(path, image);
}

}  // namespace sbnet
