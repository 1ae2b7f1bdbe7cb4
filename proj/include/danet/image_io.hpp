// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "danet/errors.hpp"
#include "danet/tensor.hpp"

namespace danet {

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const noexcept {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg) {
  auto* what = static_cast<std::string*>(png_get_error_ptr(png));
  if (what) *what = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}
} // namespace detail

/// Round half away from zero onto [0, maxval].
inline unsigned quantize(double v, unsigned maxval) {
  const double c = std::min(1.0, std::max(0.0, v)) * maxval;
  return static_cast<unsigned>(std::floor(c + 0.5));
}

/// Decodes an 8- or 16-bit grayscale or RGB PNG to a (1,C,H,W) tensor with
/// values value/maxval. Alpha is dropped and palettes are expanded.
inline Tensor<float> load_png(const std::filesystem::path& path) {
  detail::FilePtr f(std::fopen(path.string().c_str(), "rb"));
  if (!f) throw IoError("cannot open image " + path.string());
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IoError("not a PNG file: " + path.string());

  std::string err;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                           detail::png_warning_fn);
  if (!png) throw IoError("libpng init failed for " + path.string());
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows;
  std::vector<unsigned char> buffer;
  png_uint_32 width = 0, height = 0;
  int channels = 0, depth = 0;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("corrupt PNG " + path.string() + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color & PNG_COLOR_MASK_ALPHA || png_get_valid(png, info, PNG_INFO_tRNS))
    png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png); // little-endian 16-bit samples in memory
  png_read_update_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  channels = png_get_channels(png, info);
  depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  buffer.resize(rowbytes * height);
  rows.resize(height);
  for (png_uint_32 y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  if (channels != 1 && channels != 3)
    throw IoError("unsupported channel count " + std::to_string(channels) + " in " + path.string());
  Tensor<float> out(Shape{1, static_cast<std::size_t>(channels), height, width});
  const double maxval = depth == 16 ? 65535.0 : 255.0;
  for (png_uint_32 y = 0; y < height; ++y) {
    for (png_uint_32 x = 0; x < width; ++x) {
      for (int c = 0; c < channels; ++c) {
        const std::size_t k = static_cast<std::size_t>(x) * channels + c;
        unsigned v;
        if (depth == 16) {
          v = rows[y][2 * k] | (static_cast<unsigned>(rows[y][2 * k + 1]) << 8);
        } else {
          v = rows[y][k];
        }
        out.at(0, c, y, x) = static_cast<float>(v / maxval);
      }
    }
  }
  return out;
}

/// Writes a (1,C,H,W) tensor (C = 1 or 3) as PNG. Values are clamped to [0,1]
/// and quantized with round-half-away-from-zero.
inline void save_png(const Tensor<float>& image, const std::filesystem::path& path, int bit_depth = 8) {
  const Shape s = image.shape();
  if (s.n != 1 || (s.c != 1 && s.c != 3))
    throw ShapeError("save_png expects (1,1|3,H,W), got " + s.str());
  if (bit_depth != 8 && bit_depth != 16) throw ParameterError("save_png: bit depth must be 8 or 16");
  detail::FilePtr f(std::fopen(path.string().c_str(), "wb"));
  if (!f) throw IoError("cannot write image " + path.string());

  const unsigned maxval = bit_depth == 16 ? 65535u : 255u;
  const std::size_t bytes = bit_depth / 8;
  std::vector<unsigned char> buffer(s.h * s.w * s.c * bytes);
  for (std::size_t y = 0; y < s.h; ++y)
    for (std::size_t x = 0; x < s.w; ++x)
      for (std::size_t c = 0; c < s.c; ++c) {
        const unsigned q = quantize(image.at(0, c, y, x), maxval);
        const std::size_t k = ((y * s.w + x) * s.c + c) * bytes;
        if (bytes == 2) {
          buffer[k] = static_cast<unsigned char>(q >> 8); // PNG stores big-endian
          buffer[k + 1] = static_cast<unsigned char>(q & 0xff);
        } else {
          buffer[k] = static_cast<unsigned char>(q);
        }
      }
  std::vector<png_bytep> rows(s.h);
  for (std::size_t y = 0; y < s.h; ++y) rows[y] = buffer.data() + y * s.w * s.c * bytes;

  std::string err;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &err, detail::png_error_fn,
                                            detail::png_warning_fn);
  if (!png) throw IoError("libpng init failed for " + path.string());
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing PNG " + path.string() + ": " + err);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(s.w), static_cast<png_uint_32>(s.h), bit_depth,
               s.c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// PNG or DTN1 by extension.
inline Tensor<float> load_image(const std::filesystem::path& path) {
  if (path.extension() == ".dtn") return load_dtn1<float>(path);
  return load_png(path);
}

inline void save_image(const Tensor<float>& image, const std::filesystem::path& path) {
  if (path.extension() == ".dtn") {
    save_dtn1(path, image);
    return;
  }
  save_png(image, path);
}

} // namespace danet
