// Thin libpng wrappers: (C,H,W) float tensors in [0,1] <-> 8-bit PNG files.
#pragma once

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <png.h>

#include "aru/tensor.hpp"

namespace aru {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace detail

// Writes a (1,H,W) tensor as 8-bit grayscale or a (3,H,W) tensor as 8-bit RGB.
template <typename T>
void write_png(const std::string& path, const Tensor<T>& image) {
  if (image.ndim() != 3) throw ContractError("write_png: expected (C,H,W) tensor");
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (C != 1 && C != 3) throw ContractError("write_png: channels must be 1 or 3");

  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IngestError("cannot open for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IngestError("libpng init failed");
  }
  std::vector<unsigned char> row(static_cast<std::size_t>(W) * C);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IngestError("png write failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
               C == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) {
      for (int c = 0; c < C; ++c) {
        double v = static_cast<double>(image[(static_cast<std::size_t>(c) * H + y) * W + x]);
        v = std::clamp(v, 0.0, 1.0);
        row[static_cast<std::size_t>(x) * C + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

// Reads any 8/16-bit gray/palette/RGB(A) PNG into a (C,H,W) tensor with C of
// 1 or 3 and values in [0,1].
template <typename T = float>
Tensor<T> read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IngestError("cannot open: " + path);

  unsigned char header[8];
  if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8) != 0)
    throw IngestError("not a PNG file: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("libpng init failed");
  }
  std::vector<unsigned char> pixels;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("png read failed: " + path);
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);

  const png_uint_32 W = png_get_image_width(png, info);
  const png_uint_32 H = png_get_image_height(png, info);
  const png_byte color = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);

  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (depth == 16) png_set_strip_16(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int C = png_get_channels(png, info);
  if (C != 1 && C != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("unsupported channel count in " + path);
  }
  pixels.resize(static_cast<std::size_t>(W) * H * C);
  rows.resize(H);
  for (png_uint_32 y = 0; y < H; ++y)
    rows[y] = pixels.data() + static_cast<std::size_t>(y) * W * C;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Tensor<T> image({C, static_cast<int>(H), static_cast<int>(W)});
  for (png_uint_32 y = 0; y < H; ++y)
    for (png_uint_32 x = 0; x < W; ++x)
      for (int c = 0; c < C; ++c)
        image[(static_cast<std::size_t>(c) * H + y) * W + x] =
            static_cast<T>(pixels[(static_cast<std::size_t>(y) * W + x) * C + c] / 255.0);
  return image;
}

}  // namespace aru
