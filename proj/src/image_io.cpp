#include "uar/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "uar/errors.hpp"

namespace uar::io {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f != nullptr) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

void write_png(const std::string& path, int height, int width, int color_type, int channels,
               const std::vector<std::uint8_t>& pixels) {
  File f(std::fopen(path.c_str(), "wb"));
  if (!f) throw ConfigError("cannot open for writing: " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng: allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("libpng: write failed for " + path);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
               color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<size_t>(y) * width * channels));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

void write_png_gray(const std::string& path, const ImageTensor& image) {
  std::vector<std::uint8_t> px(static_cast<size_t>(image.height) * image.width);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      double s = 0.0;
      for (int c = 0; c < image.channels; ++c) s += image.at(y, x, c);
      px[static_cast<size_t>(y) * image.width + x] = to_byte(s / image.channels);
    }
  }
  write_png(path, image.height, image.width, PNG_COLOR_TYPE_GRAY, 1, px);
}

void write_png_rgb(const std::string& path, int height, int width, const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != static_cast<size_t>(height) * width * 3) {
    throw ShapeError("write_png_rgb: buffer size mismatch");
  }
  write_png(path, height, width, PNG_COLOR_TYPE_RGB, 3, rgb);
}

ImageTensor read_png(const std::string& path) {
  File f(std::fopen(path.c_str(), "rb"));
  if (!f) throw MissingFile("image not found: " + path);
  png_byte sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw ParseError("not a PNG file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (png == nullptr || info == nullptr) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error("libpng: allocation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ParseError("corrupt PNG: " + path);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  // Normalize everything to 8-bit gray or RGB without alpha.
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_read_update_info(png, info);
  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int channels = png_get_channels(png, info);
  std::vector<std::uint8_t> buf(static_cast<size_t>(h) * w * channels);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[static_cast<size_t>(y)] = buf.data() + static_cast<size_t>(y) * w * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  ImageTensor img(h, w, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int c = 0; c < channels; ++c) s += buf[(static_cast<size_t>(y) * w + x) * channels + c];
      img.at(y, x) = s / (255.0 * channels);
    }
  }
  return img;
}

}  // namespace uar::io
