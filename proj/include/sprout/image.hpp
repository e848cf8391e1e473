#pragma once

// 8-bit images, PNG I/O through libpng, and conversion to normalized tensors.

#include <png.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "sprout/error.hpp"
#include "sprout/tensor.hpp"

namespace sprout {

struct Image8 {
  std::size_t width = 0, height = 0, channels = 0;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major

  Image8() = default;
  Image8(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) { return pixels[(y * width + x) * channels + c]; }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }

  friend bool operator==(const Image8&, const Image8&) = default;
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

// Decodes any PNG to 8-bit RGB (gray, palette, alpha and 16-bit inputs are
// converted). Throws IngestError on unreadable or undecodable files.
inline Image8 read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IngestError("cannot open '" + path + "'");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IngestError("'" + path + "' is not a PNG file");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("libpng initialization failed");
  }
  Image8 img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("corrupt PNG data in '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  img.width = png_get_image_width(png, info);
  img.height = png_get_image_height(png, info);
  img.channels = 3;
  if (png_get_rowbytes(png, info) != img.width * 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("unsupported PNG layout in '" + path + "'");
  }
  img.pixels.resize(img.width * img.height * 3);
  rows.resize(img.height);
  for (std::size_t y = 0; y < img.height; ++y) rows[y] = img.pixels.data() + y * img.width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

// Reads a PNG as a single 8-bit channel (label rasters). Multi-channel files
// keep their first channel.
inline Image8 read_png_gray(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IngestError("cannot open '" + path + "'");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0)
    throw IngestError("'" + path + "' is not a PNG file");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IngestError("corrupt PNG data in '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_packing(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  const std::size_t ch = rowbytes / w;
  std::vector<std::uint8_t> buf(rowbytes * h);
  std::vector<png_bytep> rows(h);
  for (std::size_t y = 0; y < h; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  Image8 img(w, h, 1);
  for (std::size_t i = 0; i < w * h; ++i) img.pixels[i] = buf[i * ch];
  return img;
}

// Writes a gray (1 channel) or RGB (3 channel) PNG to `path` directly.
inline void write_png_file(const std::string& path, const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw ArgumentError("PNG output needs 1 or 3 channels");
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw PersistError("cannot open '" + path + "' for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw PersistError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw PersistError("failed writing PNG '" + path + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.pixels.data() + y * img.width * img.channels));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fflush(fp.get()) != 0) throw PersistError("failed flushing '" + path + "'");
}

// Regular, non-hidden files of a directory in lexicographic order.
inline std::vector<std::filesystem::path> list_files(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) throw IngestError("'" + dir.string() + "' is not a readable directory");
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir, ec)) {
    if (!e.is_regular_file()) continue;
    const auto name = e.path().filename().string();
    if (!name.empty() && name[0] == '.') continue;
    out.push_back(e.path());
  }
  if (ec) throw IngestError("cannot list '" + dir.string() + "': " + ec.message());
  std::sort(out.begin(), out.end());
  return out;
}

// RGB8 -> C x H x W floats in [-1, 1].
template <class T>
std::vector<T> image_to_chw(const Image8& img) {
  std::vector<T> out(img.channels * img.width * img.height);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        out[(c * img.height + y) * img.width + x] = static_cast<T>(img.at(x, y, c) / 127.5 - 1.0);
  return out;
}

// Stacks equally sized images into B x C x H x W in [-1, 1].
template <class T>
Tensor<T> images_to_tensor(const std::vector<Image8>& images) {
  if (images.empty()) throw ArgumentError("no images to stack");
  const auto& f = images.front();
  Tensor<T> out({images.size(), f.channels, f.height, f.width});
  for (std::size_t i = 0; i < images.size(); ++i) {
    const auto& im = images[i];
    if (im.width != f.width || im.height != f.height || im.channels != f.channels)
      throw ShapeError("image " + std::to_string(i) + " is " + std::to_string(im.width) + "x" +
                       std::to_string(im.height) + ", expected " + std::to_string(f.width) + "x" +
                       std::to_string(f.height));
    auto chw = image_to_chw<T>(im);
    std::copy(chw.begin(), chw.end(), out.item(i).begin());
  }
  return out;
}

inline Image8 crop(const Image8& img, std::size_t x0, std::size_t y0, std::size_t w, std::size_t h) {
  if (x0 + w > img.width || y0 + h > img.height) throw ArgumentError("crop window outside image");
  Image8 out(w, h, img.channels);
  for (std::size_t y = 0; y < h; ++y)
    std::copy_n(img.pixels.begin() + ((y0 + y) * img.width + x0) * img.channels, w * img.channels,
                out.pixels.begin() + y * w * img.channels);
  return out;
}

// Luminance in [0, 255].
inline std::vector<double> grayscale(const Image8& img) {
  std::vector<double> g(img.width * img.height);
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (img.channels >= 3) {
      const auto* p = img.pixels.data() + i * img.channels;
      g[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
    } else {
      g[i] = img.pixels[i * img.channels];
    }
  }
  return g;
}

}  // namespace sprout
