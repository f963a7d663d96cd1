#pragma once

// PNG input/output through libpng. Quantised images are stored as indexed
// (palette) PNGs at the smallest bit depth in {1, 2, 4, 8} that holds C.

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "cqlab/baselines.hpp"
#include "cqlab/colour.hpp"
#include "cqlab/common.hpp"
#include "cqlab/cqformer.hpp"

namespace cqlab {

inline int indexed_bit_depth(std::size_t palette_size)
{
  if (palette_size <= 2) return 1;
  if (palette_size <= 4) return 2;
  if (palette_size <= 16) return 4;
  if (palette_size <= 256) return 8;
  throw InputError("indexed PNG: palette larger than 256 entries");
}

inline std::uint8_t to_byte(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

// Rounds every palette channel to the nearest k/255 so that the in-memory
// image and its PNG encoding agree exactly.
inline Palette snap_to_8bit(Palette p)
{
  for (auto& c : p.colours) c = {to_byte(c.r) / 255.0, to_byte(c.g) / 255.0, to_byte(c.b) / 255.0};
  return p;
}

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const
  {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::string& path, const char* mode)
{
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw LoadError("cannot open " + path);
  return f;
}

[[noreturn]] inline void png_error_fn(png_structp png, png_const_charp msg)
{
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}
inline void png_warning_fn(png_structp, png_const_charp) {}

}  // namespace detail

inline void write_indexed_png(const std::string& path, const IndexMap& indices, const Palette& palette)
{
  if (palette.size() == 0) throw InputError("write_indexed_png: empty palette");
  for (int v : indices.data)
    if (v < 0 || static_cast<std::size_t>(v) >= palette.size()) throw InputError("write_indexed_png: index out of range");
  const int depth = indexed_bit_depth(palette.size());
  auto file = detail::open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw std::runtime_error("libpng: out of memory");
  }
  // Rows are packed up front so nothing with a destructor lives across setjmp.
  const int per_byte = 8 / depth;
  const std::size_t stride = (static_cast<std::size_t>(indices.width) + per_byte - 1) / per_byte;
  std::vector<std::uint8_t> packed(stride * indices.height, 0);
  for (int y = 0; y < indices.height; ++y)
    for (int x = 0; x < indices.width; ++x) {
      const int shift = 8 - depth * (x % per_byte + 1);
      packed[y * stride + x / per_byte] |= static_cast<std::uint8_t>(indices(y, x) << shift);
    }
  std::vector<png_color> plte(palette.size());
  for (std::size_t i = 0; i < palette.size(); ++i)
    plte[i] = {to_byte(palette.colours[i].r), to_byte(palette.colours[i].g), to_byte(palette.colours[i].b)};
  std::vector<png_bytep> rows(indices.height);
  for (int y = 0; y < indices.height; ++y) rows[y] = packed.data() + y * stride;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw LoadError("libpng write failed for " + path + ": " + error);
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, indices.width, indices.height, depth, PNG_COLOR_TYPE_PALETTE, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_PLTE(png, info, plte.data(), static_cast<int>(plte.size()));
  png_write_info(png, info);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

inline QuantisedIndex read_indexed_png(const std::string& path)
{
  auto file = detail::open_file(path, "rb");
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, detail::png_error_fn, detail::png_warning_fn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw std::runtime_error("libpng: out of memory");
  }
  std::vector<std::uint8_t> pixels;
  std::vector<png_bytep> rows;
  png_uint_32 width = 0, height = 0;
  png_colorp plte = nullptr;
  int entries = 0;
  bool indexed = true;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw LoadError("libpng read failed for " + path + ": " + error);
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  indexed = png_get_color_type(png, info) == PNG_COLOR_TYPE_PALETTE;
  if (indexed) {
    png_get_PLTE(png, info, &plte, &entries);
    png_set_packing(png);
    png_read_update_info(png, info);
    pixels.resize(static_cast<std::size_t>(width) * height);
    rows.resize(height);
    for (png_uint_32 y = 0; y < height; ++y) rows[y] = pixels.data() + static_cast<std::size_t>(y) * width;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
  }
  QuantisedIndex out;
  if (indexed) {
    for (int i = 0; i < entries; ++i)
      out.palette.colours.push_back({plte[i].red / 255.0, plte[i].green / 255.0, plte[i].blue / 255.0});
  }
  png_destroy_read_struct(&png, &info, nullptr);
  if (!indexed) throw LoadError(path + " is not a palette PNG");
  out.indices = IndexMap{static_cast<int>(height), static_cast<int>(width), std::vector<int>(pixels.begin(), pixels.end())};
  for (int v : out.indices.data)
    if (v >= entries) throw LoadError(path + ": pixel index outside palette");
  return out;
}

// Any PNG, converted to 8-bit RGB by libpng's simplified API.
inline RGBImage read_png(const std::string& path)
{
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) throw LoadError("cannot read " + path + ": " + image.message);
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    png_image_free(&image);
    throw LoadError("cannot decode " + path + ": " + image.message);
  }
  std::vector<double> data(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) data[i] = buf[i] / 255.0;
  return RGBImage(static_cast<int>(image.height), static_cast<int>(image.width), std::move(data));
}

inline void write_png(const std::string& path, const RGBImage& img)
{
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buf(img.data().size());
  for (std::size_t i = 0; i < buf.size(); ++i) buf[i] = to_byte(img.data()[i]);
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw LoadError("cannot write " + path + ": " + image.message);
}

}  // namespace cqlab
