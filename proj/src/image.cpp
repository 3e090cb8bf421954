#include "idol/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <vector>

namespace idol {

TensorF resize_bilinear(const TensorF& img, int out_h, int out_w) {
  if (img.ndim() != 3) throw ShapeError("resize_bilinear expects [C, H, W]");
  if (out_h < 1 || out_w < 1) throw PreconditionError("output size must be positive");
  const int c = img.shape[0], h = img.shape[1], w = img.shape[2];
  TensorF out({c, out_h, out_w});
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int oy = 0; oy < out_h; ++oy) {
    const double fy = (oy + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    const double wy = fy - y0;
    const int y1 = std::min(std::max(y0 + 1, 0), h - 1);
    y0 = std::min(std::max(y0, 0), h - 1);
    for (int ox = 0; ox < out_w; ++ox) {
      const double fx = (ox + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      const double wx = fx - x0;
      const int x1 = std::min(std::max(x0 + 1, 0), w - 1);
      x0 = std::min(std::max(x0, 0), w - 1);
      for (int ch = 0; ch < c; ++ch) {
        const float* p = img.data.data() + static_cast<int64_t>(ch) * h * w;
        const double top = p[y0 * w + x0] * (1.0 - wx) + p[y0 * w + x1] * wx;
        const double bot = p[y1 * w + x0] * (1.0 - wx) + p[y1 * w + x1] * wx;
        out.data[(static_cast<int64_t>(ch) * out_h + oy) * out_w + ox] =
            static_cast<float>(top * (1.0 - wy) + bot * wy);
      }
    }
  }
  return out;
}

namespace {

struct FileCloser {
  std::FILE* f = nullptr;
  ~FileCloser() {
    if (f) std::fclose(f);
  }
};

}  // namespace

void write_png(const std::string& path, const TensorF& img) {
  if (img.ndim() != 3 || (img.shape[0] != 1 && img.shape[0] != 3))
    throw ShapeError("write_png expects [1|3, H, W]");
  const int c = img.shape[0], h = img.shape[1], w = img.shape[2];

  FileCloser fc;
  fc.f = std::fopen(path.c_str(), "wb");
  if (!fc.f) throw IoError("cannot open for writing: " + path);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  std::vector<unsigned char> row(static_cast<size_t>(w) * c);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("png write failed: " + path);
  }
  png_init_io(png, fc.f);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch)
        row[static_cast<size_t>(x) * c + ch] = to_u8(img.data[ch * plane + y * w + x]);
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

TensorF read_png(const std::string& path) {
  FileCloser fc;
  fc.f = std::fopen(path.c_str(), "rb");
  if (!fc.f) throw IoError("cannot open for reading: " + path);

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("png read failed: " + path);
  }
  png_init_io(png, fc.f);
  png_read_info(png, info);

  png_set_strip_16(png);
  png_set_packing(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  const int channels = static_cast<int>(png_get_channels(png, info));
  if (channels != 1 && channels != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unsupported channel count in " + path);
  }
  std::vector<unsigned char> raster(static_cast<size_t>(h) * w * channels);
  std::vector<png_bytep> rows(static_cast<size_t>(h));
  for (int y = 0; y < h; ++y) rows[y] = raster.data() + static_cast<size_t>(y) * w * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  TensorF out({channels, h, w});
  const int64_t plane = static_cast<int64_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < channels; ++ch)
        out.data[ch * plane + y * w + x] =
            from_u8(raster[(static_cast<size_t>(y) * w + x) * channels + ch]);
  return out;
}

}  // namespace idol
