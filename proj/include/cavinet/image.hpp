#pragma once

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <filesystem>
#include <string>
#include <vector>

#include "cavinet/common.hpp"
#include "cavinet/tensor.hpp"

namespace cavinet {

// Images are (C,H,W) tensors with values in [0,1], C = 1 (grayscale) or 3
// (RGB). PNG files are written 8-bit; reading always yields 3 channels.

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

inline unsigned char to_byte(double v) {
  long b = std::lround(v * 255.0);
  if (b < 0) b = 0;
  if (b > 255) b = 255;
  return static_cast<unsigned char>(b);
}

}  // namespace detail

template <class Scalar>
void write_png(const Tensor<Scalar>& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3))
    raise<ShapeError>("write_png: expected (1|3,H,W), got ", shape_str(image.shape()));
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);

  std::unique_ptr<std::FILE, detail::FileCloser> fp(
      std::fopen(path.string().c_str(), "wb"));
  if (!fp) raise<IoError>("write_png: cannot open '", path.string(), "'");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                            nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    raise<IoError>("write_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    raise<IoError>("write_png: failure while writing '", path.string(), "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               c == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<unsigned char> row(static_cast<std::size_t>(w * c));
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x)
      for (Index ch = 0; ch < c; ++ch)
        row[static_cast<std::size_t>(x * c + ch)] =
            detail::to_byte(static_cast<double>(image(ch, y, x)));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

template <class Scalar>
Tensor<Scalar> read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, detail::FileCloser> fp(
      std::fopen(path.string().c_str(), "rb"));
  if (!fp) raise<IoError>("read_png: cannot open '", path.string(), "'");

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr,
                                           nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise<IoError>("read_png: libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise<IoError>("read_png: failure while reading '", path.string(), "'");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);

  const Index h = static_cast<Index>(png_get_image_height(png, info));
  const Index w = static_cast<Index>(png_get_image_width(png, info));
  if (png_get_channels(png, info) != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    raise<IoError>("read_png: unexpected channel count in '", path.string(), "'");
  }

  std::vector<unsigned char> row(static_cast<std::size_t>(w * 3));
  Tensor<Scalar> image({3, h, w});
  for (Index y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (Index x = 0; x < w; ++x)
      for (Index ch = 0; ch < 3; ++ch)
        image(ch, y, x) =
            static_cast<Scalar>(row[static_cast<std::size_t>(x * 3 + ch)] / 255.0);
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return image;
}

// ---------------------------------------------------------------------------
// resampling helpers shared by augmentation and the synthetic generator

template <class Scalar>
double bilinear_sample(const Scalar* plane, Index h, Index w, double y, double x) {
  // edge replication outside the grid
  auto clamp = [](double v, double lo, double hi) {
    return v < lo ? lo : (v > hi ? hi : v);
  };
  y = clamp(y, 0.0, static_cast<double>(h - 1));
  x = clamp(x, 0.0, static_cast<double>(w - 1));
  Index y0 = static_cast<Index>(std::floor(y));
  Index x0 = static_cast<Index>(std::floor(x));
  Index y1 = std::min(y0 + 1, h - 1);
  Index x1 = std::min(x0 + 1, w - 1);
  double fy = y - static_cast<double>(y0);
  double fx = x - static_cast<double>(x0);
  double v00 = static_cast<double>(plane[y0 * w + x0]);
  double v01 = static_cast<double>(plane[y0 * w + x1]);
  double v10 = static_cast<double>(plane[y1 * w + x0]);
  double v11 = static_cast<double>(plane[y1 * w + x1]);
  return (1 - fy) * ((1 - fx) * v00 + fx * v01) + fy * ((1 - fx) * v10 + fx * v11);
}

// Inverse-mapped affine warp: for each output pixel (x,y), samples the source
// at (a*x + b*y + tx, c*x + d*y + ty) around the image center.
template <class Scalar>
Tensor<Scalar> warp_affine(const Tensor<Scalar>& image, double a, double b, double c,
                           double d, double tx, double ty) {
  const Index ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double cy = (static_cast<double>(h) - 1) / 2.0;
  const double cx = (static_cast<double>(w) - 1) / 2.0;
  Tensor<Scalar> out(image.shape());
  for (Index k = 0; k < ch; ++k) {
    const Scalar* src = image.data() + k * h * w;
    Scalar* dst = out.data() + k * h * w;
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        double px = static_cast<double>(x) - cx;
        double py = static_cast<double>(y) - cy;
        double sx = a * px + b * py + tx + cx;
        double sy = c * px + d * py + ty + cy;
        dst[y * w + x] = static_cast<Scalar>(bilinear_sample(src, h, w, sy, sx));
      }
    }
  }
  return out;
}

// Dense displacement-field warp; dx/dy are (H,W) offsets in pixels.
template <class Scalar>
Tensor<Scalar> warp_field(const Tensor<Scalar>& image, const Tensor<Scalar>& dx,
                          const Tensor<Scalar>& dy) {
  const Index ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  if (dx.shape() != Shape{h, w} || dy.shape() != Shape{h, w})
    raise<ShapeError>("warp_field: field shape mismatch");
  Tensor<Scalar> out(image.shape());
  for (Index k = 0; k < ch; ++k) {
    const Scalar* src = image.data() + k * h * w;
    Scalar* dst = out.data() + k * h * w;
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x)
        dst[y * w + x] = static_cast<Scalar>(
            bilinear_sample(src, h, w, static_cast<double>(y) + dy(y, x),
                            static_cast<double>(x) + dx(y, x)));
  }
  return out;
}

template <class Scalar>
Tensor<Scalar> flip_horizontal(const Tensor<Scalar>& image) {
  const Index ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  Tensor<Scalar> out(image.shape());
  for (Index k = 0; k < ch; ++k)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) out(k, y, x) = image(k, y, w - 1 - x);
  return out;
}

// ---------------------------------------------------------------------------
// montage assembly and a tiny 3x5 digit font for score annotations

template <class Scalar>
Tensor<Scalar> hstack_with_separator(const Tensor<Scalar>& left,
                                     const Tensor<Scalar>& right, Index sep_width = 4,
                                     double sep_value = 0.5) {
  if (left.shape() != right.shape() || left.rank() != 3)
    raise<ShapeError>("montage: images must share shape, got ",
                      shape_str(left.shape()), " and ", shape_str(right.shape()));
  const Index c = left.dim(0), h = left.dim(1), w = left.dim(2);
  Tensor<Scalar> out({c, h, 2 * w + sep_width});
  for (Index k = 0; k < c; ++k)
    for (Index y = 0; y < h; ++y) {
      for (Index x = 0; x < w; ++x) {
        out(k, y, x) = left(k, y, x);
        out(k, y, w + sep_width + x) = right(k, y, x);
      }
      for (Index x = 0; x < sep_width; ++x)
        out(k, y, w + x) = static_cast<Scalar>(sep_value);
    }
  return out;
}

namespace detail {
// 3x5 glyphs for '0'-'9' and '.', row-major bits.
inline const std::uint16_t* digit_glyphs() {
  static const std::uint16_t glyphs[11] = {
      0b111101101101111,  // 0
      0b010110010010111,  // 1
      0b111001111100111,  // 2
      0b111001111001111,  // 3
      0b101101111001001,  // 4
      0b111100111001111,  // 5
      0b111100111101111,  // 6
      0b111001001001001,  // 7
      0b111101111101111,  // 8
      0b111101111001111,  // 9
      0b000000000000010,  // .
  };
  return glyphs;
}
}  // namespace detail

// Stamps numeric text (digits and '.') onto the image, top-left at (x0,y0).
template <class Scalar>
void stamp_text(Tensor<Scalar>& image, const std::string& text, Index x0, Index y0,
                Index scale = 1, double value = 1.0) {
  const Index c = image.dim(0), h = image.dim(1), w = image.dim(2);
  Index cursor = x0;
  for (char chr : text) {
    int gi = chr == '.' ? 10 : (chr >= '0' && chr <= '9' ? chr - '0' : -1);
    if (gi < 0) {
      cursor += 4 * scale;
      continue;
    }
    std::uint16_t bits = detail::digit_glyphs()[gi];
    for (Index ry = 0; ry < 5; ++ry)
      for (Index rx = 0; rx < 3; ++rx)
        if (bits & (1 << (14 - (ry * 3 + rx))))
          for (Index sy = 0; sy < scale; ++sy)
            for (Index sx = 0; sx < scale; ++sx) {
              Index py = y0 + ry * scale + sy;
              Index px = cursor + rx * scale + sx;
              if (py >= 0 && py < h && px >= 0 && px < w)
                for (Index k = 0; k < c; ++k)
                  image(k, py, px) = static_cast<Scalar>(value);
            }
    cursor += 4 * scale;
  }
}

}  // namespace cavinet
