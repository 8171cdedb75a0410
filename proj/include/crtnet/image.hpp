#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "crtnet/tensor.hpp"

namespace crtnet {

/// Axis-aligned box in full-image pixel coordinates, top-left origin.
struct BoundingBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  int area() const { return w * h; }
  int right() const { return x + w; }    // exclusive
  int bottom() const { return y + h; }   // exclusive
  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  double mid_x() const { return x + w / 2.0; }
  double mid_y() const { return y + h / 2.0; }

  /// Throws InputError when the box is degenerate or leaves a width×height image.
  void validate(int width, int height) const;

  bool operator==(const BoundingBox&) const = default;
};

/// Smallest box covering both.
BoundingBox box_union(const BoundingBox& a, const BoundingBox& b);

using Rgb = std::array<double, 3>;

/// Planar RGB raster (3×H×W) with channel values in [0, 1].
class Image {
 public:
  Image() = default;
  Image(int width, int height, Rgb fill = {0.0, 0.0, 0.0});

  int width() const { return width_; }
  int height() const { return height_; }

  double& at(int c, int y, int x) { return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x]; }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * height_ + y) * width_ + x];
  }
  Rgb pixel(int x, int y) const { return {at(0, y, x), at(1, y, x), at(2, y, x)}; }
  void set_pixel(int x, int y, const Rgb& rgb);
  /// Fills the intersection of the rectangle with the image.
  void fill_rect(int x, int y, int w, int h, const Rgb& rgb);

  const std::vector<double>& data() const { return data_; }
  std::vector<double>& data() { return data_; }

  /// 3×H×W tensor without gradient tracking.
  Tensor to_tensor() const;
  static Image from_tensor(const Tensor& t);

  bool operator==(const Image&) const = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> data_;
};

/// Bilinear resize of the window [x0, x0+w) × [y0, y0+h) of a 3×H×W tensor to
/// 3×out_h×out_w. Uses pixel-centre alignment: source coordinate
/// (dst + 0.5)·(in/out) − 0.5, clamped to the window.
Tensor crop_resize_bilinear(const Tensor& image, const BoundingBox& window, int out_h, int out_w);

/// Binary PPM (P6, maxval 255). Channel values are rounded to the nearest of
/// 256 levels on write and divided by 255 on read.
std::string encode_ppm(const Image& image);
Image decode_ppm(const std::string& bytes);
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// Image after an 8-bit round trip (what a PPM reader returns).
Image quantize8(const Image& image);

}  // namespace crtnet
