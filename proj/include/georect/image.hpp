#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "georect/error.hpp"

namespace georect {

/// Interleaved row-major raster.
template <typename T>
class Image {
 public:
  using value_type = T;

  Image() = default;
  Image(int width, int height, int channels, T fill = T{})
      : width_(width), height_(height), channels_(channels),
        data_(static_cast<std::size_t>(width) * height * channels, fill) {
    if (width < 0 || height < 0 || channels <= 0) fail(ErrorCode::InvalidArgument, "bad image dimensions");
  }

  int width() const { return width_; }
  int height() const { return height_; }
  int channels() const { return channels_; }
  bool empty() const { return data_.empty(); }
  std::size_t pixel_count() const { return static_cast<std::size_t>(width_) * height_; }

  T& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
  const T& at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width_ && y < height_; }

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(int x, int y, int c) const {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 1;
  std::vector<T> data_;
};

using RgbImage = Image<std::uint8_t>;    // 3 channels
using DepthImage = Image<std::uint16_t>; // millimeters, 0 = invalid
using Mask = Image<std::uint8_t>;        // 1 channel, nonzero = valid
using GrayImage = Image<float>;

inline RgbImage make_rgb(int width, int height, std::uint8_t fill = 0) { return RgbImage(width, height, 3, fill); }
inline Mask make_mask(int width, int height, bool valid) { return Mask(width, height, 1, valid ? 1 : 0); }

/// Bilinear sample at continuous pixel-center coordinates; the caller checks
/// 0 <= x <= w-1 and 0 <= y <= h-1.
template <typename T>
double sample_bilinear(const Image<T>& img, double x, double y, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0;
  const double fy = y - y0;
  const int x1 = x0 + 1 < img.width() ? x0 + 1 : x0;
  const int y1 = y0 + 1 < img.height() ? y0 + 1 : y0;
  const double top = (1.0 - fx) * img.at(x0, y0, c) + fx * img.at(x1, y0, c);
  const double bottom = (1.0 - fx) * img.at(x0, y1, c) + fx * img.at(x1, y1, c);
  return (1.0 - fy) * top + fy * bottom;
}

inline std::uint8_t saturate_u8(double v) {
  const double r = std::round(v);
  return static_cast<std::uint8_t>(r < 0.0 ? 0.0 : (r > 255.0 ? 255.0 : r));
}

inline GrayImage to_gray(const RgbImage& rgb) {
  GrayImage g(rgb.width(), rgb.height(), 1);
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x) {
      g.at(x, y) = 0.299f * rgb.at(x, y, 0) + 0.587f * rgb.at(x, y, 1) + 0.114f * rgb.at(x, y, 2);
    }
  }
  return g;
}

}  // namespace georect
