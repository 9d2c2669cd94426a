#pragma once

#include <cstdint>
#include <vector>

#include "georect/geometry.hpp"

namespace georect {

/// Organized cloud: points[i] corresponds to pixel (i % width, i / width).
struct PointCloud {
  int width = 0;
  int height = 0;
  std::vector<Vec3> points;
  std::vector<std::uint8_t> valid;

  PointCloud() = default;
  PointCloud(int w, int h) : width(w), height(h), points(static_cast<std::size_t>(w) * h, Vec3::Zero()), valid(points.size(), 0) {}

  /// Unorganized cloud (height 1) with every point valid.
  static PointCloud from_points(std::vector<Vec3> pts) {
    PointCloud c;
    c.width = static_cast<int>(pts.size());
    c.height = 1;
    c.valid.assign(pts.size(), 1);
    c.points = std::move(pts);
    return c;
  }

  std::size_t size() const { return points.size(); }

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid) n += v != 0;
    return n;
  }
};

}  // namespace georect
