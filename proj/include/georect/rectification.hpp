#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include "georect/error.hpp"
#include "georect/geometry.hpp"
#include "georect/image.hpp"
#include "georect/plane_segmentation.hpp"
#include "georect/point_cloud.hpp"

namespace georect {

/// Virtual camera looking straight at a plane. `pose` maps virtual-camera
/// coordinates into the original camera frame.
struct VirtualViewpoint {
  RigidTransform pose;
  double standoff = 1.2;
};

/// Axis-aligned bounds of the plane reprojected into the virtual view; the
/// corner is integral (floored) and the extents are rounded outward.
struct PlaneBBox {
  double x_top_left = 0.0;
  double y_top_left = 0.0;
  int width = 0;
  int height = 0;
};

struct TileSpec {
  int plane_index = 0;
  int i = 1;  // row index, steps along y by out_height / 2
  int j = 1;  // column index, steps along x by out_width / 2
  Homography homography;  // original pixels -> tile pixels
  int out_height = 0;
  int out_width = 0;
  int source_width = 0;
  int source_height = 0;
};

struct RectifiedTile {
  RgbImage image;
  Mask mask;
  TileSpec spec;

  double valid_fraction() const {
    if (mask.empty()) return 0.0;
    std::size_t n = 0;
    for (auto v : mask.data()) n += v != 0;
    return static_cast<double>(n) / static_cast<double>(mask.pixel_count());
  }
};

inline VirtualViewpoint canonical_viewpoint(const PlaneModel& plane, double standoff,
                                            const RigidTransform& original_axes = RigidTransform::identity()) {
  if (!(standoff > 0.0)) fail(ErrorCode::InvalidArgument, "standoff must be positive");
  const Vec3& n = plane.normal;
  const double cos_limit = std::cos(1.0 * std::numbers::pi / 180.0);

  const Vec3 x1 = original_axes.rotation().col(0);
  const Vec3 y1 = original_axes.rotation().col(1);
  Vec3 x_axis, y_axis;
  if (std::abs(x1.dot(n)) < cos_limit) {
    x_axis = (x1 - x1.dot(n) * n).normalized();
    y_axis = n.cross(x_axis);
  } else if (std::abs(y1.dot(n)) < cos_limit) {
    y_axis = (y1 - y1.dot(n) * n).normalized();
    x_axis = y_axis.cross(n);
  } else {
    fail(ErrorCode::DegenerateUpAxis, "both camera x and y axes are parallel to the plane normal");
  }

  Mat3 r;
  r.col(0) = x_axis;
  r.col(1) = y_axis;
  r.col(2) = n;
  // Re-orthonormalize against round-off before the strict RigidTransform check.
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Mat3 clean = svd.matrixU() * svd.matrixV().transpose();
  return {RigidTransform(clean, plane.centroid - standoff * n), standoff};
}

namespace detail {

inline Vec2 project_or(const CameraIntrinsics& k, const Vec3& p, ErrorCode code, const char* what) {
  if (p.z() <= kMinDepth) fail(code, what);
  return project(k, p);
}

}  // namespace detail

/// DLT on four plane points seen from the original and the virtual camera
/// (both with intrinsics `k`). Maps original pixels to virtual-view pixels.
inline Homography base_homography(const VirtualViewpoint& vp, const CameraIntrinsics& k, const PlaneModel& plane) {
  constexpr double kHalfSide = 0.25;
  const Vec3 u = vp.pose.rotation().col(0);
  const Vec3 v = vp.pose.rotation().col(1);
  const RigidTransform to_virtual = vp.pose.inverse();

  std::vector<Correspondence> corr;
  for (const auto& [a, b] : std::array<std::pair<double, double>, 4>{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}}) {
    const Vec3 x = plane.centroid + kHalfSide * a * u + kHalfSide * b * v;
    corr.emplace_back(detail::project_or(k, x, ErrorCode::PlaneBehindCamera, "plane point behind original camera"),
                      detail::project_or(k, to_virtual.apply(x), ErrorCode::PlaneBehindCamera,
                                         "plane point behind virtual camera"));
  }
  return dlt_homography(corr);
}

inline PlaneBBox plane_bbox_in_virtual(const PlaneModel& plane, const VirtualViewpoint& vp, const CameraIntrinsics& k) {
  if (plane.boundary.empty()) fail(ErrorCode::InvalidArgument, "plane has no boundary");
  const RigidTransform to_virtual = vp.pose.inverse();
  double min_x = std::numeric_limits<double>::infinity(), min_y = min_x;
  double max_x = -min_x, max_y = -min_x;
  for (const auto& p : plane.boundary) {
    const Vec2 q = detail::project_or(k, to_virtual.apply(p), ErrorCode::BoundaryBehindCamera,
                                      "boundary point behind virtual camera");
    min_x = std::min(min_x, q.x());
    min_y = std::min(min_y, q.y());
    max_x = std::max(max_x, q.x());
    max_y = std::max(max_y, q.y());
  }
  // Tolerance keeps exact-integer extents from being bumped by round-off.
  constexpr double eps = 1e-9;
  PlaneBBox box;
  box.x_top_left = std::floor(min_x + eps);
  box.y_top_left = std::floor(min_y + eps);
  box.width = std::max(1, static_cast<int>(std::ceil(max_x - eps) - box.x_top_left));
  box.height = std::max(1, static_cast<int>(std::ceil(max_y - eps) - box.y_top_left));
  return box;
}

inline int tile_count_along(int bbox_extent, int tile_extent) {
  const int c = (bbox_extent + tile_extent - 1) / tile_extent;
  return 2 * c - 1;
}

/// Half-overlapping windows over the plane bbox. Tile (i, j) maps a virtual
/// pixel p to p - top_left - ((j-1) W/2, (i-1) H/2).
inline std::vector<TileSpec> sliding_homographies(const Homography& base, const PlaneBBox& bbox, int out_h, int out_w,
                                                  int source_w = 0, int source_h = 0, int plane_index = 0) {
  if (out_h <= 0 || out_w <= 0) fail(ErrorCode::InvalidArgument, "tile size must be positive");
  if (bbox.width <= 0 || bbox.height <= 0) fail(ErrorCode::InvalidArgument, "bbox must be non-empty");
  const int rows = tile_count_along(bbox.height, out_h);
  const int cols = tile_count_along(bbox.width, out_w);
  std::vector<TileSpec> tiles;
  tiles.reserve(static_cast<std::size_t>(rows) * cols);
  for (int i = 1; i <= rows; ++i) {
    for (int j = 1; j <= cols; ++j) {
      const double tx = -bbox.x_top_left - 0.5 * out_w * (j - 1);
      const double ty = -bbox.y_top_left - 0.5 * out_h * (i - 1);
      TileSpec spec;
      spec.plane_index = plane_index;
      spec.i = i;
      spec.j = j;
      spec.homography = Homography::translation(tx, ty) * base;
      spec.out_height = out_h;
      spec.out_width = out_w;
      spec.source_width = source_w;
      spec.source_height = source_h;
      tiles.push_back(std::move(spec));
    }
  }
  return tiles;
}

/// Inverse warping with bilinear sampling; output pixels whose preimage falls
/// outside the source are zero and masked invalid.
inline RectifiedTile warp(const RgbImage& image, const TileSpec& spec) {
  Mat3 inv;
  bool invertible = false;
  spec.homography.matrix().computeInverseWithCheck(inv, invertible, 1e-12);
  if (!invertible) fail(ErrorCode::SingularHomography, "tile homography is not invertible");

  RectifiedTile tile;
  tile.spec = spec;
  tile.image = RgbImage(spec.out_width, spec.out_height, image.channels(), 0);
  tile.mask = make_mask(spec.out_width, spec.out_height, false);
  const double max_x = image.width() - 1;
  const double max_y = image.height() - 1;
  const int channels = image.channels();
  // Preimages on the far side of the horizon come back with the opposite
  // homogeneous sign to the source image center.
  const Vec3 center = spec.homography.matrix() * Vec3(0.5 * max_x, 0.5 * max_y, 1.0);
  const double side = center.z() >= 0.0 ? 1.0 : -1.0;

  for (int v = 0; v < spec.out_height; ++v) {
    // Row start and per-column increment of the homogeneous preimage.
    const Vec3 row0 = inv * Vec3(0.0, v, 1.0);
    const Vec3 step = inv.col(0);
    for (int u = 0; u < spec.out_width; ++u) {
      const Vec3 q = row0 + static_cast<double>(u) * step;
      if (std::abs(q.z()) < 1e-12) continue;
      const double sx = q.x() / q.z();
      const double sy = q.y() / q.z();
      if (!(sx >= 0.0 && sy >= 0.0 && sx <= max_x && sy <= max_y) || side * q.z() < 0.0) continue;
      for (int c = 0; c < channels; ++c) tile.image.at(u, v, c) = saturate_u8(sample_bilinear(image, sx, sy, c));
      tile.mask.at(u, v) = 1;
    }
  }
  return tile;
}

struct RectifyConfig {
  SegmentationConfig segmentation;
  double standoff = 1.2;
  int tile_height = 0;  // 0: same as the source image
  int tile_width = 0;
  double min_valid_fraction = 0.05;
};

struct RectifyResult {
  std::vector<PlaneModel> planes;
  std::vector<TileSpec> specs;  // every tile generated, including dropped ones
  std::vector<RectifiedTile> tiles;
};

/// Segmentation -> viewpoint -> homography -> bbox -> sliding windows -> warp.
inline RectifyResult rectify_frame(const RgbImage& rgb, const PointCloud& cloud, const CameraIntrinsics& k,
                                   const RectifyConfig& cfg) {
  RectifyResult out;
  out.planes = extract_planes(cloud, cfg.segmentation);
  if (out.planes.empty()) fail(ErrorCode::NoPlaneFound, "no plane reached consensus");

  const int out_h = cfg.tile_height > 0 ? cfg.tile_height : rgb.height();
  const int out_w = cfg.tile_width > 0 ? cfg.tile_width : rgb.width();
  for (std::size_t p = 0; p < out.planes.size(); ++p) {
    const PlaneModel& plane = out.planes[p];
    const VirtualViewpoint vp = canonical_viewpoint(plane, cfg.standoff);
    const Homography base = base_homography(vp, k, plane);
    const PlaneBBox bbox = plane_bbox_in_virtual(plane, vp, k);
    for (auto& spec : sliding_homographies(base, bbox, out_h, out_w, rgb.width(), rgb.height(), static_cast<int>(p))) {
      RectifiedTile tile = warp(rgb, spec);
      out.specs.push_back(spec);
      if (tile.valid_fraction() >= cfg.min_valid_fraction) out.tiles.push_back(std::move(tile));
    }
  }
  return out;
}

}  // namespace georect
