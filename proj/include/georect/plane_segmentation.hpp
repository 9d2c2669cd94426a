#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <vector>

#include "georect/error.hpp"
#include "georect/geometry.hpp"
#include "georect/point_cloud.hpp"

namespace georect {

struct SegmentationConfig {
  double inlier_threshold = 0.02;  // meters
  int max_iterations = 1000;
  double min_inlier_fraction = 0.15;
  double stop_fraction = 0.10;  // of the initially valid points
  int max_planes = 1;
  bool ground_filter_enabled = true;
  Vec3 ground_axis = Vec3(0.0, -1.0, 0.0);  // camera -Y as gravity proxy
  double ground_angle_threshold = 30.0;      // degrees
  std::uint64_t rng_seed = 0;
  double confidence = 0.999;  // adaptive stopping of the hypothesis loop

  void validate() const {
    if (!(inlier_threshold > 0.0)) fail(ErrorCode::InvalidArgument, "inlier_threshold must be positive");
    if (!(stop_fraction > 0.0 && stop_fraction < 1.0)) fail(ErrorCode::InvalidArgument, "stop_fraction must be in (0,1)");
    if (max_planes < 1) fail(ErrorCode::InvalidArgument, "max_planes must be >= 1");
    if (max_iterations < 1) fail(ErrorCode::InvalidArgument, "max_iterations must be >= 1");
    if (!(confidence > 0.0 && confidence < 1.0)) fail(ErrorCode::InvalidArgument, "confidence must be in (0,1)");
  }
};

/// Plane n.X = d with n oriented away from the camera (centroid.n > 0).
struct PlaneModel {
  Vec3 normal = Vec3::UnitZ();
  double distance = 0.0;
  Vec3 centroid = Vec3::Zero();
  std::vector<Vec3> boundary;  // convex hull, CCW seen from the +normal side
  std::vector<std::uint32_t> inlier_indices;

  double signed_distance(const Vec3& p) const { return normal.dot(p) - distance; }
};

inline Vec3 unique_normal(const Vec3& normal, const Vec3& centroid) {
  const double s = centroid.dot(normal);
  if (std::abs(s) < 1e-12) fail(ErrorCode::DegenerateCentroid, "plane passes through the camera origin");
  return s > 0.0 ? normal : Vec3(-normal);
}

inline double angle_between_deg(const Vec3& a, const Vec3& b) {
  const double c = std::clamp(a.normalized().dot(b.normalized()), -1.0, 1.0);
  return std::acos(c) * 180.0 / std::numbers::pi;
}

inline bool is_ground(const PlaneModel& plane, const SegmentationConfig& cfg) {
  const double a = angle_between_deg(plane.normal, cfg.ground_axis);
  return a < cfg.ground_angle_threshold || 180.0 - a < cfg.ground_angle_threshold;
}

/// Orthonormal in-plane frame: origin on the plane, u x v = normal.
struct PlaneBasis {
  Vec3 origin;
  Vec3 u;
  Vec3 v;

  Vec2 to_plane(const Vec3& p) const {
    const Vec3 r = p - origin;
    return {r.dot(u), r.dot(v)};
  }
  Vec3 lift(const Vec2& q) const { return origin + q.x() * u + q.y() * v; }
};

inline PlaneBasis make_plane_basis(const Vec3& normal, double distance, double rotation_rad = 0.0) {
  Eigen::Index axis = 0;
  normal.cwiseAbs().minCoeff(&axis);
  const Vec3 u0 = normal.cross(Vec3::Unit(axis)).normalized();
  const Vec3 v0 = normal.cross(u0);
  const double c = std::cos(rotation_rad), s = std::sin(rotation_rad);
  const Vec3 u = c * u0 + s * v0;
  return {distance * normal, u, normal.cross(u)};
}

/// Andrew's monotone chain; returns indices of hull vertices in CCW order with
/// collinear points dropped.
inline std::vector<std::size_t> convex_hull_2d(std::span<const Vec2> pts) {
  std::vector<std::size_t> order(pts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (pts[a].x() != pts[b].x()) return pts[a].x() < pts[b].x();
    if (pts[a].y() != pts[b].y()) return pts[a].y() < pts[b].y();
    return a < b;
  });
  order.erase(std::unique(order.begin(), order.end(),
                          [&](std::size_t a, std::size_t b) { return pts[a] == pts[b]; }),
              order.end());
  if (order.size() < 3) return order;

  auto turn = [&](std::size_t o, std::size_t a, std::size_t b) {
    return detail::cross2(pts[a] - pts[o], pts[b] - pts[o]);
  };
  std::vector<std::size_t> hull(2 * order.size());
  std::size_t k = 0;
  for (std::size_t i : order) {
    while (k >= 2 && turn(hull[k - 2], hull[k - 1], i) <= 0.0) --k;
    hull[k++] = i;
  }
  const std::size_t lower = k + 1;
  for (auto it = order.rbegin() + 1; it != order.rend(); ++it) {
    while (k >= lower && turn(hull[k - 2], hull[k - 1], *it) <= 0.0) --k;
    hull[k++] = *it;
  }
  hull.resize(k - 1);
  return hull;
}

inline double polygon_area_2d(std::span<const Vec2> poly) {
  double a = 0.0;
  for (std::size_t i = 0; i < poly.size(); ++i) {
    a += detail::cross2(poly[i], poly[(i + 1) % poly.size()]);
  }
  return 0.5 * a;
}

/// Convex hull of the inliers projected onto the plane, lifted back to 3D.
inline std::vector<Vec3> boundary_points(const PlaneModel& plane, const PointCloud& cloud,
                                         double basis_rotation_rad = 0.0) {
  if (plane.inlier_indices.size() < 3) fail(ErrorCode::InsufficientPoints, "need at least 3 inliers");
  const PlaneBasis basis = make_plane_basis(plane.normal, plane.distance, basis_rotation_rad);
  std::vector<Vec2> flat;
  flat.reserve(plane.inlier_indices.size());
  for (auto idx : plane.inlier_indices) flat.push_back(basis.to_plane(cloud.points[idx]));

  const auto hull = convex_hull_2d(flat);
  if (hull.size() < 3) fail(ErrorCode::DegenerateHull, "inliers are collinear in the plane");
  std::vector<Vec2> poly;
  for (auto i : hull) poly.push_back(flat[i]);
  if (std::abs(polygon_area_2d(poly)) < 1e-12) fail(ErrorCode::DegenerateHull, "hull has zero area");

  std::vector<Vec3> out;
  out.reserve(poly.size());
  for (const auto& q : poly) out.push_back(basis.lift(q));
  return out;
}

namespace detail {

struct PlaneFit {
  Vec3 normal;
  Vec3 centroid;
};

inline PlaneFit total_least_squares(const PointCloud& cloud, std::span<const std::uint32_t> idx) {
  Vec3 mean = Vec3::Zero();
  for (auto i : idx) mean += cloud.points[i];
  mean /= static_cast<double>(idx.size());
  Mat3 cov = Mat3::Zero();
  for (auto i : idx) {
    const Vec3 r = cloud.points[i] - mean;
    cov += r * r.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);
  return {eig.eigenvectors().col(0).normalized(), mean};
}

inline void collect_inliers(const PointCloud& cloud, std::span<const std::uint32_t> candidates, const Vec3& n,
                            double d, double threshold, std::vector<std::uint32_t>& out) {
  out.clear();
  for (auto i : candidates) {
    if (std::abs(n.dot(cloud.points[i]) - d) < threshold) out.push_back(i);
  }
}

inline std::size_t count_inliers(const PointCloud& cloud, std::span<const std::uint32_t> candidates, const Vec3& n,
                                 double d, double threshold) {
  std::size_t count = 0;
  for (auto i : candidates) count += std::abs(n.dot(cloud.points[i]) - d) < threshold;
  return count;
}

// RANSAC restricted to the points flagged in `active`.
inline PlaneModel ransac_on(const PointCloud& cloud, std::span<const std::uint8_t> active,
                            const SegmentationConfig& cfg, std::mt19937_64& rng) {
  std::vector<std::uint32_t> candidates;
  for (std::size_t i = 0; i < active.size(); ++i) {
    if (active[i]) candidates.push_back(static_cast<std::uint32_t>(i));
  }
  const std::size_t n = candidates.size();
  if (n < 3) fail(ErrorCode::InsufficientPoints, "fewer than 3 valid points");

  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t best_count = 0;
  Vec3 best_normal = Vec3::Zero();
  double best_d = 0.0;

  double needed = static_cast<double>(cfg.max_iterations);
  for (int it = 0; it < cfg.max_iterations && it < needed; ++it) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    std::size_t c = pick(rng);
    if (a == b || a == c || b == c) continue;
    const Vec3& p0 = cloud.points[candidates[a]];
    const Vec3 cr = (cloud.points[candidates[b]] - p0).cross(cloud.points[candidates[c]] - p0);
    const double len = cr.norm();
    if (len < 1e-12) continue;
    const Vec3 normal = cr / len;
    const double d = normal.dot(p0);
    const std::size_t count = count_inliers(cloud, candidates, normal, d, cfg.inlier_threshold);
    if (count > best_count) {
      best_count = count;
      best_normal = normal;
      best_d = d;
      const double w = static_cast<double>(count) / static_cast<double>(n);
      const double miss = 1.0 - w * w * w;
      if (miss <= 0.0) {
        needed = 0.0;
      } else if (miss < 1.0) {
        needed = std::log(1.0 - cfg.confidence) / std::log(miss);
      }
    }
  }

  if (best_count < 3 || static_cast<double>(best_count) < cfg.min_inlier_fraction * static_cast<double>(n)) {
    fail(ErrorCode::NoConsensus, "no plane reaches the minimum inlier fraction");
  }

  // Two refits on the consensus set; the final inlier set is taken against the
  // last fitted plane so every reported inlier honours the threshold.
  std::vector<std::uint32_t> inliers;
  collect_inliers(cloud, candidates, best_normal, best_d, cfg.inlier_threshold, inliers);
  Vec3 normal = best_normal;
  double d = best_d;
  for (int round = 0; round < 2 && inliers.size() >= 3; ++round) {
    const PlaneFit fit = total_least_squares(cloud, inliers);
    normal = fit.normal;
    d = normal.dot(fit.centroid);
    std::vector<std::uint32_t> next;
    collect_inliers(cloud, candidates, normal, d, cfg.inlier_threshold, next);
    if (next.size() < 3) break;
    inliers = std::move(next);
  }
  if (static_cast<double>(inliers.size()) < cfg.min_inlier_fraction * static_cast<double>(n)) {
    fail(ErrorCode::NoConsensus, "refit lost consensus");
  }

  Vec3 mean = Vec3::Zero();
  for (auto i : inliers) mean += cloud.points[i];
  mean /= static_cast<double>(inliers.size());

  PlaneModel model;
  model.centroid = mean - (normal.dot(mean) - d) * normal;
  model.normal = unique_normal(normal, model.centroid);
  model.distance = model.normal.dot(model.centroid);
  model.inlier_indices = std::move(inliers);
  model.boundary = boundary_points(model, cloud);
  return model;
}

}  // namespace detail

inline PlaneModel ransac_plane(const PointCloud& cloud, const SegmentationConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.rng_seed);
  return detail::ransac_on(cloud, cloud.valid, cfg, rng);
}

/// Sequential RANSAC: peel off planes until the remaining valid points drop
/// below stop_fraction of the initial valid count, max_planes is reached, or
/// consensus fails. Result is sorted by inlier count, largest first.
inline std::vector<PlaneModel> extract_planes(const PointCloud& cloud, const SegmentationConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.rng_seed);
  std::vector<std::uint8_t> active = cloud.valid;
  const auto initial = static_cast<double>(cloud.valid_count());
  std::size_t remaining = static_cast<std::size_t>(initial);

  std::vector<PlaneModel> planes;
  while (static_cast<int>(planes.size()) < cfg.max_planes) {
    PlaneModel plane;
    try {
      plane = detail::ransac_on(cloud, active, cfg, rng);
    } catch (const Error& e) {
      if (planes.empty() && e.code() == ErrorCode::InsufficientPoints) throw;
      break;
    }
    for (auto i : plane.inlier_indices) active[i] = 0;
    remaining -= plane.inlier_indices.size();
    planes.push_back(std::move(plane));
    if (static_cast<double>(remaining) < cfg.stop_fraction * initial) break;
  }

  if (cfg.ground_filter_enabled) {
    std::erase_if(planes, [&](const PlaneModel& p) { return is_ground(p, cfg); });
  }
  std::stable_sort(planes.begin(), planes.end(), [](const PlaneModel& a, const PlaneModel& b) {
    return a.inlier_indices.size() > b.inlier_indices.size();
  });
  return planes;
}

}  // namespace georect
