#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "georect/error.hpp"

namespace georect {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics. Pixel coordinates put integer values at pixel centers.
struct CameraIntrinsics {
  double fx = 0.0;
  double fy = 0.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 0;
  int height = 0;

  static CameraIntrinsics make(double fx, double fy, double cx, double cy, int width, int height) {
    CameraIntrinsics k{fx, fy, cx, cy, width, height};
    k.validate();
    return k;
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) fail(ErrorCode::InvalidIntrinsics, "focal lengths must be positive");
    if (width <= 0 || height <= 0) fail(ErrorCode::InvalidIntrinsics, "image size must be positive");
    if (!(cx > 0.0 && cx < width) || !(cy > 0.0 && cy < height)) {
      fail(ErrorCode::InvalidIntrinsics, "principal point outside the image");
    }
  }

  Mat3 matrix() const {
    Mat3 k;
    k << fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0;
    return k;
  }

  Mat3 inverse_matrix() const {
    Mat3 k;
    k << 1.0 / fx, 0.0, -cx / fx, 0.0, 1.0 / fy, -cy / fy, 0.0, 0.0, 1.0;
    return k;
  }

  bool operator==(const CameraIntrinsics&) const = default;
};

inline constexpr double kMinDepth = 1e-9;

inline Vec2 project(const CameraIntrinsics& k, const Vec3& p) {
  if (p.z() <= kMinDepth) fail(ErrorCode::NonPositiveDepth, "point is not in front of the camera");
  return {k.fx * p.x() / p.z() + k.cx, k.fy * p.y() / p.z() + k.cy};
}

inline Vec3 unproject(const CameraIntrinsics& k, const Vec2& px, double depth) {
  if (depth <= kMinDepth) fail(ErrorCode::NonPositiveDepth, "depth must be positive");
  return {(px.x() - k.cx) * depth / k.fx, (px.y() - k.cy) * depth / k.fy, depth};
}

/// Proper rigid motion x -> R x + t.
class RigidTransform {
 public:
  RigidTransform() : rotation_(Mat3::Identity()), translation_(Vec3::Zero()) {}

  RigidTransform(const Mat3& rotation, const Vec3& translation)
      : rotation_(rotation), translation_(translation) {
    const double ortho_err = (rotation_.transpose() * rotation_ - Mat3::Identity()).norm();
    if (!(ortho_err < 1e-9) || rotation_.determinant() < 0.0) {
      fail(ErrorCode::InvalidRotation, "rotation must be orthonormal with det +1");
    }
  }

  static RigidTransform identity() { return {}; }

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }

  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }

  /// (this * other)(x) = this(other(x)).
  RigidTransform operator*(const RigidTransform& other) const {
    RigidTransform out;
    out.rotation_ = rotation_ * other.rotation_;
    out.translation_ = rotation_ * other.translation_ + translation_;
    return out;
  }

  RigidTransform inverse() const {
    RigidTransform out;
    out.rotation_ = rotation_.transpose();
    out.translation_ = -(out.rotation_ * translation_);
    return out;
  }

  Eigen::Matrix4d matrix() const {
    Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
    m.topLeftCorner<3, 3>() = rotation_;
    m.topRightCorner<3, 1>() = translation_;
    return m;
  }

 private:
  Mat3 rotation_;
  Vec3 translation_;
};

inline constexpr double kHomographyDetThreshold = 1e-9;

/// 3x3 projective map, stored normalized: bottom-right entry 1 when it is not
/// vanishing, otherwise unit Frobenius norm with the first nonzero entry positive.
class Homography {
 public:
  Homography() : m_(Mat3::Identity()) {}

  /// Normalizes and rejects (near-)singular matrices.
  explicit Homography(const Mat3& m) : m_(normalized(m)) {
    if (!(std::abs(m_.determinant()) >= kHomographyDetThreshold)) {
      fail(ErrorCode::DegenerateHomography, "homography is singular or near-singular");
    }
  }

  static Homography identity() { return {}; }

  static Homography translation(double tx, double ty) {
    Mat3 m = Mat3::Identity();
    m(0, 2) = tx;
    m(1, 2) = ty;
    return Homography(m);
  }

  static Mat3 normalized(const Mat3& m) {
    if (std::abs(m(2, 2)) > 1e-12) return m / m(2, 2);
    const double norm = m.norm();
    if (norm == 0.0) fail(ErrorCode::DegenerateHomography, "zero matrix");
    Mat3 out = m / norm;
    for (int i = 0; i < 9; ++i) {
      const double v = out(i / 3, i % 3);
      if (v != 0.0) {
        if (v < 0.0) out = -out;
        break;
      }
    }
    return out;
  }

  const Mat3& matrix() const { return m_; }

  Homography inverse() const { return Homography(m_.inverse()); }

  /// (this * other) applies `other` first.
  Homography operator*(const Homography& other) const { return Homography(m_ * other.m_); }

 private:
  Mat3 m_;
};

inline Vec2 apply_homography(const Homography& h, const Vec2& px) {
  const Vec3 q = h.matrix() * Vec3(px.x(), px.y(), 1.0);
  if (std::abs(q.z()) <= 1e-12) fail(ErrorCode::PointAtInfinity, "point maps to infinity");
  return {q.x() / q.z(), q.y() / q.z()};
}

/// Scale- and sign-invariant distance between two homographies: both are
/// scaled to unit Frobenius norm and aligned in sign before differencing.
inline double homography_distance(const Mat3& a, const Mat3& b) {
  const Mat3 ua = a / a.norm();
  Mat3 ub = b / b.norm();
  if ((ua.array() * ub.array()).sum() < 0.0) ub = -ub;
  return (ua - ub).norm();
}

inline double homography_distance(const Homography& a, const Homography& b) {
  return homography_distance(a.matrix(), b.matrix());
}

using Correspondence = std::pair<Vec2, Vec2>;

namespace detail {

// Similarity that moves the centroid to the origin with mean distance sqrt(2).
template <typename Getter>
Mat3 hartley_normalizer(std::span<const Correspondence> pts, Getter get) {
  Vec2 centroid = Vec2::Zero();
  for (const auto& c : pts) centroid += get(c);
  centroid /= static_cast<double>(pts.size());
  double mean_dist = 0.0;
  for (const auto& c : pts) mean_dist += (get(c) - centroid).norm();
  mean_dist /= static_cast<double>(pts.size());
  if (mean_dist < 1e-12) fail(ErrorCode::DegenerateConfiguration, "all points coincide");
  const double s = std::sqrt(2.0) / mean_dist;
  Mat3 t;
  t << s, 0.0, -s * centroid.x(), 0.0, s, -s * centroid.y(), 0.0, 0.0, 1.0;
  return t;
}

inline Vec2 transform(const Mat3& t, const Vec2& p) {
  return {t(0, 0) * p.x() + t(0, 2), t(1, 1) * p.y() + t(1, 2)};
}

inline double cross2(const Vec2& a, const Vec2& b) { return a.x() * b.y() - a.y() * b.x(); }

inline void check_point_set(const std::vector<Vec2>& pts) {
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = i + 1; j < pts.size(); ++j) {
      if ((pts[i] - pts[j]).norm() < 1e-9) fail(ErrorCode::DegenerateConfiguration, "duplicate points");
    }
  }
  if (pts.size() == 4) {
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = i + 1; j < 4; ++j) {
        for (std::size_t k = j + 1; k < 4; ++k) {
          if (std::abs(cross2(pts[j] - pts[i], pts[k] - pts[i])) < 1e-6) {
            fail(ErrorCode::DegenerateConfiguration, "three points are collinear");
          }
        }
      }
    }
    return;
  }
  // n > 4: only a fully collinear set is rejected here; the rank check covers the rest.
  bool all_collinear = true;
  for (std::size_t k = 2; k < pts.size() && all_collinear; ++k) {
    all_collinear = std::abs(cross2(pts[1] - pts[0], pts[k] - pts[0])) < 1e-6;
  }
  if (all_collinear) fail(ErrorCode::DegenerateConfiguration, "all points are collinear");
}

}  // namespace detail

/// Normalized DLT: least-squares homography mapping `first` to `second` of
/// each correspondence.
inline Homography dlt_homography(std::span<const Correspondence> corr) {
  if (corr.size() < 4) fail(ErrorCode::DegenerateConfiguration, "at least 4 correspondences required");

  const Mat3 t_src = detail::hartley_normalizer(corr, [](const Correspondence& c) { return c.first; });
  const Mat3 t_dst = detail::hartley_normalizer(corr, [](const Correspondence& c) { return c.second; });

  std::vector<Vec2> src, dst;
  src.reserve(corr.size());
  dst.reserve(corr.size());
  for (const auto& c : corr) {
    src.push_back(detail::transform(t_src, c.first));
    dst.push_back(detail::transform(t_dst, c.second));
  }
  detail::check_point_set(src);
  detail::check_point_set(dst);

  const auto n = static_cast<Eigen::Index>(corr.size());
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(2 * n, 9);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = src[i].x(), y = src[i].y();
    const double u = dst[i].x(), v = dst[i].y();
    a.row(2 * i) << -x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u;
    a.row(2 * i + 1) << 0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v;
  }

  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
  const auto& sv = svd.singularValues();
  const Eigen::Index last = sv.size() - 1;
  // With 4 correspondences A is 8x9 and its ninth singular value is zero.
  const double smallest = sv.size() == 9 ? sv(last) : 0.0;
  const double second = sv.size() == 9 ? sv(last - 1) : sv(last);
  if (second - smallest < 1e-10) fail(ErrorCode::RankDeficient, "design matrix null space is not one-dimensional");

  Eigen::Matrix<double, 9, 1> h = svd.matrixV().col(8);
  for (int i = 0; i < 9; ++i) {
    if (h(i) != 0.0) {
      if (h(i) < 0.0) h = -h;
      break;
    }
  }
  Mat3 hn;
  hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
  return Homography(t_dst.inverse() * hn * t_src);
}

inline Homography dlt_homography(const std::vector<Correspondence>& corr) {
  return dlt_homography(std::span<const Correspondence>(corr));
}

/// Plane-induced homography between two views. `rel` maps frame-1 coordinates
/// to frame-2 coordinates; the plane is n.X = d in frame 1.
inline Homography closed_form_homography(const CameraIntrinsics& k1, const CameraIntrinsics& k2,
                                         const RigidTransform& rel, const Vec3& normal, double d) {
  if (d < 1e-9) fail(ErrorCode::DegeneratePlane, "plane distance must be positive");
  if (std::abs(normal.norm() - 1.0) > 1e-6) fail(ErrorCode::InvalidArgument, "plane normal must be unit length");
  const Mat3 euclidean = rel.rotation() + rel.translation() * normal.transpose() / d;
  return Homography(k2.matrix() * euclidean * k1.inverse_matrix());
}

}  // namespace georect
