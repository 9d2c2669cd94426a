#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "georect/plane_segmentation.hpp"
#include "test_support.hpp"

using namespace georect;
using georect::testkit::deg2rad;
using georect::testkit::noisy_plane_cloud;

namespace {

template <typename Fn>
void expect_code(ErrorCode code, Fn&& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

void expect_model_invariants(const PlaneModel& m, const PointCloud& cloud, const SegmentationConfig& cfg) {
  EXPECT_NEAR(m.normal.norm(), 1.0, 1e-9);
  EXPECT_GT(m.centroid.dot(m.normal), 0.0);
  EXPECT_NEAR(m.signed_distance(m.centroid), 0.0, 1e-9);
  for (auto i : m.inlier_indices) ASSERT_LT(std::abs(m.signed_distance(cloud.points[i])), cfg.inlier_threshold);
  ASSERT_GE(m.boundary.size(), 3u);
  for (const auto& b : m.boundary) EXPECT_LT(std::abs(m.signed_distance(b)), cfg.inlier_threshold);
}

// Brute-force hull: a point is a vertex iff some supporting line through it
// and another point leaves every other point strictly on one side.
std::set<std::size_t> brute_force_hull(const std::vector<Vec2>& pts) {
  std::set<std::size_t> hull;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    for (std::size_t j = 0; j < pts.size(); ++j) {
      if (i == j) continue;
      bool all_left = true;
      for (std::size_t k = 0; k < pts.size() && all_left; ++k) {
        if (k == i || k == j) continue;
        all_left = detail::cross2(pts[j] - pts[i], pts[k] - pts[i]) > 0.0;
      }
      if (all_left) {
        hull.insert(i);
        hull.insert(j);
      }
    }
  }
  return hull;
}

}  // namespace

TEST(UniqueNormal, FlipsTowardCentroid) {
  EXPECT_EQ(unique_normal(Vec3(0, 0, -1), Vec3(0, 0, 1.2)), Vec3(0, 0, 1));
  EXPECT_EQ(unique_normal(Vec3(0, 0, 1), Vec3(0, 0, 1.2)), Vec3(0, 0, 1));
  expect_code(ErrorCode::DegenerateCentroid, [] { unique_normal(Vec3(1, 0, 0), Vec3(0, 0, 1.2)); });
}

TEST(RansacPlane, NoiseFreeAxisAlignedPlane) {
  const auto cloud = noisy_plane_cloud(Vec3::UnitZ(), 1.2, 10000, 0.8, 0.0, 0.0, 1);
  SegmentationConfig cfg;
  const PlaneModel m = ransac_plane(cloud, cfg);
  EXPECT_LT((m.normal - Vec3::UnitZ()).norm(), 1e-9);
  EXPECT_NEAR(m.distance, 1.2, 1e-9);
  EXPECT_EQ(m.inlier_indices.size(), 10000u);
  expect_model_invariants(m, cloud, cfg);
}

TEST(RansacPlane, NoiseAndOutliers) {
  const auto cloud = noisy_plane_cloud(Vec3::UnitZ(), 1.2, 20000, 0.8, 0.005, 0.3, 2);
  SegmentationConfig cfg;
  const PlaneModel m = ransac_plane(cloud, cfg);
  EXPECT_LT(angle_between_deg(m.normal, Vec3::UnitZ()), 2.0);
  EXPECT_LT(std::abs(m.distance - 1.2), 0.01);
  expect_model_invariants(m, cloud, cfg);
}

TEST(RansacPlane, TooFewPoints) {
  const auto cloud = PointCloud::from_points({Vec3(0, 0, 1), Vec3(1, 0, 1)});
  expect_code(ErrorCode::InsufficientPoints, [&] { ransac_plane(cloud, SegmentationConfig{}); });
}

TEST(RansacPlane, NoConsensusOnScatter) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-2.0, 2.0), z(0.5, 4.0);
  std::vector<Vec3> pts;
  for (int i = 0; i < 5000; ++i) pts.emplace_back(u(rng), u(rng), z(rng));
  SegmentationConfig cfg;
  cfg.inlier_threshold = 0.005;
  expect_code(ErrorCode::NoConsensus, [&] { ransac_plane(PointCloud::from_points(pts), cfg); });
}

TEST(RansacPlane, DeterministicForFixedSeed) {
  const auto cloud = noisy_plane_cloud(Vec3(0.3, 0.1, 1.0), 1.5, 8000, 0.6, 0.004, 0.25, 8);
  SegmentationConfig cfg;
  cfg.rng_seed = 1234;
  const PlaneModel a = ransac_plane(cloud, cfg);
  const PlaneModel b = ransac_plane(cloud, cfg);
  EXPECT_EQ(a.normal, b.normal);
  EXPECT_EQ(a.distance, b.distance);
  EXPECT_EQ(a.centroid, b.centroid);
  EXPECT_EQ(a.inlier_indices, b.inlier_indices);
  EXPECT_EQ(a.boundary, b.boundary);
}

TEST(ExtractPlanes, SinglePlaneWithMaxOne) {
  const auto cloud = noisy_plane_cloud(Vec3(0.2, 0, 1), 1.4, 8000, 0.7, 0.003, 0.05, 3);
  SegmentationConfig cfg;
  cfg.max_planes = 1;
  EXPECT_EQ(extract_planes(cloud, cfg).size(), 1u);
}

TEST(ExtractPlanes, EmptyCloud) {
  expect_code(ErrorCode::InsufficientPoints, [] { extract_planes(PointCloud{}, SegmentationConfig{}); });
}

TEST(ExtractPlanes, TwoOrthogonalPlanes) {
  // 60 % on a wall facing the camera, 35 % on a side wall, 5 % clutter.
  const Vec3 wall = Vec3::UnitZ();
  const Vec3 side = Vec3(1, 0, 0);
  std::mt19937_64 rng(21);
  std::uniform_real_distribution<double> a(-0.6, 0.6), zz(1.3, 2.4), bx(-1.0, 1.0), bz(0.5, 2.5);
  std::normal_distribution<double> noise(0.0, 0.003);
  std::vector<Vec3> pts;
  for (int i = 0; i < 12000; ++i) pts.emplace_back(a(rng) - 0.1, a(rng), 2.5 + noise(rng));
  for (int i = 0; i < 7000; ++i) pts.emplace_back(0.6 + noise(rng), a(rng), zz(rng));
  for (int i = 0; i < 1000; ++i) pts.emplace_back(bx(rng), bx(rng), bz(rng));
  const auto cloud = PointCloud::from_points(pts);

  SegmentationConfig cfg;
  cfg.max_planes = 2;
  cfg.stop_fraction = 0.1;
  const auto planes = extract_planes(cloud, cfg);
  ASSERT_EQ(planes.size(), 2u);
  EXPECT_LT(angle_between_deg(planes[0].normal, wall), 2.0);
  EXPECT_LT(angle_between_deg(planes[1].normal, side), 2.0);
  EXPECT_GT(planes[0].inlier_indices.size(), planes[1].inlier_indices.size());

  std::vector<std::uint32_t> a0 = planes[0].inlier_indices, a1 = planes[1].inlier_indices;
  std::sort(a0.begin(), a0.end());
  std::sort(a1.begin(), a1.end());
  std::vector<std::uint32_t> both;
  std::set_intersection(a0.begin(), a0.end(), a1.begin(), a1.end(), std::back_inserter(both));
  EXPECT_TRUE(both.empty());
  for (const auto& p : planes) expect_model_invariants(p, cloud, cfg);
}

TEST(ExtractPlanes, StopsWhenRemainderBelowFraction) {
  // Single plane with 5 % clutter: after the first plane < 10 % remains.
  const auto cloud = noisy_plane_cloud(Vec3::UnitZ(), 1.2, 10000, 0.8, 0.0, 0.05, 6);
  SegmentationConfig cfg;
  cfg.max_planes = 5;
  cfg.min_inlier_fraction = 0.01;
  EXPECT_EQ(extract_planes(cloud, cfg).size(), 1u);
}

TEST(ExtractPlanes, GroundPlaneIsFiltered) {
  // Floor below the camera (y down), normal along +y.
  const auto floor = noisy_plane_cloud(Vec3::UnitY(), 0.8, 5000, 1.0, 0.0, 0.0, 9);
  auto pts = floor.points;
  for (auto& p : pts) p.z() += 2.0;
  const auto cloud = PointCloud::from_points(pts);
  SegmentationConfig cfg;
  EXPECT_TRUE(extract_planes(cloud, cfg).empty());
  cfg.ground_filter_enabled = false;
  EXPECT_EQ(extract_planes(cloud, cfg).size(), 1u);
}

TEST(IsGround, AngleRule) {
  SegmentationConfig cfg;
  PlaneModel p;
  p.normal = Vec3(0, -1, 0);
  EXPECT_TRUE(is_ground(p, cfg));
  p.normal = Vec3(0, 0, 1);
  EXPECT_FALSE(is_ground(p, cfg));
  // Tilt the axis direction by an explicit angle about x.
  for (double deg : {29.0, 31.0}) {
    p.normal = Vec3(0, -std::cos(deg2rad(deg)), std::sin(deg2rad(deg)));
    EXPECT_EQ(is_ground(p, cfg), deg < 30.0) << deg;
    p.normal = -p.normal;
    EXPECT_EQ(is_ground(p, cfg), deg < 30.0) << deg;
  }
}

TEST(BoundaryPoints, SquareCorners) {
  const std::vector<Vec3> corners{{-0.5, -0.5, 1.2}, {0.5, -0.5, 1.2}, {0.5, 0.5, 1.2}, {-0.5, 0.5, 1.2}};
  std::vector<Vec3> pts = corners;
  PlaneModel m;
  m.normal = Vec3::UnitZ();
  m.distance = 1.2;
  m.inlier_indices = {0, 1, 2, 3};
  auto hull = boundary_points(m, PointCloud::from_points(pts));
  ASSERT_EQ(hull.size(), 4u);
  for (const auto& c : corners) {
    EXPECT_TRUE(std::any_of(hull.begin(), hull.end(), [&](const Vec3& h) { return (h - c).norm() < 1e-12; }));
  }

  // Interior fill does not change the hull.
  for (int i = 1; i < 20; ++i)
    for (int j = 1; j < 20; ++j) pts.emplace_back(-0.5 + i / 20.0, -0.5 + j / 20.0, 1.2);
  m.inlier_indices.clear();
  for (std::uint32_t i = 0; i < pts.size(); ++i) m.inlier_indices.push_back(i);
  hull = boundary_points(m, PointCloud::from_points(pts));
  EXPECT_EQ(hull.size(), 4u);

  // Counter-clockwise seen from the +normal side: positive signed area about n.
  Vec3 area = Vec3::Zero();
  for (std::size_t i = 0; i < hull.size(); ++i) area += hull[i].cross(hull[(i + 1) % hull.size()]);
  EXPECT_GT(area.dot(m.normal), 0.0);
}

TEST(BoundaryPoints, CollinearInliers) {
  std::vector<Vec3> pts{{0, 0, 1}, {0.1, 0, 1}, {0.2, 0, 1}, {0.3, 0, 1}};
  PlaneModel m;
  m.normal = Vec3::UnitZ();
  m.distance = 1.0;
  m.inlier_indices = {0, 1, 2, 3};
  expect_code(ErrorCode::DegenerateHull, [&] { boundary_points(m, PointCloud::from_points(pts)); });
}

TEST(BoundaryPoints, MatchesBruteForceHull) {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const Vec3 n = testkit::yaw_pitch(35.0, -10.0) * Vec3::UnitZ();
  const double d = 1.6;
  const PlaneBasis basis = make_plane_basis(n, d);
  std::vector<Vec2> flat;
  std::vector<Vec3> pts;
  for (int i = 0; i < 500; ++i) {
    flat.emplace_back(u(rng), u(rng));
    pts.push_back(basis.lift(flat.back()));
  }
  PlaneModel m;
  m.normal = n;
  m.distance = d;
  for (std::uint32_t i = 0; i < pts.size(); ++i) m.inlier_indices.push_back(i);
  const auto hull = boundary_points(m, PointCloud::from_points(pts));

  const auto expected = brute_force_hull(flat);
  ASSERT_EQ(hull.size(), expected.size());
  for (auto idx : expected) {
    EXPECT_TRUE(std::any_of(hull.begin(), hull.end(), [&](const Vec3& h) { return (h - pts[idx]).norm() < 1e-9; }));
  }
}

TEST(BoundaryPoints, AreaIndependentOfInPlaneBasis) {
  const auto cloud = noisy_plane_cloud(Vec3(0.1, -0.2, 1.0), 1.3, 3000, 0.5, 0.0, 0.0, 12);
  PlaneModel m = ransac_plane(cloud, SegmentationConfig{});
  auto area = [&](const std::vector<Vec3>& poly) {
    Vec3 a = Vec3::Zero();
    for (std::size_t i = 0; i < poly.size(); ++i) a += poly[i].cross(poly[(i + 1) % poly.size()]);
    return 0.5 * a.dot(m.normal);
  };
  const double ref = area(boundary_points(m, cloud, 0.0));
  for (double rot : {0.3, 1.1, 2.5, -0.7}) {
    EXPECT_NEAR(area(boundary_points(m, cloud, rot)) / ref, 1.0, 1e-9);
  }
}
