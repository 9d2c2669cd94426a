#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <future>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Geometry>

#include "georect/dataset_io.hpp"
#include "georect/error.hpp"
#include "georect/evaluation.hpp"
#include "georect/geometry.hpp"
#include "georect/image.hpp"
#include "georect/plane_segmentation.hpp"
#include "georect/rectification.hpp"
#include "georect/reference_detector.hpp"

namespace georect {

inline constexpr int kSignClasses = 13;

/// Sign centred at (u, v) metres on the wall; u along the wall's x axis,
/// v along its y axis (downwards in a level view).
struct SignPlacement {
  int class_id = 0;
  double u = 0.0;
  double v = 0.0;
  double size = 0.18;
};

enum class WallTexture { Plain, Plywood, Checker };

inline std::string to_string(WallTexture t) {
  switch (t) {
    case WallTexture::Plain: return "plain";
    case WallTexture::Plywood: return "plywood";
    case WallTexture::Checker: return "checker";
  }
  return "plain";
}

inline CameraIntrinsics synthetic_camera() { return CameraIntrinsics::make(920.0, 920.0, 639.5, 359.5, 1280, 720); }

struct SceneSpec {
  std::string frame_id = "frame";
  double yaw_deg = 0.0;
  double pitch_deg = 0.0;
  double distance = 1.25;  // camera centre to wall centre, along the optical axis
  double plane_width = 1.2;
  double plane_height = 0.8;
  std::vector<SignPlacement> signs;
  CameraIntrinsics intrinsics = synthetic_camera();
  double noise_a = 0.001;   // depth sigma = a + b z^2, metres
  double noise_b = 0.0019;
  double outlier_fraction = 0.0;
  std::uint64_t seed = 0;
  WallTexture wall = WallTexture::Plain;
  std::array<std::uint8_t, 3> background{60, 70, 82};  // off-wall colour; depth there is invalid
  int supersample = 3;
  double standoff = 1.2;  // virtual viewpoint used for the ground-truth homography

  void validate() const {
    if (!(distance > 0.0)) fail(ErrorCode::InvalidArgument, "distance must be positive");
    if (!(std::abs(yaw_deg) < 85.0) || !(std::abs(pitch_deg) < 85.0)) {
      fail(ErrorCode::InvalidArgument, "yaw and pitch must stay below 85 degrees");
    }
    if (!(noise_a >= 0.0) || !(noise_b >= 0.0) || !(outlier_fraction >= 0.0 && outlier_fraction <= 1.0)) {
      fail(ErrorCode::InvalidArgument, "noise parameters must be non-negative");
    }
    if (!(plane_width > 0.0) || !(plane_height > 0.0) || supersample < 1 || !(standoff > 0.0)) {
      fail(ErrorCode::InvalidArgument, "bad plane extent, supersampling or standoff");
    }
    for (const auto& s : signs) {
      if (s.class_id < 0 || s.class_id >= kSignClasses || !(s.size > 0.0)) {
        fail(ErrorCode::InvalidArgument, "bad sign placement");
      }
    }
    intrinsics.validate();
  }

  SceneSpec noise_free() const {
    SceneSpec s = *this;
    s.noise_a = s.noise_b = s.outlier_fraction = 0.0;
    return s;
  }
};

namespace detail {

using Rgb = std::array<double, 3>;

inline constexpr Rgb kWhite{245, 245, 245}, kBlack{22, 22, 22}, kRed{210, 30, 35}, kOrange{245, 125, 20},
    kGreen{20, 145, 70}, kYellow{250, 205, 20}, kBlue{25, 85, 190}, kGrey{150, 150, 150};

struct SignStyle {
  Rgb top, bottom;
  int glyph;
  bool stripes;
};

inline const SignStyle& sign_style(int c) {
  static const std::array<SignStyle, kSignClasses> styles{{
      {kOrange, kOrange, 0, false}, {kRed, kRed, 1, false},      {kGreen, kGreen, 2, false},
      {kWhite, kWhite, 3, false},   {kRed, kWhite, 4, false},    {kYellow, kYellow, 5, false},
      {kBlue, kBlue, 6, false},     {kYellow, kWhite, 7, false}, {kWhite, kBlack, 8, false},
      {kRed, kWhite, 9, true},      {kBlue, kWhite, 10, false},  {kGreen, kWhite, 11, true},
      {kWhite, kWhite, 12, true},
  }};
  return styles[static_cast<std::size_t>(c)];
}

inline bool in_glyph(int g, double x, double y) {
  const double r = std::hypot(x, y);
  const double ax = std::abs(x), ay = std::abs(y);
  switch (g) {
    case 0: return r < 0.09;                                                    // disc
    case 1: return y > -0.1 && y < 0.08 && ax < (y + 0.1) * 0.6;                // triangle
    case 2: return r > 0.06 && r < 0.1;                                         // ring
    case 3: return (ax < 0.025 && ay < 0.1) || (ay < 0.025 && ax < 0.1);        // plus
    case 4: return std::abs(ax - ay) < 0.025 && ax < 0.09;                      // cross
    case 5: return ax < 0.075 && ay < 0.075 && !(ax < 0.04 && ay < 0.04);       // hollow square
    case 6: return ax < 0.1 && std::fmod(y + 0.105, 0.07) < 0.035 && ay < 0.1;  // bars
    case 7: return ay < 0.1 && std::fmod(x + 0.105, 0.07) < 0.035 && ax < 0.1;  // columns
    case 8: return y < 0.1 && y > -0.08 && ax < (0.1 - y) * 0.55;               // inverted triangle
    case 9: return r < 0.1 && y > 0.0;                                          // half disc
    case 10: return ax + ay < 0.1 && ax + ay > 0.05;                            // small diamond
    case 11: return std::hypot(ax - 0.055, y) < 0.04;                           // two dots
    case 12: return (r > 0.07 && r < 0.1) || r < 0.03;                          // target
  }
  return false;
}

/// Colour of a sign card at local coordinates in [-0.5, 0.5]^2 (y down):
/// white card, black-rimmed diamond with a two-tone fill, a class glyph in
/// the upper half and a 4-bit class code in the lower half.
inline Rgb sign_color(int cls, double x, double y) {
  const SignStyle& s = sign_style(cls);
  const double m = std::abs(x) + std::abs(y);
  if (m > 0.47) return kWhite;
  if (m > 0.43) return kBlack;
  const bool upper = y < 0.0;
  if (upper && in_glyph(s.glyph, x, y + 0.17)) return s.top == kBlack ? kWhite : kBlack;
  if (!upper && y > 0.12 && y < 0.2 && std::abs(x) < 0.16) {
    const int bit = std::clamp(static_cast<int>((x + 0.16) / 0.08), 0, 3);
    const double cx = -0.12 + 0.08 * bit;
    if (std::abs(x - cx) < 0.028) return ((cls + 1) >> bit) & 1 ? (s.bottom == kBlack ? kWhite : kBlack) : kGrey;
  }
  if (s.stripes && upper && std::fmod(x + 1.0, 0.08) < 0.04) return s.top == kWhite ? kRed : kWhite;
  return upper ? s.top : s.bottom;
}

inline Rgb wall_color(WallTexture t, double a, double b) {
  switch (t) {
    case WallTexture::Plain: {
      const double shade = 6.0 * std::sin(a * 2.1) * std::cos(b * 1.7);
      return {200 + shade, 196 + shade, 186 + shade};
    }
    case WallTexture::Plywood: {
      const double grain = std::sin(b * 55.0 + 2.5 * std::sin(a * 4.0) + 0.8 * std::sin(a * 11.0));
      const double k = 0.5 + 0.5 * grain;
      return {175 + 30 * k, 135 + 25 * k, 90 + 20 * k};
    }
    case WallTexture::Checker: {
      const bool on = (static_cast<long>(std::floor(a / 0.1)) + static_cast<long>(std::floor(b / 0.1))) % 2 == 0;
      return on ? Rgb{205, 205, 200} : Rgb{120, 125, 130};
    }
  }
  return {200, 200, 200};
}

struct SceneGeometry {
  Vec3 centre, normal, ex, ey;
  double d;
};

inline SceneGeometry scene_geometry(const SceneSpec& s) {
  const Mat3 r = (Eigen::AngleAxisd(s.yaw_deg * std::numbers::pi / 180.0, Vec3::UnitY()) *
                  Eigen::AngleAxisd(s.pitch_deg * std::numbers::pi / 180.0, Vec3::UnitX()))
                     .toRotationMatrix();
  SceneGeometry g;
  g.centre = Vec3(0.0, 0.0, s.distance);
  g.normal = r.col(2);
  g.ex = r.col(0);
  g.ey = r.col(1);
  g.d = g.normal.dot(g.centre);
  return g;
}

/// Wall-plane coordinates hit by a ray, if it hits the wall rectangle in front.
inline bool hit_wall(const SceneSpec& s, const SceneGeometry& g, const Vec3& origin, const Vec3& dir, double& a,
                     double& b, Vec3* point = nullptr) {
  const double denom = g.normal.dot(dir);
  if (std::abs(denom) < 1e-12) return false;
  const double t = (g.d - g.normal.dot(origin)) / denom;
  if (t <= 0.0) return false;
  const Vec3 x = origin + t * dir;
  const Vec3 rel = x - g.centre;
  a = rel.dot(g.ex);
  b = rel.dot(g.ey);
  if (std::abs(a) > 0.5 * s.plane_width || std::abs(b) > 0.5 * s.plane_height) return false;
  if (point) *point = x;
  return true;
}

inline Rgb surface_color(const SceneSpec& s, double a, double b) {
  for (const auto& sign : s.signs) {
    const double x = (a - sign.u) / sign.size, y = (b - sign.v) / sign.size;
    if (std::abs(x) <= 0.5 && std::abs(y) <= 0.5) return sign_color(sign.class_id, x, y);
  }
  return wall_color(s.wall, a, b);
}

}  // namespace detail

/// Colour render of the scene from an arbitrary camera; `pose` maps camera
/// coordinates into the original camera frame.
inline RgbImage render_view(const SceneSpec& spec, const RigidTransform& pose, const CameraIntrinsics& k) {
  spec.validate();
  const auto g = detail::scene_geometry(spec);
  RgbImage img = make_rgb(k.width, k.height);
  const int ss = spec.supersample;
  const Mat3 rk = pose.rotation() * k.inverse_matrix();
  const Vec3 origin = pose.translation();
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      detail::Rgb acc{0, 0, 0};
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double px = u + (sx + 0.5) / ss - 0.5, py = v + (sy + 0.5) / ss - 0.5;
          const Vec3 dir = rk * Vec3(px, py, 1.0);
          double a = 0, b = 0;
          const detail::Rgb c = detail::hit_wall(spec, g, origin, dir, a, b)
                                    ? detail::surface_color(spec, a, b)
                                    : detail::Rgb{double(spec.background[0]), double(spec.background[1]),
                                                  double(spec.background[2])};
          for (int ch = 0; ch < 3; ++ch) acc[ch] += c[ch];
        }
      }
      for (int ch = 0; ch < 3; ++ch) img.at(u, v, ch) = saturate_u8(acc[ch] / (ss * ss));
    }
  }
  return img;
}

/// Fronto-parallel raster of one sign card, `side` pixels square.
inline RgbImage sign_template(int class_id, int side, int supersample = 4) {
  if (class_id < 0 || class_id >= kSignClasses || side < 2) fail(ErrorCode::InvalidArgument, "bad template request");
  RgbImage img = make_rgb(side, side);
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      detail::Rgb acc{0, 0, 0};
      for (int sy = 0; sy < supersample; ++sy) {
        for (int sx = 0; sx < supersample; ++sx) {
          const double lx = (x + (sx + 0.5) / supersample) / side - 0.5;
          const double ly = (y + (sy + 0.5) / supersample) / side - 0.5;
          const auto c = detail::sign_color(class_id, lx, ly);
          for (int ch = 0; ch < 3; ++ch) acc[ch] += c[ch];
        }
      }
      for (int ch = 0; ch < 3; ++ch) img.at(x, y, ch) = saturate_u8(acc[ch] / (supersample * supersample));
    }
  }
  return img;
}

/// Templates of every class as seen fronto-parallel from each distance.
inline std::vector<DetectorTemplate> template_library(const std::vector<double>& distances, double sign_size = 0.18,
                                                      double focal = synthetic_camera().fx) {
  std::vector<DetectorTemplate> out;
  for (int c = 0; c < kSignClasses; ++c) {
    for (double d : distances) {
      out.push_back({c, sign_template(c, static_cast<int>(std::lround(focal * sign_size / d)))});
    }
  }
  return out;
}

inline std::vector<double> default_template_distances() { return {1.2, 1.25, 1.5, 1.75}; }

struct SceneGroundTruth {
  PlaneModel plane;
  VirtualViewpoint viewpoint;
  Homography canonical_homography;  // original pixels -> virtual-view pixels
  GroundTruthFrame boxes;
  Mask wall_mask;  // pixels whose centre ray hits the wall
};

struct SyntheticFrame {
  FrameRecord frame;
  SceneGroundTruth truth;
};

inline SyntheticFrame render_scene(const SceneSpec& spec) {
  spec.validate();
  const auto g = detail::scene_geometry(spec);
  const CameraIntrinsics& k = spec.intrinsics;

  SyntheticFrame out;
  out.frame.frame_id = spec.frame_id;
  out.frame.intrinsics = k;
  out.frame.rgb = render_view(spec, RigidTransform::identity(), k);
  out.frame.depth = DepthImage(k.width, k.height, 1, 0);
  out.truth.wall_mask = make_mask(k.width, k.height, false);

  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0), far(0.4, 4.0);
  const bool noisy = spec.noise_a > 0.0 || spec.noise_b > 0.0;

  PointCloud exact(k.width, k.height);
  Vec3 sum = Vec3::Zero();
  std::size_t visible = 0;
  for (int v = 0; v < k.height; ++v) {
    for (int u = 0; u < k.width; ++u) {
      const Vec3 dir = k.inverse_matrix() * Vec3(u, v, 1.0);
      double a = 0, b = 0;
      Vec3 x;
      if (!detail::hit_wall(spec, g, Vec3::Zero(), dir, a, b, &x)) continue;
      const std::size_t i = static_cast<std::size_t>(v) * k.width + u;
      exact.points[i] = x;
      exact.valid[i] = 1;
      out.truth.wall_mask.at(u, v) = 1;
      sum += x;
      ++visible;

      double z = x.z();
      if (noisy) z += (spec.noise_a + spec.noise_b * z * z) * gauss(rng);
      if (spec.outlier_fraction > 0.0 && unit(rng) < spec.outlier_fraction) z = far(rng);
      const double mm = std::round(z * 1000.0);
      out.frame.depth.at(u, v) = static_cast<std::uint16_t>(std::clamp(mm, 1.0, double(kMaxDepthMm - 1)));
    }
  }
  if (visible < 100) fail(ErrorCode::PlaneOutOfView, "the wall is not visible from the camera");

  PlaneModel& plane = out.truth.plane;
  plane.normal = g.normal;
  plane.distance = g.d;
  const Vec3 mean = sum / static_cast<double>(visible);
  plane.centroid = mean - (g.normal.dot(mean) - g.d) * g.normal;
  for (std::size_t i = 0; i < exact.size(); ++i)
    if (exact.valid[i]) plane.inlier_indices.push_back(static_cast<std::uint32_t>(i));
  plane.boundary = boundary_points(plane, exact);

  out.truth.viewpoint = canonical_viewpoint(plane, spec.standoff);
  out.truth.canonical_homography =
      closed_form_homography(k, k, out.truth.viewpoint.pose.inverse(), plane.normal, plane.distance);

  out.truth.boxes.frame_id = spec.frame_id;
  for (const auto& s : spec.signs) {
    double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
    for (const auto& [du, dv] : std::array<std::pair<double, double>, 4>{{{-1, -1}, {1, -1}, {1, 1}, {-1, 1}}}) {
      const Vec3 corner = g.centre + (s.u + 0.5 * s.size * du) * g.ex + (s.v + 0.5 * s.size * dv) * g.ey;
      if (corner.z() <= kMinDepth) fail(ErrorCode::PlaneOutOfView, "sign behind the camera");
      const Vec2 p = project(k, corner);
      x0 = std::min(x0, p.x());
      y0 = std::min(y0, p.y());
      x1 = std::max(x1, p.x());
      y1 = std::max(y1, p.y());
    }
    if (x0 < -0.5 || y0 < -0.5 || x1 > k.width - 0.5 || y1 > k.height - 0.5) {
      fail(ErrorCode::PlaneOutOfView, "sign of class " + std::to_string(s.class_id) + " leaves the image");
    }
    out.truth.boxes.boxes.push_back({s.class_id, {x0, y0, x1 - x0, y1 - y0}});
  }
  out.truth.boxes.meta.angle_deg = spec.yaw_deg;
  out.truth.boxes.meta.distance_m = spec.distance;
  out.truth.boxes.meta.background = to_string(spec.wall);
  out.frame.meta = out.truth.boxes.meta;
  return out;
}

// ---------------------------------------------------------------- sweep

struct SweepConfig {
  std::vector<double> angles{-75, -60, -45, -30, 0, 30, 45, 60, 75};
  std::vector<double> distances{1.25, 1.5, 1.75};
  SceneSpec base;  // signs are filled per frame when left empty
  std::vector<double> template_distances = default_template_distances();
  int jobs = 1;
};

inline std::string sweep_frame_id(std::size_t index, double angle, double distance) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "f%03zu_yaw%+03d_d%04ld", index, static_cast<int>(std::lround(angle)),
                std::lround(distance * 1000.0));
  return buf;
}

/// Three signs per frame cycling through the classes.
inline std::vector<SignPlacement> sweep_signs(std::size_t index) {
  static const std::array<std::pair<double, double>, 3> spots{{{-0.34, -0.12}, {0.0, 0.1}, {0.34, -0.05}}};
  std::vector<SignPlacement> out;
  for (std::size_t k = 0; k < spots.size(); ++k) {
    out.push_back({static_cast<int>((3 * index + k) % kSignClasses), spots[k].first, spots[k].second, 0.18});
  }
  return out;
}

inline std::vector<SceneSpec> sweep_specs(const SweepConfig& cfg) {
  if (cfg.angles.empty() || cfg.distances.empty()) fail(ErrorCode::InvalidArgument, "sweep grid is empty");
  std::vector<SceneSpec> specs;
  for (double a : cfg.angles) {
    for (double d : cfg.distances) {
      SceneSpec s = cfg.base;
      const std::size_t idx = specs.size();
      s.frame_id = sweep_frame_id(idx, a, d);
      s.yaw_deg = a;
      s.distance = d;
      s.seed = cfg.base.seed * 1000003ULL + idx;
      if (s.signs.empty()) s.signs = sweep_signs(idx);
      specs.push_back(std::move(s));
    }
  }
  return specs;
}

inline void save_templates(const fs::path& dir, const std::vector<DetectorTemplate>& templates) {
  std::map<int, int> seen;
  for (const auto& t : templates) {
    char name[64];
    std::snprintf(name, sizeof name, "%02d_%02d_%dpx.png", t.class_id, seen[t.class_id]++, t.image.width());
    write_rgb(dir / name, t.image);
  }
}

/// Class id is the integer before the first underscore of each PNG name.
inline std::vector<DetectorTemplate> load_templates(const fs::path& dir) {
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) fail(ErrorCode::FileMissing, "template directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<DetectorTemplate> out;
  for (const auto& f : files) {
    const std::string stem = f.stem().string();
    const auto us = stem.find('_');
    int cls = 0;
    try {
      std::size_t used = 0;
      cls = std::stoi(stem.substr(0, us), &used);
      if (used != stem.substr(0, us).size()) throw std::invalid_argument(stem);
    } catch (const std::exception&) {
      fail(ErrorCode::ParseError, "template name must start with '<class_id>_': " + f.string());
    }
    out.push_back({cls, read_rgb(f)});
  }
  if (out.empty()) fail(ErrorCode::FileMissing, "no templates in " + dir.string());
  return out;
}

/// Renders the grid and writes a dataset directory: rgb/, depth/,
/// intrinsics.json, annotations.json, ground_truth_homographies.json and the
/// detector templates under templates/.
inline std::vector<GroundTruthFrame> sweep(const SweepConfig& cfg, const fs::path& out_dir) {
  const auto specs = sweep_specs(cfg);
  std::error_code ec;
  fs::create_directories(out_dir / "rgb", ec);
  fs::create_directories(out_dir / "depth", ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<GroundTruthFrame> gts(specs.size());
  std::map<std::string, Homography> homs;
  auto work = [&](std::size_t i) {
    const auto f = render_scene(specs[i]);
    write_rgb(out_dir / "rgb" / (f.frame.frame_id + ".png"), f.frame.rgb);
    write_depth(out_dir / "depth" / (f.frame.frame_id + ".png"), f.frame.depth);
    gts[i] = f.truth.boxes;
    return f.truth.canonical_homography;
  };
  const std::size_t jobs = static_cast<std::size_t>(std::max(1, cfg.jobs));
  for (std::size_t start = 0; start < specs.size(); start += jobs) {
    std::vector<std::future<Homography>> batch;
    for (std::size_t i = start; i < std::min(specs.size(), start + jobs); ++i) {
      batch.push_back(std::async(jobs > 1 ? std::launch::async : std::launch::deferred, work, i));
    }
    for (std::size_t i = 0; i < batch.size(); ++i) homs.emplace(specs[start + i].frame_id, batch[i].get());
  }

  save_intrinsics(out_dir / "intrinsics.json", cfg.base.intrinsics);
  save_annotations(out_dir / "annotations.json", gts);
  save_homographies(out_dir / "ground_truth_homographies.json", homs);
  if (!cfg.template_distances.empty()) {
    const double size = cfg.base.signs.empty() ? 0.18 : cfg.base.signs.front().size;
    save_templates(out_dir / "templates", template_library(cfg.template_distances, size, cfg.base.intrinsics.fx));
  }
  return gts;
}

}  // namespace georect
