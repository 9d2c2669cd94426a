#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <tuple>
#include <vector>

#include "georect/error.hpp"
#include "georect/geometry.hpp"
#include "georect/rectification.hpp"

namespace georect {

/// Axis-aligned box: top-left corner plus extents, in pixels. Coordinates
/// are continuous with pixel centres on integers, so pixel (0, 0) covers
/// [-0.5, 0.5]^2.
struct BBox {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  double right() const { return x + w; }
  double bottom() const { return y + h; }

  bool operator==(const BBox&) const = default;
};

inline double iou(const BBox& a, const BBox& b) {
  const double ix = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

struct TileIndex {
  int plane = 0;
  int i = 1;
  int j = 1;

  bool operator==(const TileIndex&) const = default;
};

struct Detection {
  int class_id = 0;
  double score = 0.0;
  BBox bbox;
  std::optional<TileIndex> tile;  // nullopt: original-image coordinates

  bool operator==(const Detection&) const = default;
};

/// Strict order used wherever detections must be ranked deterministically:
/// score descending, then x, y, w, h, class ascending.
inline bool ranks_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.bbox.x, a.bbox.y, a.bbox.w, a.bbox.h, a.class_id) <
         std::tie(b.bbox.x, b.bbox.y, b.bbox.w, b.bbox.h, b.class_id);
}

/// Maps a tile-space box back to the original image: corners through the
/// inverse tile homography, axis-aligned hull, clipped to the source bounds.
inline Detection backproject(const Detection& det, const TileSpec& spec) {
  Mat3 inv;
  bool invertible = false;
  spec.homography.matrix().computeInverseWithCheck(inv, invertible, 1e-12);
  if (!invertible) fail(ErrorCode::SingularHomography, "tile homography is not invertible");
  const Homography back(inv);

  const BBox& b = det.bbox;
  const std::array<Vec2, 4> corners{Vec2(b.x, b.y), Vec2(b.right(), b.y), Vec2(b.right(), b.bottom()),
                                    Vec2(b.x, b.bottom())};
  double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
  for (const auto& c : corners) {
    const Vec2 p = apply_homography(back, c);
    x0 = std::min(x0, p.x());
    y0 = std::min(y0, p.y());
    x1 = std::max(x1, p.x());
    y1 = std::max(y1, p.y());
  }
  if (spec.source_width > 0 && spec.source_height > 0) {
    // Pixel centres sit on integers, so the image spans [-0.5, size - 0.5].
    const double xmax = spec.source_width - 0.5, ymax = spec.source_height - 0.5;
    x0 = std::clamp(x0, -0.5, xmax);
    x1 = std::clamp(x1, -0.5, xmax);
    y0 = std::clamp(y0, -0.5, ymax);
    y1 = std::clamp(y1, -0.5, ymax);
  }
  if ((x1 - x0) * (y1 - y0) < 1.0 || x1 <= x0 || y1 <= y0) {
    fail(ErrorCode::DegenerateBox, "back-projected box has less than 1 px^2 inside the image");
  }
  Detection out = det;
  out.bbox = {x0, y0, x1 - x0, y1 - y0};
  out.tile.reset();
  return out;
}

inline std::vector<Detection> backproject(const std::vector<Detection>& dets, const TileSpec& spec) {
  std::vector<Detection> out;
  out.reserve(dets.size());
  for (const auto& d : dets) out.push_back(backproject(d, spec));
  return out;
}

/// Class-wise greedy NMS over detections pooled from every tile.
inline std::vector<Detection> extended_nms(std::vector<Detection> dets, double iou_threshold) {
  std::sort(dets.begin(), dets.end(), ranks_before);
  std::map<int, std::vector<const Detection*>> kept_by_class;
  std::vector<Detection> out;
  for (const auto& d : dets) {
    auto& kept = kept_by_class[d.class_id];
    const bool suppressed =
        std::any_of(kept.begin(), kept.end(), [&](const Detection* k) { return iou(k->bbox, d.bbox) >= iou_threshold; });
    if (!suppressed) {
      kept.push_back(&d);
      out.push_back(d);
    }
  }
  return out;
}

}  // namespace georect
