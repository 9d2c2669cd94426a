#pragma once

#include <map>
#include <string>
#include <tuple>
#include <vector>

#include "georect/detection.hpp"
#include "georect/detector_backend.hpp"
#include "georect/error.hpp"
#include "georect/rectification.hpp"

namespace georect {

struct PipelineConfig {
  RectifyConfig rectify;
  double nms_iou = 0.5;
  bool baseline = false;       // detect on the raw frame, no rectification
  bool pool_baseline = false;  // rectified mode: also pool raw-frame detections into the final NMS

  void validate() const {
    rectify.segmentation.validate();
    if (!(rectify.standoff > 0.0)) fail(ErrorCode::InvalidArgument, "standoff must be positive");
    if (!(nms_iou >= 0.0 && nms_iou <= 1.0)) fail(ErrorCode::InvalidArgument, "NMS IoU threshold must lie in [0, 1]");
    if (rectify.tile_height < 0 || rectify.tile_width < 0) fail(ErrorCode::InvalidArgument, "tile size must be >= 0");
  }
};

struct FrameDetectionResult {
  std::vector<Detection> detections;  // original-image space, after extended NMS
  std::vector<PlaneModel> planes;
  std::vector<TileSpec> tile_specs;   // tiles that were sent to the detector
  std::size_t dropped_boxes = 0;      // back-projections that left the image
};

/// Back-projects tile detections through their own tile homography.
inline std::vector<Detection> backproject_all(const std::vector<Detection>& dets, const std::vector<TileSpec>& specs,
                                              std::size_t* dropped = nullptr) {
  std::map<std::tuple<int, int, int>, const TileSpec*> by_index;
  for (const auto& s : specs) by_index[{s.plane_index, s.i, s.j}] = &s;
  std::vector<Detection> out;
  for (const auto& d : dets) {
    if (!d.tile) {
      out.push_back(d);
      continue;
    }
    const auto it = by_index.find({d.tile->plane, d.tile->i, d.tile->j});
    if (it == by_index.end()) fail(ErrorCode::InvalidArgument, "detection refers to an unknown tile");
    try {
      out.push_back(backproject(d, *it->second));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::DegenerateBox) throw;
      if (dropped) ++*dropped;
    }
  }
  return out;
}

/// Segmentation, rectification, tiled detection, back-projection and
/// extended NMS for one frame. Throws on frame-level failures (no plane,
/// detector timeout, protocol errors) so the caller can decide to continue.
inline FrameDetectionResult detect_frame(const RgbImage& rgb, const PointCloud& cloud, const CameraIntrinsics& k,
                                         DetectorBackend& backend, const PipelineConfig& cfg) {
  FrameDetectionResult res;
  if (cfg.baseline) {
    res.detections = extended_nms(detect_image(rgb, backend), cfg.nms_iou);
    return res;
  }
  RectifyResult rect = rectify_frame(rgb, cloud, k, cfg.rectify);
  res.planes = std::move(rect.planes);
  for (const auto& t : rect.tiles) res.tile_specs.push_back(t.spec);
  std::vector<Detection> pool = backproject_all(detect_tiles(rect.tiles, backend), res.tile_specs, &res.dropped_boxes);
  if (cfg.pool_baseline) {
    const auto raw = detect_image(rgb, backend);
    pool.insert(pool.end(), raw.begin(), raw.end());
  }
  res.detections = extended_nms(std::move(pool), cfg.nms_iou);
  return res;
}

}  // namespace georect
