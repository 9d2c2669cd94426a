#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "georect/detection.hpp"
#include "georect/error.hpp"
#include "georect/evaluation.hpp"
#include "georect/geometry.hpp"
#include "georect/image.hpp"
#include "georect/point_cloud.hpp"

namespace georect {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr std::uint16_t kMaxDepthMm = 10000;

struct FrameRecord {
  std::string frame_id;
  RgbImage rgb;
  DepthImage depth;
  CameraIntrinsics intrinsics;
  FrameMetadata meta;
};

// ---------------------------------------------------------------- images

inline void require_file(const fs::path& p) {
  std::error_code ec;
  if (!fs::is_regular_file(p, ec)) fail(ErrorCode::FileMissing, "missing file: " + p.string());
}

/// Reads an 8-bit colour PNG. A fourth channel, if present, is returned as a
/// validity mask (nonzero alpha = valid).
inline RgbImage read_rgb(const fs::path& p, Mask* alpha = nullptr) {
  require_file(p);
  const cv::Mat m = cv::imread(p.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) fail(ErrorCode::IoFailure, "cannot decode image: " + p.string());
  if (m.depth() != CV_8U || (m.channels() != 3 && m.channels() != 4)) {
    fail(ErrorCode::IoFailure, "expected 8-bit RGB or RGBA image: " + p.string());
  }
  RgbImage out = make_rgb(m.cols, m.rows);
  if (alpha) *alpha = make_mask(m.cols, m.rows, true);
  const int ch = m.channels();
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < m.cols; ++x) {
      const auto* px = row + static_cast<std::ptrdiff_t>(x) * ch;
      out.at(x, y, 0) = px[2];
      out.at(x, y, 1) = px[1];
      out.at(x, y, 2) = px[0];
      if (alpha && ch == 4) alpha->at(x, y) = px[3] != 0 ? 1 : 0;
    }
  }
  return out;
}

inline void write_image_mat(const fs::path& p, const cv::Mat& m) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  bool ok = false;
  try {
    ok = cv::imwrite(p.string(), m);
  } catch (const cv::Exception&) {
    ok = false;
  }
  if (!ok) fail(ErrorCode::IoFailure, "cannot write image: " + p.string());
}

/// Writes RGB, or RGBA with the mask in alpha (255 valid, 0 invalid).
inline void write_rgb(const fs::path& p, const RgbImage& img, const Mask* mask = nullptr) {
  const int ch = mask ? 4 : 3;
  cv::Mat m(img.height(), img.width(), ch == 4 ? CV_8UC4 : CV_8UC3);
  for (int y = 0; y < img.height(); ++y) {
    auto* row = m.ptr<std::uint8_t>(y);
    for (int x = 0; x < img.width(); ++x) {
      auto* px = row + static_cast<std::ptrdiff_t>(x) * ch;
      px[0] = img.at(x, y, 2);
      px[1] = img.at(x, y, 1);
      px[2] = img.at(x, y, 0);
      if (mask) px[3] = mask->at(x, y) ? 255 : 0;
    }
  }
  write_image_mat(p, m);
}

/// 16-bit depth in millimetres. Readings at or beyond the sanity bound are
/// marked invalid (0).
inline DepthImage read_depth(const fs::path& p) {
  require_file(p);
  const cv::Mat m = cv::imread(p.string(), cv::IMREAD_ANYDEPTH);
  if (m.empty()) fail(ErrorCode::IoFailure, "cannot decode depth image: " + p.string());
  if (m.depth() != CV_16U || m.channels() != 1) fail(ErrorCode::IoFailure, "expected 16-bit single-channel depth: " + p.string());
  DepthImage out(m.cols, m.rows, 1);
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < m.cols; ++x) out.at(x, y) = row[x] >= kMaxDepthMm ? 0 : row[x];
  }
  return out;
}

inline void write_depth(const fs::path& p, const DepthImage& d) {
  cv::Mat m(d.height(), d.width(), CV_16UC1);
  for (int y = 0; y < d.height(); ++y) {
    auto* row = m.ptr<std::uint16_t>(y);
    for (int x = 0; x < d.width(); ++x) row[x] = d.at(x, y);
  }
  write_image_mat(p, m);
}

// ---------------------------------------------------------------- json helpers

namespace detail {

inline std::string read_text(const fs::path& p) {
  require_file(p);
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& p, const std::string& text) {
  std::error_code ec;
  if (p.has_parent_path()) fs::create_directories(p.parent_path(), ec);
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  out.flush();
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + p.string());
}

/// Parses JSON text; syntax errors report file, line and column.
inline json parse_json(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    const std::size_t stop = std::min<std::size_t>(e.byte > 0 ? e.byte - 1 : 0, text.size());
    for (std::size_t i = 0; i < stop; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    fail(ErrorCode::ParseError, source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
}

/// Typed field access that names the offending path on failure.
class Field {
 public:
  Field(const json& j, std::string path, std::string source) : j_(j), path_(std::move(path)), source_(std::move(source)) {}

  [[noreturn]] void bad(const std::string& what) const {
    fail(ErrorCode::ParseError, source_ + ": field '" + path_ + "' " + what);
  }

  Field operator[](const std::string& key) const {
    if (!j_.is_object()) bad("is not an object");
    const auto it = j_.find(key);
    if (it == j_.end()) fail(ErrorCode::ParseError, source_ + ": missing field '" + join(key) + "'");
    return Field(*it, join(key), source_);
  }
  Field operator[](std::size_t i) const { return Field(j_.at(i), path_ + "[" + std::to_string(i) + "]", source_); }

  bool has(const std::string& key) const { return j_.is_object() && j_.contains(key) && !j_.at(key).is_null(); }
  const json& raw() const { return j_; }
  const std::string& path() const { return path_; }

  double number() const {
    if (!j_.is_number()) bad("must be a number");
    return j_.get<double>();
  }
  int integer() const {
    if (!j_.is_number_integer()) bad("must be an integer");
    return j_.get<int>();
  }
  std::string string() const {
    if (!j_.is_string()) bad("must be a string");
    return j_.get<std::string>();
  }
  std::size_t array_size() const {
    if (!j_.is_array()) bad("must be an array");
    return j_.size();
  }
  BBox bbox() const {
    if (array_size() != 4) bad("must be [x, y, w, h]");
    return {(*this)[0].number(), (*this)[1].number(), (*this)[2].number(), (*this)[3].number()};
  }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& j_;
  std::string path_;
  std::string source_;
};

inline json bbox_json(const BBox& b) { return json::array({b.x, b.y, b.w, b.h}); }

}  // namespace detail

// ---------------------------------------------------------------- intrinsics

inline CameraIntrinsics intrinsics_from_json(const json& j, const std::string& source) {
  try {
    const detail::Field f(j, "", source);
    return CameraIntrinsics::make(f["fx"].number(), f["fy"].number(), f["cx"].number(), f["cy"].number(),
                                  f["width"].integer(), f["height"].integer());
  } catch (const Error& e) {
    fail(ErrorCode::MalformedIntrinsics, e.what());
  }
}

inline CameraIntrinsics load_intrinsics(const fs::path& p) {
  const std::string text = detail::read_text(p);
  try {
    return intrinsics_from_json(detail::parse_json(text, p.string()), p.string());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::MalformedIntrinsics) throw;
    fail(ErrorCode::MalformedIntrinsics, e.what());
  }
}

inline void save_intrinsics(const fs::path& p, const CameraIntrinsics& k) {
  const json j = {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height}};
  detail::write_text(p, j.dump(2) + "\n");
}

// ---------------------------------------------------------------- frames

inline FrameRecord load_frame(const fs::path& rgb_path, const fs::path& depth_path, const fs::path& intrinsics_path) {
  require_file(rgb_path);
  require_file(depth_path);
  require_file(intrinsics_path);
  FrameRecord f;
  f.frame_id = rgb_path.stem().string();
  f.intrinsics = load_intrinsics(intrinsics_path);
  f.rgb = read_rgb(rgb_path);
  f.depth = read_depth(depth_path);
  if (f.rgb.width() != f.depth.width() || f.rgb.height() != f.depth.height()) {
    fail(ErrorCode::DimensionMismatch, "rgb is " + std::to_string(f.rgb.width()) + "x" + std::to_string(f.rgb.height()) +
                                           " but depth is " + std::to_string(f.depth.width()) + "x" +
                                           std::to_string(f.depth.height()));
  }
  if (f.rgb.width() != f.intrinsics.width || f.rgb.height() != f.intrinsics.height) {
    fail(ErrorCode::DimensionMismatch, "image size does not match the intrinsics");
  }
  return f;
}

inline PointCloud depth_to_cloud(const DepthImage& depth, const CameraIntrinsics& k) {
  PointCloud cloud(depth.width(), depth.height());
  for (int v = 0; v < depth.height(); ++v) {
    for (int u = 0; u < depth.width(); ++u) {
      const std::uint16_t mm = depth.at(u, v);
      if (mm == 0 || mm >= kMaxDepthMm) continue;
      const std::size_t i = static_cast<std::size_t>(v) * depth.width() + u;
      cloud.points[i] = unproject(k, Vec2(u, v), mm / 1000.0);
      cloud.valid[i] = 1;
    }
  }
  return cloud;
}

inline PointCloud depth_to_cloud(const FrameRecord& f) { return depth_to_cloud(f.depth, f.intrinsics); }

// ---------------------------------------------------------------- annotations

/// Turns a parsed annotation document into frames. Different on-disk schemas
/// plug in here.
using AnnotationAdapter = std::function<std::vector<GroundTruthFrame>(const json&, const std::string& source)>;

inline std::vector<GroundTruthFrame> generic_annotations(const json& j, const std::string& source) {
  const detail::Field root(j, "", source);
  const auto frames = root["frames"];
  std::vector<GroundTruthFrame> out;
  for (std::size_t i = 0; i < frames.array_size(); ++i) {
    const auto f = frames[i];
    GroundTruthFrame g;
    g.frame_id = f["frame_id"].string();
    const auto boxes = f["boxes"];
    for (std::size_t b = 0; b < boxes.array_size(); ++b) {
      g.boxes.push_back({boxes[b]["class_id"].integer(), boxes[b]["bbox"].bbox()});
    }
    if (f.has("angle_deg")) g.meta.angle_deg = f["angle_deg"].number();
    if (f.has("distance_m")) g.meta.distance_m = f["distance_m"].number();
    if (f.has("background")) g.meta.background = f["background"].string();
    out.push_back(std::move(g));
  }
  return out;
}

/// COCO-style document: images/annotations with category ids used verbatim
/// as class ids and the file-name stem as the frame id.
inline std::vector<GroundTruthFrame> coco_annotations(const json& j, const std::string& source) {
  const detail::Field root(j, "", source);
  const auto images = root["images"];
  std::vector<GroundTruthFrame> out;
  std::map<long long, std::size_t> by_id;
  for (std::size_t i = 0; i < images.array_size(); ++i) {
    GroundTruthFrame g;
    g.frame_id = fs::path(images[i]["file_name"].string()).stem().string();
    const auto& img = images[i].raw();
    if (img.contains("angle_deg")) g.meta.angle_deg = images[i]["angle_deg"].number();
    if (img.contains("distance_m")) g.meta.distance_m = images[i]["distance_m"].number();
    by_id[images[i]["id"].raw().get<long long>()] = out.size();
    out.push_back(std::move(g));
  }
  const auto anns = root["annotations"];
  for (std::size_t i = 0; i < anns.array_size(); ++i) {
    const auto it = by_id.find(anns[i]["image_id"].raw().get<long long>());
    if (it == by_id.end()) anns[i]["image_id"].bad("refers to an unknown image");
    out[it->second].boxes.push_back({anns[i]["category_id"].integer(), anns[i]["bbox"].bbox()});
  }
  return out;
}

/// Picks the adapter from the document shape.
inline std::vector<GroundTruthFrame> auto_annotations(const json& j, const std::string& source) {
  if (j.is_object() && j.contains("images")) return coco_annotations(j, source);
  return generic_annotations(j, source);
}

inline std::vector<GroundTruthFrame> load_annotations(const fs::path& p, const AnnotationAdapter& adapter = auto_annotations) {
  const std::string text = detail::read_text(p);
  return adapter(detail::parse_json(text, p.string()), p.string());
}

inline json annotations_to_json(const std::vector<GroundTruthFrame>& frames) {
  json arr = json::array();
  for (const auto& g : frames) {
    json boxes = json::array();
    for (const auto& a : g.boxes) boxes.push_back({{"class_id", a.class_id}, {"bbox", detail::bbox_json(a.bbox)}});
    json f = {{"frame_id", g.frame_id}, {"boxes", std::move(boxes)}};
    if (g.meta.angle_deg) f["angle_deg"] = *g.meta.angle_deg;
    if (g.meta.distance_m) f["distance_m"] = *g.meta.distance_m;
    if (g.meta.background) f["background"] = *g.meta.background;
    arr.push_back(std::move(f));
  }
  return {{"frames", std::move(arr)}};
}

inline void save_annotations(const fs::path& p, const std::vector<GroundTruthFrame>& frames) {
  detail::write_text(p, annotations_to_json(frames).dump(2) + "\n");
}

// ---------------------------------------------------------------- detections

inline json detections_to_json(const FrameDetections& dets) {
  json arr = json::array();
  for (const auto& [id, list] : dets) {
    json ds = json::array();
    for (const auto& d : list) {
      json e = {{"class_id", d.class_id}, {"score", d.score}, {"bbox", detail::bbox_json(d.bbox)}};
      if (d.tile) e["tile"] = json::array({d.tile->plane, d.tile->i, d.tile->j});
      ds.push_back(std::move(e));
    }
    arr.push_back({{"frame_id", id}, {"detections", std::move(ds)}});
  }
  return {{"frames", std::move(arr)}};
}

inline FrameDetections detections_from_json(const json& j, const std::string& source) {
  const detail::Field root(j, "", source);
  const auto frames = root["frames"];
  FrameDetections out;
  for (std::size_t i = 0; i < frames.array_size(); ++i) {
    const auto f = frames[i];
    auto& list = out[f["frame_id"].string()];
    const auto ds = f["detections"];
    for (std::size_t k = 0; k < ds.array_size(); ++k) {
      Detection d;
      d.class_id = ds[k]["class_id"].integer();
      d.score = ds[k]["score"].number();
      d.bbox = ds[k]["bbox"].bbox();
      if (ds[k].has("tile")) {
        const auto t = ds[k]["tile"];
        if (t.array_size() != 3) t.bad("must be [plane, i, j]");
        d.tile = TileIndex{t[0].integer(), t[1].integer(), t[2].integer()};
      }
      list.push_back(d);
    }
  }
  return out;
}

inline void save_detections(const fs::path& p, const FrameDetections& dets) {
  detail::write_text(p, detections_to_json(dets).dump(2) + "\n");
}

inline FrameDetections load_detections(const fs::path& p) {
  const std::string text = detail::read_text(p);
  return detections_from_json(detail::parse_json(text, p.string()), p.string());
}

// ---------------------------------------------------------------- homographies

inline json homography_json(const Homography& h) {
  json a = json::array();
  const Mat3& m = h.matrix();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) a.push_back(m(r, c));
  return a;
}

inline Homography homography_from_json(const detail::Field& f) {
  if (f.array_size() != 9) f.bad("must hold 9 numbers");
  Mat3 m;
  for (int k = 0; k < 9; ++k) m(k / 3, k % 3) = f[static_cast<std::size_t>(k)].number();
  return Homography(m);
}

inline void save_homographies(const fs::path& p, const std::map<std::string, Homography>& hs) {
  json j = json::object();
  for (const auto& [id, h] : hs) j[id] = homography_json(h);
  detail::write_text(p, j.dump(2) + "\n");
}

inline std::map<std::string, Homography> load_homographies(const fs::path& p) {
  const std::string text = detail::read_text(p);
  const json j = detail::parse_json(text, p.string());
  if (!j.is_object()) fail(ErrorCode::ParseError, p.string() + ": expected an object of frame id -> 3x3");
  std::map<std::string, Homography> out;
  for (const auto& [id, v] : j.items()) out.emplace(id, homography_from_json(detail::Field(v, id, p.string())));
  return out;
}

// ---------------------------------------------------------------- dataset layout

/// root/rgb/<id>.png, root/depth/<id>.png, root/intrinsics.json and an
/// optional root/annotations.json.
struct Dataset {
  fs::path root;
  CameraIntrinsics intrinsics;
  std::vector<std::string> frame_ids;
  std::vector<GroundTruthFrame> annotations;

  fs::path rgb_path(const std::string& id) const { return root / "rgb" / (id + ".png"); }
  fs::path depth_path(const std::string& id) const { return root / "depth" / (id + ".png"); }
  fs::path intrinsics_path() const { return root / "intrinsics.json"; }
  fs::path annotations_path() const { return root / "annotations.json"; }

  const GroundTruthFrame* annotation(const std::string& id) const {
    for (const auto& g : annotations)
      if (g.frame_id == id) return &g;
    return nullptr;
  }

  FrameRecord load(const std::string& id) const {
    FrameRecord f = load_frame(rgb_path(id), depth_path(id), intrinsics_path());
    f.frame_id = id;
    if (const auto* g = annotation(id)) f.meta = g->meta;
    return f;
  }
};

inline Dataset open_dataset(const fs::path& root) {
  std::error_code ec;
  if (!fs::is_directory(root / "rgb", ec)) fail(ErrorCode::FileMissing, "no rgb/ directory under " + root.string());
  Dataset d;
  d.root = root;
  for (const auto& e : fs::directory_iterator(root / "rgb")) {
    if (e.is_regular_file() && e.path().extension() == ".png") d.frame_ids.push_back(e.path().stem().string());
  }
  std::sort(d.frame_ids.begin(), d.frame_ids.end());
  if (d.frame_ids.empty()) fail(ErrorCode::FileMissing, "no frames in " + (root / "rgb").string());
  d.intrinsics = load_intrinsics(d.intrinsics_path());
  if (fs::exists(d.annotations_path(), ec)) d.annotations = load_annotations(d.annotations_path());
  return d;
}

}  // namespace georect
