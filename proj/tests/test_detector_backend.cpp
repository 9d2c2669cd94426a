#include <gtest/gtest.h>

#include "georect/dataset_io.hpp"
#include "georect/detector_backend.hpp"
#include "georect/pipeline.hpp"
#include "georect/synth.hpp"
#include "test_support.hpp"

using namespace georect;
using namespace georect::testkit;

namespace {

const char* kHello = R"({"type":"hello","protocol":1,"capacity":1,"classes":[0]})";

std::string fake(const std::string& reply) {
  return "printf '%s\\n' '" + std::string(kHello) + "'; while read l; do printf '%s\\n' '" + reply + "'; done";
}

RectifiedTile plain_tile(int w, int h, std::uint8_t fill = 100) {
  RectifiedTile t;
  t.image = RgbImage(w, h, 3, fill);
  t.mask = make_mask(w, h, true);
  t.spec.out_width = w;
  t.spec.out_height = h;
  return t;
}

SubprocessOptions quick(int ms = 5000) {
  SubprocessOptions o;
  o.timeout = std::chrono::milliseconds(ms);
  return o;
}

template <typename F>
ErrorCode code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::InvalidArgument;
}

std::filesystem::path worker_templates() {
  static const auto dir = [] {
    auto d = scratch_dir("backend_templates");
    save_templates(d, template_library({1.2}));
    return d;
  }();
  return dir;
}

struct OneSign {
  SyntheticFrame frame;
  RectifyResult rect;
};

const OneSign& one_sign_scene() {
  static const OneSign s = [] {
    SceneSpec spec;
    spec.distance = 1.2;
    spec.signs = {{6, 0.1, 0.05, 0.18}};
    OneSign out{render_scene(spec.noise_free()), {}};
    out.rect = rectify_frame(out.frame.frame.rgb, depth_to_cloud(out.frame.frame), out.frame.frame.intrinsics, {});
    return out;
  }();
  return s;
}

}  // namespace

TEST(DetectTiles, NoTilesNoDetections) {
  ReferenceBackend backend(template_library({1.2}));
  EXPECT_TRUE(detect_tiles({}, backend).empty());
}

TEST(DetectTiles, CanonicalTileWithOneSign) {
  const auto& s = one_sign_scene();
  ASSERT_EQ(s.rect.tiles.size(), 1u);
  ReferenceBackend backend(template_library({1.2}));
  const auto dets = detect_tiles(s.rect.tiles, backend);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].class_id, 6);
  ASSERT_TRUE(dets[0].tile.has_value());
  EXPECT_EQ(*dets[0].tile, (TileIndex{0, 1, 1}));
  const auto back = backproject(dets[0], s.rect.tiles[0].spec);
  EXPECT_GT(iou(back.bbox, s.frame.truth.boxes.boxes[0].bbox), 0.8);
}

TEST(SubprocessBackend, WorkerMatchesInProcessDetector) {
  const auto& s = one_sign_scene();
  SubprocessBackend worker(std::string(GEORECT_WORKER_PATH) + " --templates " + worker_templates().string(), quick(60000));
  EXPECT_EQ(worker.capacity(), 1);
  EXPECT_EQ(worker.classes().size(), 13u);
  ReferenceBackend local(load_templates(worker_templates()));
  const auto a = detect_tiles(s.rect.tiles, worker);
  const auto b = detect_tiles(s.rect.tiles, local);
  EXPECT_EQ(a, b);
  ASSERT_EQ(a.size(), 1u);

  // Reset kills the child; the next request transparently restarts it.
  worker.reset();
  EXPECT_EQ(detect_tiles(s.rect.tiles, worker), b);
}

TEST(SubprocessBackend, UnknownResponseIdIsProtocolViolation) {
  SubprocessBackend b(fake(R"({"type":"result","id":999,"detections":[]})"), quick());
  EXPECT_EQ(code_of([&] { detect_tiles({plain_tile(32, 32)}, b); }), ErrorCode::ProtocolViolation);
}

TEST(SubprocessBackend, MalformedRecordIsProtocolViolation) {
  SubprocessBackend b(fake("this is not json"), quick());
  EXPECT_EQ(code_of([&] { detect_tiles({plain_tile(32, 32)}, b); }), ErrorCode::ProtocolViolation);
  SubprocessBackend c(fake(R"({"type":"result","id":1,"detections":[{"class_id":0,"score":2,"bbox":[0,0,1,1]}]})"),
                      quick());
  EXPECT_EQ(code_of([&] { detect_tiles({plain_tile(32, 32)}, c); }), ErrorCode::ProtocolViolation);
}

TEST(SubprocessBackend, SilentDetectorTimesOut) {
  SubprocessBackend b("printf '%s\\n' '" + std::string(kHello) + "'; exec sleep 30", quick(300));
  const auto t0 = std::chrono::steady_clock::now();
  EXPECT_EQ(code_of([&] { detect_tiles({plain_tile(32, 32)}, b); }), ErrorCode::Timeout);
  EXPECT_LT(std::chrono::steady_clock::now() - t0, std::chrono::seconds(5));
}

TEST(SubprocessBackend, MissingCommandIsUnavailable) {
  EXPECT_EQ(code_of([] { SubprocessBackend b("/nonexistent/detector --flag", quick()); }), ErrorCode::BackendUnavailable);
  EXPECT_EQ(code_of([] { SubprocessBackend b("echo '{\"type\":\"nope\"}'", quick()); }), ErrorCode::BackendUnavailable);
  EXPECT_EQ(code_of([] { SubprocessBackend b(R"(echo '{"type":"hello","protocol":7}'; cat)", quick()); }),
            ErrorCode::BackendUnavailable);
}

TEST(SubprocessBackend, BoxesAreClampedToTheTile) {
  SubprocessBackend b(
      fake(R"({"type":"result","id":1,"extra":true,"detections":[{"class_id":0,"score":0.5,"bbox":[-10,-10,50,50]},{"class_id":0,"score":0.5,"bbox":[100,100,5,5]}]})"),
      quick());
  const auto dets = detect_tiles({plain_tile(20, 20)}, b);
  ASSERT_EQ(dets.size(), 1u);
  EXPECT_EQ(dets[0].bbox, (BBox{-0.5, -0.5, 20, 20}));
}

TEST(SubprocessBackend, PipelinesUpToCapacityAndReordersResponses) {
  // Answers every pair of requests in reverse order; each box encodes its id.
  const std::string script = R"(printf '%s\n' '{"type":"hello","protocol":1,"capacity":2,"classes":[0]}'
id() { echo "$1" | sed 's/.*"id":\([0-9]*\).*/\1/'; }
res() { printf '{"type":"result","id":%s,"detections":[{"class_id":0,"score":0.5,"bbox":[%s,1,2,2]}]}\n' "$1" "$1"; }
while read a && read b; do ia=$(id "$a"); ib=$(id "$b"); res "$ib"; res "$ia"; done)";
  SubprocessBackend b(script, quick());
  EXPECT_EQ(b.capacity(), 2);
  std::vector<RectifiedTile> tiles;
  for (int k = 0; k < 4; ++k) {
    tiles.push_back(plain_tile(32, 32));
    tiles.back().spec.j = k + 1;
  }
  const auto dets = detect_tiles(tiles, b);
  ASSERT_EQ(dets.size(), 4u);
  for (int k = 0; k < 4; ++k) {
    EXPECT_EQ(dets[static_cast<std::size_t>(k)].tile->j, k + 1);
    EXPECT_DOUBLE_EQ(dets[static_cast<std::size_t>(k)].bbox.x, k + 1.0);
  }
}

TEST(Pipeline, SignStraddlingTwoTilesYieldsOneDetection) {
  // 600 px wide tiles over the ~920 px plane: the centred sign lies inside
  // both the first and the second half-overlapping window.
  SceneSpec spec;
  spec.distance = 1.2;
  spec.signs = {{2, 0.0, 0.0, 0.18}};
  const auto f = render_scene(spec.noise_free());
  PipelineConfig cfg;
  cfg.rectify.tile_width = 600;
  ReferenceBackend backend(template_library({1.2}));
  const auto cloud = depth_to_cloud(f.frame);

  const auto rect = rectify_frame(f.frame.rgb, cloud, f.frame.intrinsics, cfg.rectify);
  const auto raw = detect_tiles(rect.tiles, backend);
  std::set<std::pair<int, int>> tiles_hit;
  for (const auto& d : raw) tiles_hit.insert({d.tile->i, d.tile->j});
  EXPECT_GE(tiles_hit.size(), 2u);

  const auto res = detect_frame(f.frame.rgb, cloud, f.frame.intrinsics, backend, cfg);
  ASSERT_EQ(res.detections.size(), 1u);
  EXPECT_EQ(res.detections[0].class_id, 2);
  EXPECT_GT(iou(res.detections[0].bbox, f.truth.boxes.boxes[0].bbox), 0.8);
}

TEST(Pipeline, BaselineModeSkipsRectification) {
  const auto& s = one_sign_scene();
  ReferenceBackend backend(template_library({1.2}));
  PipelineConfig cfg;
  cfg.baseline = true;
  PointCloud empty;
  const auto res = detect_frame(s.frame.frame.rgb, empty, s.frame.frame.intrinsics, backend, cfg);
  ASSERT_EQ(res.detections.size(), 1u);
  EXPECT_FALSE(res.detections[0].tile.has_value());
  EXPECT_TRUE(res.tile_specs.empty());
}
