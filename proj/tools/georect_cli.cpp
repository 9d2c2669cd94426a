// Batch front end: rectify, detect, eval and synth over dataset directories.

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "georect/dataset_io.hpp"
#include "georect/detector_backend.hpp"
#include "georect/evaluation.hpp"
#include "georect/pipeline.hpp"
#include "georect/synth.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace georect;

namespace {

struct Options {
  std::string dataset;
  std::string out = ".";
  int verbosity = 0;
  bool quiet = false;
  int jobs = 1;
  std::uint64_t seed = 0;

  PipelineConfig pipeline;
  std::string backend = "reference";
  std::string templates;
  double timeout_s = 30.0;

  // eval
  std::string detections;
  std::string annotations;
  std::string label;

  // synth
  std::vector<double> angles{-75, -60, -45, -30, 0, 30, 45, 60, 75};
  std::vector<double> distances{1.25, 1.5, 1.75};
  std::string wall = "plain";
  double outlier_fraction = 0.0;
  bool noise_free = false;
};

// Errors that end the run. Everything else is a per-frame soft failure.
bool fatal(ErrorCode c) {
  switch (c) {
    case ErrorCode::FileMissing:
    case ErrorCode::IoFailure:
    case ErrorCode::DimensionMismatch:
    case ErrorCode::MalformedIntrinsics:
    case ErrorCode::ParseError:
    case ErrorCode::BackendUnavailable:
    case ErrorCode::InvalidArgument:
      return true;
    default:
      return false;
  }
}

struct SoftFailure {
  std::string frame_id;
  std::string what;
};

void report_failures(const std::string& cmd, std::size_t frames, const std::vector<SoftFailure>& failures,
                     const std::string& extra) {
  std::cout << cmd << ": " << frames << " frames" << extra << ", " << failures.size() << " soft failures\n";
  for (const auto& f : failures) std::cout << "  " << f.frame_id << ": " << f.what << "\n";
}

/// Runs fn(i) for i in [begin, end) on up to `jobs` threads. Results must be
/// written to per-index slots; the first exception is rethrown.
template <typename Fn>
void parallel_for(std::size_t begin, std::size_t end, int jobs, Fn&& fn) {
  const std::size_t n = end - begin;
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), n);
  if (workers <= 1) {
    for (std::size_t i = begin; i < end; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{begin};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < end; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
        next = end;
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

void add_segmentation_flags(CLI::App* app, Options& o) {
  auto& seg = o.pipeline.rectify.segmentation;
  app->add_option("--standoff", o.pipeline.rectify.standoff, "virtual camera distance to the plane (m)")
      ->capture_default_str();
  app->add_option("--max-planes", seg.max_planes, "planes to extract per frame")->capture_default_str();
  app->add_option("--stop-fraction", seg.stop_fraction, "stop when this fraction of valid points remains")
      ->capture_default_str();
  app->add_option("--inlier-threshold", seg.inlier_threshold, "RANSAC inlier distance (m)")->capture_default_str();
  app->add_option("--max-iterations", seg.max_iterations, "RANSAC hypothesis budget")->capture_default_str();
  app->add_flag("!--no-ground-filter", seg.ground_filter_enabled, "keep planes parallel to the floor");
  app->add_option("--tile-width", o.pipeline.rectify.tile_width, "tile width in pixels (0: frame width)")
      ->capture_default_str();
  app->add_option("--tile-height", o.pipeline.rectify.tile_height, "tile height in pixels (0: frame height)")
      ->capture_default_str();
  app->add_option("--seed", o.seed, "RANSAC seed")->capture_default_str();
}

void add_common_flags(CLI::App* app, Options& o) {
  app->add_flag("-v,--verbose", o.verbosity, "more diagnostics on stderr (repeatable)");
  app->add_flag("-q,--quiet", o.quiet, "suppress per-frame summary lines");
  app->add_option("--jobs", o.jobs, "frames processed in parallel")->check(CLI::PositiveNumber)->capture_default_str();
}

void finalize_config(Options& o) {
  o.pipeline.rectify.segmentation.rng_seed = o.seed;
  o.pipeline.validate();
}

/// Loads a frame and rectifies it; soft errors are returned as text.
struct Prepared {
  std::optional<FrameRecord> frame;
  std::optional<PointCloud> cloud;
  std::optional<RectifyResult> rect;
  std::string error;
};

Prepared prepare(const Dataset& ds, const std::string& id, const Options& o, bool rectify) {
  Prepared p;
  p.frame = ds.load(id);
  if (!rectify) return p;
  p.cloud = depth_to_cloud(*p.frame);
  try {
    p.rect = rectify_frame(p.frame->rgb, *p.cloud, p.frame->intrinsics, o.pipeline.rectify);
  } catch (const Error& e) {
    if (fatal(e.code())) throw;
    p.error = e.what();
  }
  return p;
}

std::string tile_name(const std::string& frame, const TileSpec& s) {
  return frame + "_p" + std::to_string(s.plane_index) + "_i" + std::to_string(s.i) + "_j" + std::to_string(s.j);
}

json plane_json(const PlaneModel& p) {
  return {{"normal", {p.normal.x(), p.normal.y(), p.normal.z()}},
          {"distance", p.distance},
          {"centroid", {p.centroid.x(), p.centroid.y(), p.centroid.z()}}};
}

int cmd_rectify(Options& o) {
  finalize_config(o);
  const Dataset ds = open_dataset(o.dataset);
  const fs::path out = o.out;
  fs::create_directories(out);
  std::vector<SoftFailure> failures;
  std::size_t total_tiles = 0;
  const std::size_t batch = static_cast<std::size_t>(o.jobs);
  for (std::size_t start = 0; start < ds.frame_ids.size(); start += batch) {
    const std::size_t stop = std::min(ds.frame_ids.size(), start + batch);
    std::vector<Prepared> prepared(stop - start);
    parallel_for(start, stop, o.jobs, [&](std::size_t i) { prepared[i - start] = prepare(ds, ds.frame_ids[i], o, true); });

    for (std::size_t i = start; i < stop; ++i) {
      const auto& id = ds.frame_ids[i];
      const Prepared& p = prepared[i - start];
      if (!p.rect) {
        failures.push_back({id, p.error});
        std::cerr << "georect: " << id << ": " << p.error << "\n";
        if (!o.quiet) std::cout << id << ": planes=0 tiles=0 (failed)\n";
        continue;
      }
      json side = {{"frame_id", id}, {"planes", json::array()}, {"tiles", json::array()}};
      for (const auto& pl : p.rect->planes) side["planes"].push_back(plane_json(pl));
      for (const auto& t : p.rect->tiles) {
        const std::string name = tile_name(id, t.spec);
        write_rgb(out / (name + ".png"), t.image, &t.mask);
        side["tiles"].push_back({{"name", name},
                                 {"plane", t.spec.plane_index},
                                 {"i", t.spec.i},
                                 {"j", t.spec.j},
                                 {"width", t.spec.out_width},
                                 {"height", t.spec.out_height},
                                 {"homography", homography_json(t.spec.homography)}});
        if (o.verbosity > 0) std::cerr << "  " << name << " valid=" << t.valid_fraction() << "\n";
      }
      detail::write_text(out / (id + "_homographies.json"), side.dump(2) + "\n");
      total_tiles += p.rect->tiles.size();
      if (!o.quiet) std::cout << id << ": planes=" << p.rect->planes.size() << " tiles=" << p.rect->tiles.size() << "\n";
    }
  }
  report_failures("rectify", ds.frame_ids.size(), failures, ", " + std::to_string(total_tiles) + " tiles");
  return 0;
}

std::unique_ptr<DetectorBackend> make_backend(const Options& o, const Dataset& ds) {
  if (o.backend == "reference") {
    fs::path dir = o.templates;
    if (dir.empty() && fs::is_directory(ds.root / "templates")) dir = ds.root / "templates";
    if (dir.empty()) fail(ErrorCode::InvalidArgument, "the reference backend needs --templates <dir>");
    if (!fs::is_directory(dir)) fail(ErrorCode::FileMissing, "template directory not found: " + dir.string());
    return std::make_unique<ReferenceBackend>(load_templates(dir));
  }
  SubprocessOptions so;
  so.timeout = std::chrono::milliseconds(static_cast<long long>(o.timeout_s * 1000.0));
  return std::make_unique<SubprocessBackend>(o.backend, so);
}

int cmd_detect(Options& o) {
  finalize_config(o);
  const Dataset ds = open_dataset(o.dataset);
  auto backend = make_backend(o, ds);
  const fs::path out = o.out;
  fs::create_directories(out);

  FrameDetections all;
  std::vector<SoftFailure> failures;
  std::size_t total = 0;
  const bool rectify = !o.pipeline.baseline;
  const std::size_t batch = static_cast<std::size_t>(o.jobs);
  for (std::size_t start = 0; start < ds.frame_ids.size(); start += batch) {
    const std::size_t stop = std::min(ds.frame_ids.size(), start + batch);
    std::vector<Prepared> prepared(stop - start);
    parallel_for(start, stop, o.jobs,
                 [&](std::size_t i) { prepared[i - start] = prepare(ds, ds.frame_ids[i], o, rectify); });

    // Detection stays serial in frame order so results do not depend on --jobs.
    for (std::size_t i = start; i < stop; ++i) {
      const auto& id = ds.frame_ids[i];
      Prepared& p = prepared[i - start];
      auto& dets = all[id];
      std::string error = p.error;
      std::size_t planes = 0, tiles = 0, dropped = 0;
      if (error.empty()) {
        try {
          if (!rectify) {
            dets = extended_nms(detect_image(p.frame->rgb, *backend), o.pipeline.nms_iou);
          } else {
            std::vector<TileSpec> specs;
            for (const auto& t : p.rect->tiles) specs.push_back(t.spec);
            auto pool = backproject_all(detect_tiles(p.rect->tiles, *backend), specs, &dropped);
            if (o.pipeline.pool_baseline) {
              const auto raw = detect_image(p.frame->rgb, *backend);
              pool.insert(pool.end(), raw.begin(), raw.end());
            }
            dets = extended_nms(std::move(pool), o.pipeline.nms_iou);
            planes = p.rect->planes.size();
            tiles = specs.size();
          }
        } catch (const Error& e) {
          if (fatal(e.code())) throw;
          error = e.what();
          dets.clear();
        }
      }
      if (!error.empty()) {
        failures.push_back({id, error});
        std::cerr << "georect: " << id << ": " << error << "\n";
      }
      total += dets.size();
      if (!o.quiet) {
        std::cout << id << ": ";
        if (rectify) std::cout << "planes=" << planes << " tiles=" << tiles << " ";
        std::cout << "detections=" << dets.size();
        if (dropped) std::cout << " dropped=" << dropped;
        if (!error.empty()) std::cout << " (failed)";
        std::cout << "\n";
      }
      p = Prepared{};
    }
  }
  save_detections(out / "detections.json", all);
  report_failures("detect", ds.frame_ids.size(), failures, ", " + std::to_string(total) + " detections");
  return 0;
}

int cmd_eval(Options& o) {
  std::vector<GroundTruthFrame> gts;
  if (!o.annotations.empty()) {
    gts = load_annotations(o.annotations);
  } else {
    if (o.dataset.empty()) fail(ErrorCode::InvalidArgument, "eval needs a dataset directory or --annotations");
    const fs::path p = fs::path(o.dataset) / "annotations.json";
    require_file(p);
    gts = load_annotations(p);
  }
  const FrameDetections preds = load_detections(o.detections);
  const EvalReport overall = evaluate(preds, gts);
  const std::string label = o.label.empty() ? (o.pipeline.baseline ? "baseline" : "detections") : o.label;
  std::cout << format_table({{label, overall}});

  const bool have_angles =
      !gts.empty() && std::all_of(gts.begin(), gts.end(), [](const auto& g) { return g.meta.angle_deg.has_value(); });
  json doc;
  if (have_angles) {
    const auto by_angle = report_by_angle(preds, gts);
    std::cout << "\n" << format_angle_table(by_angle);
    doc = report_to_json(overall, by_angle);
  } else {
    doc = report_to_json(overall);
  }
  if (!o.out.empty() && o.out != "-") {
    fs::create_directories(o.out);
    detail::write_text(fs::path(o.out) / "eval.json", doc.dump(2) + "\n");
  }
  return 0;
}

int cmd_synth(Options& o) {
  SweepConfig cfg;
  cfg.angles = o.angles;
  cfg.distances = o.distances;
  cfg.jobs = o.jobs;
  cfg.base.seed = o.seed;
  cfg.base.outlier_fraction = o.outlier_fraction;
  if (o.wall == "plain") cfg.base.wall = WallTexture::Plain;
  else if (o.wall == "plywood") cfg.base.wall = WallTexture::Plywood;
  else if (o.wall == "checker") cfg.base.wall = WallTexture::Checker;
  else fail(ErrorCode::InvalidArgument, "unknown wall texture '" + o.wall + "'");
  if (o.noise_free) cfg.base = cfg.base.noise_free();
  const auto gts = sweep(cfg, o.out);
  if (!o.quiet) {
    for (const auto& g : gts) std::cout << g.frame_id << ": boxes=" << g.boxes.size() << "\n";
  }
  std::cout << "synth: " << gts.size() << " frames written to " << o.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"georect: plane rectification for planar object detection"};
  app.require_subcommand(1);
  Options o;

  auto* rectify = app.add_subcommand("rectify", "segment planes and write rectified tiles with homography sidecars");
  rectify->add_option("dataset", o.dataset, "dataset directory (rgb/, depth/, intrinsics.json)")->required();
  rectify->add_option("--out", o.out, "output directory")->capture_default_str();
  add_segmentation_flags(rectify, o);
  add_common_flags(rectify, o);

  auto* detect = app.add_subcommand("detect", "run the full detection pipeline and write detections.json");
  detect->add_option("dataset", o.dataset, "dataset directory")->required();
  detect->add_option("--out", o.out, "output directory")->capture_default_str();
  add_segmentation_flags(detect, o);
  add_common_flags(detect, o);
  detect->add_option("--nms-iou", o.pipeline.nms_iou, "IoU threshold of the final NMS")->capture_default_str();
  detect->add_option("--backend", o.backend, "detector command line, or 'reference'")->capture_default_str();
  detect->add_option("--templates", o.templates, "template directory for the reference backend");
  detect->add_option("--timeout", o.timeout_s, "per-request detector timeout (s)")->capture_default_str();
  detect->add_flag("--baseline", o.pipeline.baseline, "detect on raw frames without rectification");
  detect->add_flag("--pool-baseline", o.pipeline.pool_baseline, "also pool raw-frame detections into the final NMS");

  auto* eval = app.add_subcommand("eval", "score detections against annotations");
  eval->add_option("dataset", o.dataset, "dataset directory holding annotations.json");
  eval->add_option("--detections", o.detections, "detections file")->required();
  eval->add_option("--annotations", o.annotations, "annotation file (overrides the dataset's)");
  eval->add_option("--out", o.out, "directory for eval.json ('-' to skip)")->capture_default_str();
  eval->add_option("--label", o.label, "row label in the printed table");

  auto* synth = app.add_subcommand("synth", "render a synthetic wall/sign dataset");
  synth->add_option("--out", o.out, "output directory")->required();
  synth->add_option("--angles", o.angles, "yaw angles in degrees")->delimiter(',')->capture_default_str();
  synth->add_option("--distances", o.distances, "wall distances in meters")->delimiter(',')->capture_default_str();
  synth->add_option("--wall", o.wall, "wall texture: plain, plywood or checker")->capture_default_str();
  synth->add_option("--outlier-fraction", o.outlier_fraction, "fraction of depth outliers")->capture_default_str();
  synth->add_flag("--noise-free", o.noise_free, "exact depth, no outliers");
  synth->add_option("--seed", o.seed, "noise seed")->capture_default_str();
  add_common_flags(synth, o);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*rectify) return cmd_rectify(o);
    if (*detect) return cmd_detect(o);
    if (*eval) return cmd_eval(o);
    if (*synth) return cmd_synth(o);
  } catch (const std::exception& e) {
    std::cerr << "georect: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
