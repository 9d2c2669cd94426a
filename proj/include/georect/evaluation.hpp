#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "georect/detection.hpp"
#include "georect/error.hpp"

namespace georect {

struct Annotation {
  int class_id = 0;
  BBox bbox;

  bool operator==(const Annotation&) const = default;
};

struct FrameMetadata {
  std::optional<double> angle_deg;
  std::optional<double> distance_m;
  std::optional<std::string> background;

  bool operator==(const FrameMetadata&) const = default;
};

struct GroundTruthFrame {
  std::string frame_id;
  std::vector<Annotation> boxes;
  FrameMetadata meta;

  bool operator==(const GroundTruthFrame&) const = default;
};

using FrameDetections = std::map<std::string, std::vector<Detection>>;

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) t.push_back(0.5 + 0.05 * k);
  return t;
}

struct EvalOptions {
  std::vector<double> thresholds = coco_iou_thresholds();
  int num_classes = 13;  // declared class set is [0, num_classes)
  int max_detections = 100;  // per frame and class
};

struct EvalReport {
  double map50 = 0.0;
  double map75 = 0.0;
  double map = 0.0;     // averaged over the threshold list
  double ar = 0.0;      // averaged over classes and thresholds
  double recall50 = 0.0;  // matched / total ground truth at IoU 0.5, all classes pooled
  std::vector<double> thresholds;
  std::vector<double> map_per_threshold;
  std::size_t frames = 0;
  std::size_t ground_truth = 0;
  std::size_t predictions = 0;
};

namespace detail {

struct ClassThresholdResult {
  double ap = 0.0;
  double recall = 0.0;
  std::size_t true_positives = 0;
  std::size_t npos = 0;
};

/// 101-point interpolated AP of a ranked list of TP/FP flags.
inline double interpolated_ap(const std::vector<bool>& tp, std::size_t npos) {
  if (npos == 0) return 0.0;
  const std::size_t n = tp.size();
  std::vector<double> precision(n), recall(n);
  std::size_t ctp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    ctp += tp[k] ? 1 : 0;
    precision[k] = static_cast<double>(ctp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(ctp) / static_cast<double>(npos);
  }
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double sum = 0.0;
  for (int r = 0; r <= 100; ++r) {
    const double level = r / 100.0;
    const auto it = std::lower_bound(recall.begin(), recall.end(), level - 1e-12);
    if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
  }
  return sum / 101.0;
}

struct RankedHit {
  double score;
  std::size_t frame;
  std::size_t rank;
  bool tp;
};

inline ClassThresholdResult evaluate_class(const std::vector<std::vector<const Detection*>>& preds,
                                           const std::vector<std::vector<const Annotation*>>& gts, double thr) {
  ClassThresholdResult res;
  std::vector<RankedHit> hits;
  for (std::size_t f = 0; f < gts.size(); ++f) {
    res.npos += gts[f].size();
    std::vector<bool> used(gts[f].size(), false);
    for (std::size_t r = 0; r < preds[f].size(); ++r) {
      const Detection& d = *preds[f][r];
      int best = -1;
      double best_iou = 0.0;
      for (std::size_t g = 0; g < gts[f].size(); ++g) {
        if (used[g]) continue;
        const double v = iou(d.bbox, gts[f][g]->bbox);
        if (v >= thr && v > best_iou) {
          best = static_cast<int>(g);
          best_iou = v;
        }
      }
      if (best >= 0) used[static_cast<std::size_t>(best)] = true;
      hits.push_back({d.score, f, r, best >= 0});
    }
  }
  std::stable_sort(hits.begin(), hits.end(), [](const RankedHit& a, const RankedHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return std::tie(a.frame, a.rank) < std::tie(b.frame, b.rank);
  });
  std::vector<bool> flags;
  flags.reserve(hits.size());
  for (const auto& h : hits) {
    flags.push_back(h.tp);
    res.true_positives += h.tp ? 1 : 0;
  }
  res.ap = interpolated_ap(flags, res.npos);
  res.recall = res.npos > 0 ? static_cast<double>(res.true_positives) / static_cast<double>(res.npos) : 0.0;
  return res;
}

}  // namespace detail

/// COCO-style evaluation. Classes without ground truth are left out of every
/// mean; with no ground truth at all every metric is 0.
inline EvalReport evaluate(const FrameDetections& preds, const std::vector<GroundTruthFrame>& gts,
                           const EvalOptions& opts = {}) {
  std::map<std::string, std::size_t> frame_index;
  for (std::size_t f = 0; f < gts.size(); ++f) {
    if (!frame_index.emplace(gts[f].frame_id, f).second) {
      fail(ErrorCode::InvalidArgument, "duplicate ground-truth frame id '" + gts[f].frame_id + "'");
    }
  }
  auto check_class = [&](int c) {
    if (c < 0 || c >= opts.num_classes) fail(ErrorCode::UnknownClassId, "class id " + std::to_string(c) + " is not declared");
  };

  EvalReport rep;
  rep.thresholds = opts.thresholds;
  rep.frames = gts.size();
  for (const auto& g : gts) {
    for (const auto& a : g.boxes) check_class(a.class_id);
    rep.ground_truth += g.boxes.size();
  }

  const auto nc = static_cast<std::size_t>(opts.num_classes);
  // [class][frame] -> ranked, capped predictions / annotations
  std::vector<std::vector<std::vector<const Detection*>>> pc(nc, std::vector<std::vector<const Detection*>>(gts.size()));
  std::vector<std::vector<std::vector<const Annotation*>>> gc(nc, std::vector<std::vector<const Annotation*>>(gts.size()));
  for (const auto& [id, dets] : preds) {
    const auto it = frame_index.find(id);
    if (it == frame_index.end()) fail(ErrorCode::UnknownFrame, "predictions for unknown frame '" + id + "'");
    for (const auto& d : dets) {
      check_class(d.class_id);
      pc[static_cast<std::size_t>(d.class_id)][it->second].push_back(&d);
    }
    rep.predictions += dets.size();
  }
  for (std::size_t f = 0; f < gts.size(); ++f)
    for (const auto& a : gts[f].boxes) gc[static_cast<std::size_t>(a.class_id)][f].push_back(&a);
  for (auto& per_class : pc) {
    for (auto& list : per_class) {
      std::stable_sort(list.begin(), list.end(), [](const Detection* a, const Detection* b) { return ranks_before(*a, *b); });
      if (list.size() > static_cast<std::size_t>(opts.max_detections)) list.resize(static_cast<std::size_t>(opts.max_detections));
    }
  }

  std::vector<std::size_t> active;
  for (std::size_t c = 0; c < nc; ++c) {
    const bool has_gt = std::any_of(gc[c].begin(), gc[c].end(), [](const auto& v) { return !v.empty(); });
    if (has_gt) active.push_back(c);
  }
  if (active.empty()) {
    rep.map_per_threshold.assign(opts.thresholds.size(), 0.0);
    return rep;
  }

  auto mean_ap = [&](double thr, double* recall_sum, std::size_t* tp_total) {
    double ap = 0.0;
    for (std::size_t c : active) {
      const auto r = detail::evaluate_class(pc[c], gc[c], thr);
      ap += r.ap;
      if (recall_sum) *recall_sum += r.recall;
      if (tp_total) *tp_total += r.true_positives;
    }
    return ap / static_cast<double>(active.size());
  };

  double recall_sum = 0.0;
  for (double t : opts.thresholds) rep.map_per_threshold.push_back(mean_ap(t, &recall_sum, nullptr));
  if (!opts.thresholds.empty()) {
    double s = 0.0;
    for (double v : rep.map_per_threshold) s += v;
    rep.map = s / static_cast<double>(opts.thresholds.size());
    rep.ar = recall_sum / static_cast<double>(opts.thresholds.size() * active.size());
  }
  std::size_t tp50 = 0;
  rep.map50 = mean_ap(0.5, nullptr, &tp50);
  rep.map75 = mean_ap(0.75, nullptr, nullptr);
  rep.recall50 = static_cast<double>(tp50) / static_cast<double>(rep.ground_truth);
  return rep;
}

/// Partitions frames by viewing angle and evaluates each partition.
inline std::map<double, EvalReport> report_by_angle(const FrameDetections& preds, const std::vector<GroundTruthFrame>& gts,
                                                    const EvalOptions& opts = {}) {
  std::map<double, std::vector<GroundTruthFrame>> groups;
  for (const auto& g : gts) {
    if (!g.meta.angle_deg) fail(ErrorCode::MissingAngleMetadata, "frame '" + g.frame_id + "' has no angle metadata");
    groups[*g.meta.angle_deg].push_back(g);
  }
  std::map<double, EvalReport> out;
  for (const auto& [angle, frames] : groups) {
    FrameDetections sub;
    for (const auto& g : frames) {
      const auto it = preds.find(g.frame_id);
      if (it != preds.end()) sub.emplace(it->first, it->second);
    }
    out.emplace(angle, evaluate(sub, frames, opts));
  }
  return out;
}

namespace detail {

inline std::string fmt3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

inline std::string angle_label(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g deg", a);
  return buf;
}

}  // namespace detail

/// Rows of (label, report) as a fixed-width table with the four headline columns.
inline std::string format_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::size_t label_w = 8;
  for (const auto& [label, _] : rows) label_w = std::max(label_w, label.size());
  std::ostringstream os;
  auto cell = [&](const std::string& s, std::size_t w) {
    os << s;
    for (std::size_t k = s.size(); k < w; ++k) os << ' ';
  };
  const std::vector<std::string> heads{"mAP (IoU=0.50)", "mAP (IoU=0.75)", "mAP (IoU=0.50:0.05:0.95)",
                                       "AR (IoU=0.50:0.05:0.95)"};
  cell("", label_w + 2);
  for (const auto& h : heads) cell(h, h.size() + 2);
  os << '\n';
  for (const auto& [label, r] : rows) {
    cell(label, label_w + 2);
    const double vals[4] = {r.map50, r.map75, r.map, r.ar};
    for (int k = 0; k < 4; ++k) cell(detail::fmt3(vals[k]), heads[static_cast<std::size_t>(k)].size() + 2);
    os << '\n';
  }
  return os.str();
}

inline std::string format_angle_table(const std::map<double, EvalReport>& by_angle) {
  std::vector<std::pair<std::string, EvalReport>> rows;
  for (const auto& [a, r] : by_angle) rows.emplace_back(detail::angle_label(a), r);
  return format_table(rows);
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  return {{"map50", r.map50},
          {"map75", r.map75},
          {"map", r.map},
          {"ar", r.ar},
          {"recall50", r.recall50},
          {"thresholds", r.thresholds},
          {"map_per_threshold", r.map_per_threshold},
          {"frames", r.frames},
          {"ground_truth", r.ground_truth},
          {"predictions", r.predictions}};
}

inline nlohmann::json report_to_json(const EvalReport& overall, const std::map<double, EvalReport>& by_angle) {
  nlohmann::json j = {{"overall", report_to_json(overall)}};
  nlohmann::json angles = nlohmann::json::array();
  for (const auto& [a, r] : by_angle) {
    auto e = report_to_json(r);
    e["angle_deg"] = a;
    angles.push_back(std::move(e));
  }
  j["by_angle"] = std::move(angles);
  return j;
}

}  // namespace georect
