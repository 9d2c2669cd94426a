#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <vector>

#include "georect/detection.hpp"
#include "georect/error.hpp"
#include "georect/image.hpp"

namespace georect {

struct DetectorTemplate {
  int class_id = 0;
  RgbImage image;
};

struct ReferenceDetectorOptions {
  double threshold = 0.8;
  double coarse_margin = 0.3;    // coarse level accepts peaks above threshold - margin
  int coarse_template_side = 16; // template side (px) targeted at the coarsest level
  int max_candidates = 6;        // coarse peaks refined per template
  double min_valid_fraction = 0.95;
  double blur_sigma = 1.0;       // applied to images and templates alike
  double suppress_iou = 0.5;     // class-agnostic merge of overlapping hits
};

namespace detail {

struct Plane {
  int w = 0;
  int h = 0;
  std::vector<float> v;
  float at(int x, int y) const { return v[static_cast<std::size_t>(y) * w + x]; }
};

inline Plane gaussian_blur(const Plane& src, double sigma) {
  if (sigma <= 0.0) return src;
  const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<float> k(2 * r + 1);
  float sum = 0.0f;
  for (int i = -r; i <= r; ++i) sum += k[i + r] = static_cast<float>(std::exp(-0.5 * i * i / (sigma * sigma)));
  for (auto& x : k) x /= sum;
  Plane tmp{src.w, src.h, std::vector<float>(src.v.size())};
  for (int y = 0; y < src.h; ++y) {
    for (int x = 0; x < src.w; ++x) {
      float acc = 0.0f;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * src.at(std::clamp(x + i, 0, src.w - 1), y);
      tmp.v[static_cast<std::size_t>(y) * src.w + x] = acc;
    }
  }
  Plane out{src.w, src.h, std::vector<float>(src.v.size())};
  for (int y = 0; y < src.h; ++y) {
    for (int x = 0; x < src.w; ++x) {
      float acc = 0.0f;
      for (int i = -r; i <= r; ++i) acc += k[i + r] * tmp.at(x, std::clamp(y + i, 0, src.h - 1));
      out.v[static_cast<std::size_t>(y) * src.w + x] = acc;
    }
  }
  return out;
}

inline Plane box_downsample(const Plane& src, int f) {
  if (f <= 1) return src;
  Plane out{src.w / f, src.h / f, {}};
  out.v.assign(static_cast<std::size_t>(out.w) * out.h, 0.0f);
  const float norm = 1.0f / static_cast<float>(f * f);
  for (int y = 0; y < out.h; ++y) {
    for (int x = 0; x < out.w; ++x) {
      float acc = 0.0f;
      for (int dy = 0; dy < f; ++dy)
        for (int dx = 0; dx < f; ++dx) acc += src.at(x * f + dx, y * f + dy);
      out.v[static_cast<std::size_t>(y) * out.w + x] = acc * norm;
    }
  }
  return out;
}

struct Integral {
  int w = 0;  // of the source plane
  std::vector<double> s;

  explicit Integral(const Plane& p, bool squared = false) : w(p.w), s(static_cast<std::size_t>(p.w + 1) * (p.h + 1), 0.0) {
    for (int y = 0; y < p.h; ++y) {
      double row = 0.0;
      for (int x = 0; x < p.w; ++x) {
        const double v = p.at(x, y);
        row += squared ? v * v : v;
        s[idx(x + 1, y + 1)] = s[idx(x + 1, y)] + row;
      }
    }
  }
  std::size_t idx(int x, int y) const { return static_cast<std::size_t>(y) * (w + 1) + x; }
  double box(int x, int y, int bw, int bh) const {
    return s[idx(x + bw, y + bh)] - s[idx(x, y + bh)] - s[idx(x + bw, y)] + s[idx(x, y)];
  }
};

// Image level: gray plane plus window statistics.
struct Level {
  Plane gray;
  Plane valid;
  Integral sum;
  Integral sumsq;
  Integral valid_sum;

  Level(Plane g, Plane m) : gray(std::move(g)), valid(std::move(m)), sum(gray), sumsq(gray, true), valid_sum(valid) {}
};

struct ZeroMeanTemplate {
  int w = 0;
  int h = 0;
  std::vector<float> v;
  double norm = 0.0;

  explicit ZeroMeanTemplate(const Plane& p) : w(p.w), h(p.h), v(p.v) {
    double mean = 0.0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (auto& x : v) {
      x = static_cast<float>(x - mean);
      ss += static_cast<double>(x) * x;
    }
    norm = std::sqrt(ss);
  }
};

inline double ncc_at(const Level& lv, const ZeroMeanTemplate& t, int x, int y) {
  const double n = static_cast<double>(t.w) * t.h;
  const double s = lv.sum.box(x, y, t.w, t.h);
  const double var = lv.sumsq.box(x, y, t.w, t.h) - s * s / n;
  if (var <= 1e-6 * n || t.norm <= 1e-9) return 0.0;
  double cross = 0.0;
  for (int j = 0; j < t.h; ++j) {
    const float* row = &lv.gray.v[static_cast<std::size_t>(y + j) * lv.gray.w + x];
    const float* tr = &t.v[static_cast<std::size_t>(j) * t.w];
    float acc = 0.0f;
    for (int i = 0; i < t.w; ++i) acc += row[i] * tr[i];
    cross += acc;
  }
  return cross / (std::sqrt(var) * t.norm);
}

inline Plane rgb_channel_plane(const RgbImage& img, int c) {
  Plane p{img.width(), img.height(), std::vector<float>(img.pixel_count())};
  for (int y = 0; y < img.height(); ++y)
    for (int x = 0; x < img.width(); ++x) p.v[static_cast<std::size_t>(y) * p.w + x] = img.at(x, y, c);
  return p;
}

struct ColorPlanes {
  std::array<Plane, 3> ch;
  Plane gray;
};

inline ColorPlanes prepare_color(const RgbImage& img, double sigma) {
  ColorPlanes out;
  for (int c = 0; c < 3; ++c) out.ch[c] = gaussian_blur(rgb_channel_plane(img, c), sigma);
  out.gray = Plane{img.width(), img.height(), std::vector<float>(img.pixel_count())};
  for (std::size_t i = 0; i < out.gray.v.size(); ++i) {
    out.gray.v[i] = 0.299f * out.ch[0].v[i] + 0.587f * out.ch[1].v[i] + 0.114f * out.ch[2].v[i];
  }
  return out;
}

// NCC over the concatenated colour channels with one shared mean.
inline double color_ncc(const ColorPlanes& img, const ColorPlanes& tpl, int x, int y) {
  const int tw = tpl.gray.w, th = tpl.gray.h;
  const double n = 3.0 * tw * th;
  double si = 0, st = 0, sii = 0, stt = 0, sit = 0;
  for (int c = 0; c < 3; ++c) {
    for (int j = 0; j < th; ++j) {
      for (int i = 0; i < tw; ++i) {
        const double a = img.ch[c].at(x + i, y + j);
        const double b = tpl.ch[c].at(i, j);
        si += a;
        st += b;
        sii += a * a;
        stt += b * b;
        sit += a * b;
      }
    }
  }
  const double vi = sii - si * si / n;
  const double vt = stt - st * st / n;
  if (vi <= 1e-6 * n || vt <= 1e-6 * n) return 0.0;
  return (sit - si * st / n) / std::sqrt(vi * vt);
}

}  // namespace detail

/// Single-scale template matcher standing in for a learned detector: each
/// template is correlated at its native size, coarse-to-fine, and hits above
/// the threshold are reported with score = colour NCC.
class ReferenceDetector {
 public:
  ReferenceDetector(std::vector<DetectorTemplate> templates, ReferenceDetectorOptions opts = {})
      : opts_(opts) {
    if (templates.empty()) fail(ErrorCode::InvalidArgument, "reference detector needs at least one template");
    for (auto& t : templates) {
      if (t.image.channels() != 3 || t.image.width() < 2 || t.image.height() < 2) {
        fail(ErrorCode::InvalidArgument, "templates must be RGB and at least 2x2");
      }
      Prepared p;
      p.class_id = t.class_id;
      p.width = t.image.width();
      p.height = t.image.height();
      p.color = detail::prepare_color(t.image, opts_.blur_sigma);
      const int side = std::min(p.width, p.height);
      p.coarse_factor = std::max(1, side / std::max(1, opts_.coarse_template_side));
      for (int f = p.coarse_factor; f >= 1; f = f > 1 ? f / 2 : 0) {
        p.levels.emplace(f, detail::ZeroMeanTemplate(detail::box_downsample(p.color.gray, f)));
        if (f == 1) break;
      }
      prepared_.push_back(std::move(p));
    }
  }

  const ReferenceDetectorOptions& options() const { return opts_; }

  std::vector<Detection> detect(const RgbImage& image, const Mask* mask = nullptr) const {
    for (const auto& t : prepared_) {
      if (t.width > image.width() || t.height > image.height()) {
        fail(ErrorCode::TemplateLargerThanTile, "template does not fit in the tile");
      }
    }
    const detail::ColorPlanes color = detail::prepare_color(image, opts_.blur_sigma);
    detail::Plane valid{image.width(), image.height(), std::vector<float>(image.pixel_count(), 1.0f)};
    if (mask != nullptr) {
      for (std::size_t i = 0; i < valid.v.size(); ++i) valid.v[i] = mask->data()[i] ? 1.0f : 0.0f;
    }

    std::map<int, std::unique_ptr<detail::Level>> levels;
    auto level = [&](int f) -> const detail::Level& {
      auto& slot = levels[f];
      if (!slot) {
        slot = std::make_unique<detail::Level>(detail::box_downsample(color.gray, f), detail::box_downsample(valid, f));
      }
      return *slot;
    };

    std::vector<Detection> hits;
    for (const auto& t : prepared_) {
      for (const auto& [x, y] : coarse_peaks(level(t.coarse_factor), t)) {
        int fx = x * t.coarse_factor, fy = y * t.coarse_factor;
        // Descend the pyramid, re-searching a small window at each level.
        for (int f = t.coarse_factor / 2; f >= 1; f = f > 1 ? f / 2 : 0) {
          refine(level(f), t.levels.at(f), f, fx, fy, 2);
          if (f == 1) break;
        }
        double best = -1.0;
        int bx = fx, by = fy;
        for (int dy = -1; dy <= 1; ++dy) {
          for (int dx = -1; dx <= 1; ++dx) {
            const int px = fx + dx, py = fy + dy;
            if (px < 0 || py < 0 || px + t.width > image.width() || py + t.height > image.height()) continue;
            if (!window_valid(level(1), px, py, t.width, t.height)) continue;
            const double s = detail::color_ncc(color, t.color, px, py);
            if (s > best) {
              best = s;
              bx = px;
              by = py;
            }
          }
        }
        if (best >= opts_.threshold) {
          hits.push_back({t.class_id, std::clamp(best, 0.0, 1.0),
                          BBox{bx - 0.5, by - 0.5, double(t.width), double(t.height)}, std::nullopt});
        }
      }
    }

    // Overlapping hits from different templates collapse onto the best one.
    std::sort(hits.begin(), hits.end(), ranks_before);
    std::vector<Detection> out;
    for (const auto& h : hits) {
      const bool dup = std::any_of(out.begin(), out.end(),
                                   [&](const Detection& k) { return iou(k.bbox, h.bbox) >= opts_.suppress_iou; });
      if (!dup) out.push_back(h);
    }
    return out;
  }

 private:
  struct Prepared {
    int class_id = 0;
    int width = 0;
    int height = 0;
    int coarse_factor = 1;
    detail::ColorPlanes color;
    std::map<int, detail::ZeroMeanTemplate> levels;
  };

  bool window_valid(const detail::Level& lv, int x, int y, int w, int h) const {
    return lv.valid_sum.box(x, y, w, h) >= opts_.min_valid_fraction * w * h;
  }

  std::vector<std::pair<int, int>> coarse_peaks(const detail::Level& lv, const Prepared& t) const {
    const auto& zt = t.levels.at(t.coarse_factor);
    const int nx = lv.gray.w - zt.w + 1, ny = lv.gray.h - zt.h + 1;
    if (nx <= 0 || ny <= 0) return {};
    std::vector<float> score(static_cast<std::size_t>(nx) * ny, -1.0f);
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) {
        if (!window_valid(lv, x, y, zt.w, zt.h)) continue;
        score[static_cast<std::size_t>(y) * nx + x] = static_cast<float>(detail::ncc_at(lv, zt, x, y));
      }
    }
    const float floor = static_cast<float>(opts_.threshold - opts_.coarse_margin);
    struct Peak {
      float s;
      int x, y;
    };
    std::vector<Peak> peaks;
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) {
        const float s = score[static_cast<std::size_t>(y) * nx + x];
        if (s < floor) continue;
        bool is_max = true;
        for (int dy = -1; dy <= 1 && is_max; ++dy) {
          for (int dx = -1; dx <= 1 && is_max; ++dx) {
            const int qx = x + dx, qy = y + dy;
            if ((dx == 0 && dy == 0) || qx < 0 || qy < 0 || qx >= nx || qy >= ny) continue;
            const float q = score[static_cast<std::size_t>(qy) * nx + qx];
            // Plateaus resolve to their first cell in scan order.
            is_max = q < s || (q == s && (qy > y || (qy == y && qx > x)));
          }
        }
        if (is_max) peaks.push_back({s, x, y});
      }
    }
    std::sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) {
      if (a.s != b.s) return a.s > b.s;
      return std::tie(a.y, a.x) < std::tie(b.y, b.x);
    });
    std::vector<std::pair<int, int>> out;
    const int sep = std::max(1, std::min(zt.w, zt.h) / 2);
    for (const auto& p : peaks) {
      if (static_cast<int>(out.size()) >= opts_.max_candidates) break;
      const bool near = std::any_of(out.begin(), out.end(), [&](const auto& q) {
        return std::abs(q.first - p.x) < sep && std::abs(q.second - p.y) < sep;
      });
      if (!near) out.emplace_back(p.x, p.y);
    }
    return out;
  }

  // Best gray-NCC position within +-radius level pixels of (fx, fy)/f.
  void refine(const detail::Level& lv, const detail::ZeroMeanTemplate& zt, int f, int& fx, int& fy, int radius) const {
    const int cx = fx / f, cy = fy / f;
    double best = -2.0;
    int bx = cx, by = cy;
    for (int dy = -radius; dy <= radius; ++dy) {
      for (int dx = -radius; dx <= radius; ++dx) {
        const int x = cx + dx, y = cy + dy;
        if (x < 0 || y < 0 || x + zt.w > lv.gray.w || y + zt.h > lv.gray.h) continue;
        if (!window_valid(lv, x, y, zt.w, zt.h)) continue;
        const double s = detail::ncc_at(lv, zt, x, y);
        if (s > best) {
          best = s;
          bx = x;
          by = y;
        }
      }
    }
    fx = bx * f;
    fy = by * f;
  }

  ReferenceDetectorOptions opts_;
  std::vector<Prepared> prepared_;
};

inline std::vector<Detection> reference_detect(const RectifiedTile& tile, const std::vector<DetectorTemplate>& templates,
                                               double threshold) {
  ReferenceDetectorOptions opts;
  opts.threshold = threshold;
  return ReferenceDetector(templates, opts).detect(tile.image, tile.mask.empty() ? nullptr : &tile.mask);
}

}  // namespace georect
