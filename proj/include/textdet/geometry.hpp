#pragma once

// Planar primitives and the polygon/box/mask algebra shared by target
// construction, matching costs, losses, and evaluation. All functions here
// are pure; rasterization uses nonzero winding with pixel-center sampling.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <vector>

#include "textdet/common.hpp"

namespace textdet {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

// Ordered vertex list, implicitly closed (last vertex connects to first).
using Polygon = std::vector<Point2>;

struct AABox {
  double x_min = 0.0, y_min = 0.0, x_max = 0.0, y_max = 0.0;
  double width() const { return x_max - x_min; }
  double height() const { return y_max - y_min; }
  double area() const { return width() * height(); }
};

// Normalized (cx, cy, w, h) in [0,1]; the regression parameterization.
struct CenterBox {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;

  AABox to_aabox() const { return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2}; }
  static CenterBox from_aabox(const AABox& b) {
    return {(b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2, b.width(), b.height()};
  }
};

struct RasterMask {
  int height = 0;
  int width = 0;
  std::vector<float> values;  // row-major, in [0,1]; binary after thresholding at 0.5

  float at(int r, int c) const { return values[static_cast<size_t>(r) * width + c]; }
  float& at(int r, int c) { return values[static_cast<size_t>(r) * width + c]; }
};

inline AABox polygon_to_aabox(const Polygon& p) {
  if (p.empty()) throw validation_error("polygon_to_aabox: empty polygon");
  AABox b{p[0].x, p[0].y, p[0].x, p[0].y};
  for (const auto& v : p) {
    b.x_min = std::min(b.x_min, v.x);
    b.y_min = std::min(b.y_min, v.y);
    b.x_max = std::max(b.x_max, v.x);
    b.y_max = std::max(b.y_max, v.y);
  }
  return b;
}

inline double polygon_area(const Polygon& p) {
  double s = 0.0;
  for (size_t i = 0, n = p.size(); i < n; ++i) {
    const Point2& a = p[i];
    const Point2& b = p[(i + 1) % n];
    s += a.x * b.y - b.x * a.y;
  }
  return std::abs(s) / 2.0;
}

inline double polygon_perimeter(const Polygon& p) {
  double s = 0.0;
  for (size_t i = 0, n = p.size(); i < n; ++i) {
    const Point2& a = p[i];
    const Point2& b = p[(i + 1) % n];
    s += std::hypot(b.x - a.x, b.y - a.y);
  }
  return s;
}

// Nonzero-winding point-in-polygon.
inline bool point_in_polygon(const Polygon& p, double x, double y) {
  int winding = 0;
  for (size_t i = 0, n = p.size(); i < n; ++i) {
    const Point2& a = p[i];
    const Point2& b = p[(i + 1) % n];
    if (a.y <= y) {
      if (b.y > y && (b.x - a.x) * (y - a.y) - (x - a.x) * (b.y - a.y) > 0) ++winding;
    } else {
      if (b.y <= y && (b.x - a.x) * (y - a.y) - (x - a.x) * (b.y - a.y) < 0) --winding;
    }
  }
  return winding != 0;
}

// Generalized IoU over axis-aligned boxes; range (-1, 1].
inline double box_giou(const AABox& a, const AABox& b) {
  const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  const double hull = (std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min)) *
                      (std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min));
  const double iou = uni > 0.0 ? inter / uni : 0.0;
  return hull > 0.0 ? iou - (hull - uni) / hull : iou;
}

namespace detail {

// Row-major bit raster used by polygon_iou; one fill per polygon, then
// popcount intersection/union.
struct BitGrid {
  int rows = 0, cols = 0;
  std::vector<uint64_t> words;  // ceil(cols/64) per row

  int words_per_row() const { return (cols + 63) / 64; }
};

// Scanline nonzero fill over an arbitrary sample grid: cell (r, c) is set if
// the point (x0 + (c+0.5)*dx, y0 + (r+0.5)*dy) has nonzero winding.
inline BitGrid fill_polygon_grid(const Polygon& p, int rows, int cols, double x0, double y0,
                                 double dx, double dy) {
  BitGrid g{rows, cols, std::vector<uint64_t>(static_cast<size_t>(rows) * ((cols + 63) / 64), 0)};
  if (p.size() < 3) return g;
  const int wpr = g.words_per_row();
  std::vector<std::pair<double, int>> crossings;  // (x, winding delta)
  for (int r = 0; r < rows; ++r) {
    const double y = y0 + (r + 0.5) * dy;
    crossings.clear();
    for (size_t i = 0, n = p.size(); i < n; ++i) {
      const Point2& a = p[i];
      const Point2& b = p[(i + 1) % n];
      if (a.y <= y && b.y > y) {
        crossings.emplace_back(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x), +1);
      } else if (b.y <= y && a.y > y) {
        crossings.emplace_back(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x), -1);
      }
    }
    if (crossings.empty()) continue;
    std::sort(crossings.begin(), crossings.end());
    int w = 0;
    uint64_t* row = g.words.data() + static_cast<size_t>(r) * wpr;
    for (size_t k = 0; k < crossings.size(); ++k) {
      w += crossings[k].second;
      if (w == 0 || k + 1 >= crossings.size()) continue;
      // span [crossings[k].first, crossings[k+1].first) is inside
      const double xs = crossings[k].first;
      const double xe = crossings[k + 1].first;
      // first cell whose center >= xs, last cell whose center < xe
      int c0 = static_cast<int>(std::ceil((xs - x0) / dx - 0.5));
      int c1 = static_cast<int>(std::ceil((xe - x0) / dx - 0.5)) - 1;
      c0 = std::max(c0, 0);
      c1 = std::min(c1, cols - 1);
      for (int c = c0; c <= c1; ++c) row[c >> 6] |= (1ULL << (c & 63));
    }
  }
  return g;
}

inline int64_t popcount_and_or(const BitGrid& a, const BitGrid& b, int64_t& union_out) {
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.words.size(); ++i) {
    inter += std::popcount(a.words[i] & b.words[i]);
    uni += std::popcount(a.words[i] | b.words[i]);
  }
  union_out = uni;
  return inter;
}

}  // namespace detail

// IoU of two polygons in a shared frame, computed by rasterizing both onto a
// raster_res x raster_res grid spanning their joint bounding box. Returns 0
// when both rasterizations are empty.
inline double polygon_iou(const Polygon& a, const Polygon& b, int raster_res = 256) {
  if (a.size() < 3 || b.size() < 3) return 0.0;
  const AABox ba = polygon_to_aabox(a);
  const AABox bb = polygon_to_aabox(b);
  if (ba.x_min > bb.x_max || bb.x_min > ba.x_max || ba.y_min > bb.y_max || bb.y_min > ba.y_max)
    return 0.0;  // disjoint bounds, intersection is empty
  AABox j{std::min(ba.x_min, bb.x_min), std::min(ba.y_min, bb.y_min),
          std::max(ba.x_max, bb.x_max), std::max(ba.y_max, bb.y_max)};
  double w = j.width(), h = j.height();
  if (w <= 0) w = 1e-9;
  if (h <= 0) h = 1e-9;
  const double dx = w / raster_res, dy = h / raster_res;
  const auto ga = detail::fill_polygon_grid(a, raster_res, raster_res, j.x_min, j.y_min, dx, dy);
  const auto gb = detail::fill_polygon_grid(b, raster_res, raster_res, j.x_min, j.y_min, dx, dy);
  int64_t uni = 0;
  const int64_t inter = detail::popcount_and_or(ga, gb, uni);
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

// Resample a polygon boundary to exactly k points, equally spaced by arc
// length, starting at the vertex with the smallest (y, x) key. Traversal
// follows the stored vertex order, so the result is invariant to rotations
// of the input list.
inline Polygon resample_polygon(const Polygon& p, int k) {
  if (k < 4 || k % 2 != 0) throw validation_error("resample_polygon: k must be even and >= 4");
  if (p.size() < 3) throw validation_error("resample_polygon: need at least 3 vertices");
  const size_t n = p.size();
  size_t start = 0;
  for (size_t i = 1; i < n; ++i) {
    if (p[i].y < p[start].y || (p[i].y == p[start].y && p[i].x < p[start].x)) start = i;
  }
  std::vector<double> cum(n + 1, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const Point2& a = p[(start + i) % n];
    const Point2& b = p[(start + i + 1) % n];
    cum[i + 1] = cum[i] + std::hypot(b.x - a.x, b.y - a.y);
  }
  const double total = cum[n];
  if (total <= 0.0) throw validation_error("resample_polygon: zero-perimeter polygon");
  Polygon out(static_cast<size_t>(k));
  size_t seg = 0;
  for (int i = 0; i < k; ++i) {
    const double target = total * i / k;
    while (seg + 1 < n && cum[seg + 1] < target) ++seg;
    const double seg_len = cum[seg + 1] - cum[seg];
    const double t = seg_len > 0.0 ? (target - cum[seg]) / seg_len : 0.0;
    const Point2& a = p[(start + seg) % n];
    const Point2& b = p[(start + seg + 1) % n];
    out[i] = {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
  }
  return out;
}

// Rasterize onto an h x w pixel grid (polygon coordinates in pixels,
// nonzero fill, pixel-center sampling).
inline RasterMask rasterize_polygon(const Polygon& p, int h, int w) {
  RasterMask m{h, w, std::vector<float>(static_cast<size_t>(h) * w, 0.0f)};
  if (p.size() < 3) return m;
  const auto g = detail::fill_polygon_grid(p, h, w, 0.0, 0.0, 1.0, 1.0);
  const int wpr = g.words_per_row();
  for (int r = 0; r < h; ++r) {
    const uint64_t* row = g.words.data() + static_cast<size_t>(r) * wpr;
    for (int c = 0; c < w; ++c) {
      if (row[c >> 6] & (1ULL << (c & 63))) m.at(r, c) = 1.0f;
    }
  }
  return m;
}

// IoU of thresholded masks; both-empty counts as full agreement (1.0).
inline double mask_iou(const RasterMask& a, const RasterMask& b) {
  if (a.height != b.height || a.width != b.width)
    throw validation_error("mask_iou: dimension mismatch");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.values.size(); ++i) {
    const bool va = a.values[i] >= 0.5f;
    const bool vb = b.values[i] >= 0.5f;
    inter += (va && vb) ? 1 : 0;
    uni += (va || vb) ? 1 : 0;
  }
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 1.0;
}

}  // namespace textdet
