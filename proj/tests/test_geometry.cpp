#include "textdet/geometry.hpp"

#include <doctest.h>

#include <cmath>

#include "textdet/rng.hpp"

using namespace textdet;

namespace {

// Independent GIoU oracle: direct evaluation of the defining formula with
// explicit min/max arithmetic, kept separate from box_giou's implementation.
double giou_oracle(const AABox& a, const AABox& b) {
  const double ax = std::max(0.0, a.x_max - a.x_min) * std::max(0.0, a.y_max - a.y_min);
  const double bx = std::max(0.0, b.x_max - b.x_min) * std::max(0.0, b.y_max - b.y_min);
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  const double inter = (iw > 0 && ih > 0) ? iw * ih : 0.0;
  const double uni = ax + bx - inter;
  const double hw = std::max(a.x_max, b.x_max) - std::min(a.x_min, b.x_min);
  const double hh = std::max(a.y_max, b.y_max) - std::min(a.y_min, b.y_min);
  const double hull = hw * hh;
  return inter / uni - (hull - uni) / hull;
}

Polygon rect_poly(double x0, double y0, double x1, double y1) {
  return {{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}};
}

AABox random_box(Rng& rng) {
  const double x0 = rng.uniform(0, 10), y0 = rng.uniform(0, 10);
  return {x0, y0, x0 + rng.uniform(0.1, 5.0), y0 + rng.uniform(0.1, 5.0)};
}

Polygon random_simple_polygon(Rng& rng, int n) {
  // star-shaped around a center: always simple
  Polygon p;
  const double cx = rng.uniform(3, 7), cy = rng.uniform(3, 7);
  for (int i = 0; i < n; ++i) {
    const double ang = 2.0 * std::numbers::pi * i / n;
    const double r = rng.uniform(0.5, 3.0);
    p.push_back({cx + r * std::cos(ang), cy + r * std::sin(ang)});
  }
  return p;
}

}  // namespace

TEST_CASE("polygon_to_aabox basics") {
  CHECK(polygon_to_aabox(rect_poly(0, 0, 1, 1)).x_max == 1.0);
  const AABox t = polygon_to_aabox({{0, 0}, {2, 0}, {1, 1}});
  CHECK(t.x_min == 0.0);
  CHECK(t.y_min == 0.0);
  CHECK(t.x_max == 2.0);
  CHECK(t.y_max == 1.0);
  // degenerate colinear input: zero-height box, no error
  const AABox d = polygon_to_aabox({{0, 0}, {1, 0}, {2, 0}});
  CHECK(d.y_min == d.y_max);
}

TEST_CASE("box_giou hand values") {
  const AABox a{0, 0, 1, 1};
  CHECK(box_giou(a, a) == doctest::Approx(1.0));
  // disjoint: IoU 0, hull 3, union 2 -> -(3-2)/3
  CHECK(box_giou({0, 0, 1, 1}, {2, 0, 3, 1}) == doctest::Approx(-1.0 / 3.0));
  // overlapping: 1/7 - 2/9 = -5/63
  CHECK(box_giou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(-5.0 / 63.0));
}

TEST_CASE("box_giou properties on random boxes") {
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const AABox a = random_box(rng), b = random_box(rng);
    const double g = box_giou(a, b);
    CHECK(g == doctest::Approx(box_giou(b, a)));
    CHECK(g == doctest::Approx(giou_oracle(a, b)).epsilon(1e-9));
    CHECK(g > -1.0);
    CHECK(g <= 1.0 + 1e-12);
    // GIoU <= IoU
    const double iw = std::max(0.0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
    const double ih = std::max(0.0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
    const double iou = iw * ih / (a.area() + b.area() - iw * ih);
    CHECK(g <= iou + 1e-12);
  }
  CHECK(box_giou(random_box(rng), random_box(rng)) < 1.0);
}

TEST_CASE("polygon_iou analytic cases") {
  const Polygon a = rect_poly(0, 0, 1, 1);
  CHECK(polygon_iou(a, a, 256) == doctest::Approx(1.0).epsilon(0.01));
  // overlap 0.5 over union 1.5
  CHECK(polygon_iou(a, rect_poly(0.5, 0, 1.5, 1), 256) == doctest::Approx(1.0 / 3.0).epsilon(0.01));
  CHECK(polygon_iou(a, rect_poly(3, 3, 4, 4), 256) == 0.0);
}

TEST_CASE("polygon_iou symmetry and resolution convergence") {
  Rng rng(11);
  for (int i = 0; i < 30; ++i) {
    const Polygon a = random_simple_polygon(rng, 8);
    const Polygon b = random_simple_polygon(rng, 8);
    CHECK(polygon_iou(a, b, 128) == doctest::Approx(polygon_iou(b, a, 128)));
    const double i1 = polygon_iou(a, b, 128);
    const double i2 = polygon_iou(a, b, 256);
    const double i3 = polygon_iou(a, b, 512);
    CHECK(std::abs(i2 - i3) <= std::abs(i1 - i3) + 0.01);
    CHECK(std::abs(i2 - i3) < 0.02);
  }
}

TEST_CASE("resample_polygon squares") {
  const Polygon sq = rect_poly(0, 0, 1, 1);
  const Polygon r4 = resample_polygon(sq, 4);
  REQUIRE(r4.size() == 4);
  // starts at smallest (y, x) vertex = (0,0), follows stored order
  CHECK(r4[0].x == doctest::Approx(0.0));
  CHECK(r4[0].y == doctest::Approx(0.0));
  for (const auto& v : r4) {
    const bool corner = (v.x == doctest::Approx(0.0) || v.x == doctest::Approx(1.0)) &&
                        (v.y == doctest::Approx(0.0) || v.y == doctest::Approx(1.0));
    CHECK(corner);
  }
  const Polygon r8 = resample_polygon(sq, 8);
  REQUIRE(r8.size() == 8);
  int corners = 0, mids = 0;
  for (const auto& v : r8) {
    const bool cx = v.x == doctest::Approx(0.0) || v.x == doctest::Approx(1.0);
    const bool cy = v.y == doctest::Approx(0.0) || v.y == doctest::Approx(1.0);
    const bool mx = v.x == doctest::Approx(0.5);
    const bool my = v.y == doctest::Approx(0.5);
    if (cx && cy) ++corners;
    if ((cx && my) || (mx && cy)) ++mids;
  }
  CHECK(corners == 4);
  CHECK(mids == 4);
}

TEST_CASE("resample_polygon perimeter oracle and rotation invariance") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const Polygon p = random_simple_polygon(rng, 9);
    const Polygon r = resample_polygon(p, 128);
    // arc-length oracle: perimeter of dense resampling within 2% of input
    CHECK(polygon_perimeter(r) == doctest::Approx(polygon_perimeter(p)).epsilon(0.02));

    const Polygon r16 = resample_polygon(p, 16);
    for (size_t rot = 1; rot < p.size(); ++rot) {
      Polygon q(p.begin() + rot, p.end());
      q.insert(q.end(), p.begin(), p.begin() + rot);
      const Polygon rr = resample_polygon(q, 16);
      REQUIRE(rr.size() == r16.size());
      for (size_t i = 0; i < rr.size(); ++i) {
        CHECK(rr[i].x == doctest::Approx(r16[i].x).epsilon(1e-12));
        CHECK(rr[i].y == doctest::Approx(r16[i].y).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("resample_polygon errors") {
  CHECK_THROWS_AS(resample_polygon(rect_poly(0, 0, 1, 1), 3), validation_error);
  CHECK_THROWS_AS(resample_polygon(rect_poly(0, 0, 1, 1), 2), validation_error);
  CHECK_THROWS_AS(resample_polygon({{1, 1}, {1, 1}, {1, 1}}, 4), validation_error);
}

TEST_CASE("rasterize_polygon areas") {
  const RasterMask full = rasterize_polygon(rect_poly(0, 0, 64, 64), 64, 64);
  double s = 0;
  for (float v : full.values) s += v;
  CHECK(s == doctest::Approx(64.0 * 64.0));

  const RasterMask half = rasterize_polygon(rect_poly(0, 0, 32, 64), 64, 64);
  s = 0;
  for (float v : half.values) s += v;
  CHECK(s / (64.0 * 64.0) == doctest::Approx(0.5).epsilon(1.0 / 64.0));

  const RasterMask none = rasterize_polygon({{100, 100}, {120, 100}, {110, 120}}, 64, 64);
  for (float v : none.values) CHECK(v == 0.0f);
}

TEST_CASE("rasterize scaling property") {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    Polygon p = random_simple_polygon(rng, 7);
    for (auto& v : p) {
      v.x = v.x * 4 + 8;
      v.y = v.y * 4 + 8;
    }
    const double s = 2.0;
    Polygon ps = p;
    for (auto& v : ps) {
      v.x *= s;
      v.y *= s;
    }
    const RasterMask m1 = rasterize_polygon(p, 64, 64);
    const RasterMask m2 = rasterize_polygon(ps, 128, 128);
    double a1 = 0, a2 = 0;
    for (float v : m1.values) a1 += v;
    for (float v : m2.values) a2 += v;
    CHECK(a2 / (a1 * s * s) == doctest::Approx(1.0).epsilon(2.0 / 64.0));
  }
}

TEST_CASE("mask_iou") {
  RasterMask a{2, 2, {1, 1, 0, 0}};
  RasterMask b{2, 2, {0, 0, 1, 1}};
  RasterMask c{2, 2, {1, 0, 0, 0}};
  RasterMask e{2, 2, {0, 0, 0, 0}};
  CHECK(mask_iou(a, a) == 1.0);
  CHECK(mask_iou(a, b) == 0.0);
  CHECK(mask_iou(c, a) == 0.5);  // subset with half the area
  CHECK(mask_iou(e, e) == 1.0);  // both empty
  CHECK_THROWS_AS(mask_iou(a, RasterMask{1, 2, {0, 0}}), validation_error);
}
