#pragma once

// One-to-one assignment and the detection objective: per-granularity
// Hungarian matching on a focal/L1/GIoU cost, focal classification loss,
// box L1 + GIoU losses on matched pairs, polygon L1 on the last decoder
// layer, combined with the per-sample granularity weights (0 / 1 / 1-over-
// count of annotated granularities).

#include <array>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "textdet/corpus.hpp"
#include "textdet/decoder.hpp"
#include "textdet/geometry.hpp"

namespace textdet {

// Eq.-style dynamic loss weights: zero for unannotated granularities,
// otherwise uniform over the annotated ones (1 when unique).
inline std::array<double, 4> granularity_weights(const GranularityFlags& flags) {
  std::array<double, 4> w{0, 0, 0, 0};
  const int s = flags.count();
  if (s == 0) return w;
  for (int t = 0; t < 4; ++t)
    if (flags.annotated[t]) w[t] = s == 1 ? 1.0 : 1.0 / s;
  return w;
}

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction row, ground-truth column)
  double total_cost = 0.0;
};

namespace detail {

// Square Jonker-Volgenant / potentials solver. Returns col -> row matching
// (1-indexed internally) plus the dual potentials.
struct SquareSolution {
  std::vector<int> row_to_col;
  std::vector<double> u, v;  // potentials, 0-indexed
  double total = 0.0;
};

inline SquareSolution solve_square(const std::vector<std::vector<double>>& a) {
  const int n = static_cast<int>(a.size());
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, std::numeric_limits<double>::infinity());
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = 0;
      double delta = std::numeric_limits<double>::infinity();
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = a[i0 - 1][j - 1] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0);
  }
  SquareSolution s;
  s.row_to_col.assign(n, -1);
  s.u.assign(n, 0.0);
  s.v.assign(n, 0.0);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) s.row_to_col[p[j] - 1] = j - 1;
  for (int i = 1; i <= n; ++i) s.u[i - 1] = u[i];
  for (int j = 1; j <= n; ++j) s.v[j - 1] = v[j];
  for (int i = 0; i < n; ++i) s.total += a[i][s.row_to_col[i]];
  return s;
}

// Optimal value and duals of the subproblem restricted to the given rows
// and columns; the matrix is padded with zeros to square, so exactly
// min(|rows|, |cols|) real pairs are matched.
struct SubSolution {
  double total = 0.0;                      // over real pairs only
  std::vector<std::pair<int, int>> pairs;  // in original indices
  std::vector<double> u, v;                // duals for real rows/cols, by position
};

inline SubSolution solve_subproblem(const std::vector<std::vector<double>>& cost,
                                    const std::vector<int>& rows, const std::vector<int>& cols) {
  const int s = static_cast<int>(std::max(rows.size(), cols.size()));
  SubSolution out;
  if (s == 0) return out;
  std::vector<std::vector<double>> a(s, std::vector<double>(s, 0.0));
  for (size_t ri = 0; ri < rows.size(); ++ri)
    for (size_t ci = 0; ci < cols.size(); ++ci) a[ri][ci] = cost[rows[ri]][cols[ci]];
  const SquareSolution sq = solve_square(a);
  out.u.assign(rows.size(), 0.0);
  out.v.assign(cols.size(), 0.0);
  for (size_t ri = 0; ri < rows.size(); ++ri) out.u[ri] = sq.u[ri];
  for (size_t ci = 0; ci < cols.size(); ++ci) out.v[ci] = sq.v[ci];
  for (size_t ri = 0; ri < rows.size(); ++ri) {
    const int ci = sq.row_to_col[ri];
    if (ci >= 0 && ci < static_cast<int>(cols.size())) {
      out.pairs.emplace_back(rows[ri], cols[ci]);
      out.total += cost[rows[ri]][cols[ci]];
    }
  }
  return out;
}

}  // namespace detail

// Minimum-cost injective assignment of min(n, m) pairs. Among cost ties the
// lexicographically smallest pair list wins: rows are fixed in ascending
// order and each takes the smallest column consistent with an optimal
// completion (candidates are pruned to zero-reduced-cost edges and verified
// with a sub-solve).
inline Assignment hungarian(const std::vector<std::vector<double>>& cost) {
  Assignment out;
  const int n = static_cast<int>(cost.size());
  const int m = n > 0 ? static_cast<int>(cost[0].size()) : 0;
  if (n == 0 || m == 0) return out;
  double scale = 0.0;
  for (const auto& row : cost) {
    if (static_cast<int>(row.size()) != m)
      throw std::invalid_argument("hungarian: ragged cost matrix");
    for (double c : row) {
      if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
      scale = std::max(scale, std::abs(c));
    }
  }
  const double tol = eps::assign_tie * (1.0 + scale) * (std::min(n, m) + 1);

  std::vector<int> rows(n), cols(m);
  for (int i = 0; i < n; ++i) rows[i] = i;
  for (int j = 0; j < m; ++j) cols[j] = j;

  while (!rows.empty() && !cols.empty()) {
    const auto cur = detail::solve_subproblem(cost, rows, cols);
    const int i = rows[0];
    int matched_col = -1;
    for (const auto& pr : cur.pairs)
      if (pr.first == i) matched_col = pr.second;

    int chosen = -1;
    for (size_t ci = 0; ci < cols.size(); ++ci) {
      const int j = cols[ci];
      const double rc = cost[i][j] - cur.u[0] - cur.v[ci];
      if (std::abs(rc) > tol) continue;  // not on any optimal solution
      if (j == matched_col) {
        chosen = j;
        break;
      }
      // verify that fixing (i, j) still reaches the optimum
      std::vector<int> rrows(rows.begin() + 1, rows.end());
      std::vector<int> rcols;
      for (int jc : cols)
        if (jc != j) rcols.push_back(jc);
      const auto sub = detail::solve_subproblem(cost, rrows, rcols);
      if (std::abs(cost[i][j] + sub.total - cur.total) <= tol) {
        chosen = j;
        break;
      }
    }
    if (chosen < 0 && matched_col >= 0) chosen = matched_col;
    if (chosen >= 0) {
      out.pairs.emplace_back(i, chosen);
      out.total_cost += cost[i][chosen];
      cols.erase(std::find(cols.begin(), cols.end(), chosen));
    }
    // when rows outnumber columns an unmatched row is simply dropped
    rows.erase(rows.begin());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Targets

struct GranTargets {
  std::vector<std::array<double, 4>> boxes;  // normalized cxcywh
  std::vector<int> classes;
  std::vector<std::vector<double>> polys;  // normalized, flattened (2K)
  int count() const { return static_cast<int>(boxes.size()); }
};

struct SampleTargets {
  GranularityFlags flags;
  std::array<GranTargets, 4> gran;
  int width = 0, height = 0;
};

inline SampleTargets make_targets(const SampleRecord& rec, int poly_points) {
  SampleTargets t;
  t.flags = rec.flags;
  t.width = rec.width;
  t.height = rec.height;
  for (const auto& inst : rec.instances) {
    GranTargets& gt = t.gran[static_cast<int>(inst.granularity)];
    const AABox b = inst.bbox();
    const CenterBox cb = CenterBox::from_aabox(b);
    gt.boxes.push_back({cb.cx / rec.width, cb.cy / rec.height, cb.w / rec.width, cb.h / rec.height});
    gt.classes.push_back(inst.class_id);
    const Polygon rp = resample_polygon(inst.polygon, poly_points);
    std::vector<double> flat;
    flat.reserve(2 * rp.size());
    for (const auto& pt : rp) {
      flat.push_back(pt.x / rec.width);
      flat.push_back(pt.y / rec.height);
    }
    gt.polys.push_back(std::move(flat));
  }
  return t;
}

// ---------------------------------------------------------------------------
// Costs and losses

struct LossWeights {
  double cls = 1.0;
  double box_l1 = 5.0;
  double giou = 2.0;
  double poly_l1 = 5.0;
  double focal_alpha = 0.25;
  int focal_gamma = 2;
};

namespace detail {

inline double stable_sigmoid(double x) {
  return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
}
inline double softplus_d(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

}  // namespace detail

// Matching cost between a group's raw head outputs and that granularity's
// ground truth. cost = cls + 5 * mean-L1(box) + 2 * (1 - GIoU); the class
// term is the focal positive cost minus the symmetric negative term.
template <class T>
std::vector<std::vector<double>> match_cost(const TensorData<T>& cls_logits,
                                            const TensorData<T>& boxes, const GranTargets& gt,
                                            const LossWeights& w = {}) {
  const int nq = cls_logits.dim(0);
  const int vocab = cls_logits.dim(1);
  const int ngt = gt.count();
  std::vector<std::vector<double>> cost(nq, std::vector<double>(ngt, 0.0));
  for (int i = 0; i < nq; ++i) {
    for (int j = 0; j < ngt; ++j) {
      const int cls = gt.classes[j];
      if (cls < 0 || cls >= vocab) throw validation_error("match_cost: class id out of vocabulary");
      const double x = static_cast<double>(cls_logits.v[static_cast<size_t>(i) * vocab + cls]);
      const double p = detail::stable_sigmoid(x);
      double pos = w.focal_alpha * detail::softplus_d(-x);
      double neg = (1.0 - w.focal_alpha) * detail::softplus_d(x);
      for (int e = 0; e < w.focal_gamma; ++e) {
        pos *= (1.0 - p);
        neg *= p;
      }
      double l1 = 0;
      AABox pb;
      {
        const T* bp = boxes.v.data() + static_cast<size_t>(i) * 4;
        for (int c = 0; c < 4; ++c) l1 += std::abs(static_cast<double>(bp[c]) - gt.boxes[j][c]);
        l1 /= 4.0;
        pb = CenterBox{static_cast<double>(bp[0]), static_cast<double>(bp[1]),
                       static_cast<double>(bp[2]), static_cast<double>(bp[3])}
                 .to_aabox();
      }
      const AABox gb = CenterBox{gt.boxes[j][0], gt.boxes[j][1], gt.boxes[j][2], gt.boxes[j][3]}
                           .to_aabox();
      cost[i][j] = w.cls * (pos - neg) + w.box_l1 * l1 + w.giou * (1.0 - box_giou(pb, gb));
    }
  }
  return cost;
}

// Sum over all (query, class) elements of the focal binary cross-entropy.
template <class T>
Var<T> focal_elements_sum(Graph<T>& g, Var<T> logits, const TensorData<T>& targets, double alpha,
                          int gamma) {
  Var<T> t = g.constant(targets);
  Var<T> p = g.sigmoid(logits);
  Var<T> one_minus_p = g.adds(g.neg(p), T(1));
  Var<T> pos = g.softplus(g.neg(logits));  // -log p
  Var<T> neg = g.softplus(logits);         // -log(1-p)
  for (int e = 0; e < gamma; ++e) {
    pos = g.mul(pos, one_minus_p);
    neg = g.mul(neg, p);
  }
  pos = g.muls(pos, T(alpha));
  neg = g.muls(neg, T(1.0 - alpha));
  Var<T> elems = g.add(g.mul(t, pos), g.mul(g.adds(g.neg(t), T(1)), neg));
  return g.reduce_sum(elems);
}

// Differentiable GIoU of matched prediction rows against constant targets;
// both inputs are (k, 4) cxcywh, the result is (k, 1).
template <class T>
Var<T> giou_pairs(Graph<T>& g, Var<T> pred, Var<T> target) {
  auto corners = [&](Var<T> b) {
    Var<T> cx = g.slice_cols(b, 0, 1), cy = g.slice_cols(b, 1, 1);
    Var<T> hw = g.muls(g.slice_cols(b, 2, 1), T(0.5)), hh = g.muls(g.slice_cols(b, 3, 1), T(0.5));
    return std::array<Var<T>, 4>{g.sub(cx, hw), g.sub(cy, hh), g.add(cx, hw), g.add(cy, hh)};
  };
  auto [px1, py1, px2, py2] = corners(pred);
  auto [gx1, gy1, gx2, gy2] = corners(target);
  Var<T> iw = g.relu(g.sub(g.vmin(px2, gx2), g.vmax(px1, gx1)));
  Var<T> ih = g.relu(g.sub(g.vmin(py2, gy2), g.vmax(py1, gy1)));
  Var<T> inter = g.mul(iw, ih);
  Var<T> area_p = g.mul(g.sub(px2, px1), g.sub(py2, py1));
  Var<T> area_g = g.mul(g.sub(gx2, gx1), g.sub(gy2, gy1));
  Var<T> uni = g.sub(g.add(area_p, area_g), inter);
  Var<T> hull = g.mul(g.sub(g.vmax(px2, gx2), g.vmin(px1, gx1)),
                      g.sub(g.vmax(py2, gy2), g.vmin(py1, gy1)));
  Var<T> iou = g.divv(inter, g.adds(uni, T(eps::giou)));
  Var<T> hull_pen = g.divv(g.sub(hull, uni), g.adds(hull, T(eps::giou)));
  return g.sub(iou, hull_pen);
}

struct GranularityLossTerms {
  double focal = 0, box_l1 = 0, giou = 0, poly_l1 = 0;
  std::array<int, 6> matched_per_layer{};  // bookkeeping for tests/logs
};

struct LossReport {
  double total = 0;
  std::array<double, 4> weight{};           // granularity weights used
  std::array<double, 4> weighted_terms{};   // weight * per-granularity loss
  std::array<GranularityLossTerms, 4> gran;
};

// Full detection objective for one sample. Granularities with flag 0
// contribute nothing and receive no gradient.
template <class T>
std::pair<Var<T>, LossReport> det_loss(Graph<T>& g, const std::vector<LayerOutput<T>>& layers,
                                       const SampleTargets& targets, const LossWeights& w = {}) {
  LossReport report;
  report.weight = granularity_weights(targets.flags);
  Var<T> total = g.scalar_const(T(0));
  for (int t = 0; t < 4; ++t) {
    if (report.weight[t] == 0.0) continue;
    const GranTargets& gt = targets.gran[t];
    const int ngt = gt.count();
    Var<T> gran_loss = g.scalar_const(T(0));
    for (size_t li = 0; li < layers.size(); ++li) {
      const LayerOutput<T>& lo = layers[li];
      const int nq = lo.cls_logits[t].shape()[0];
      const int vocab = lo.cls_logits[t].shape()[1];

      Assignment assign;
      if (ngt > 0)
        assign = hungarian(match_cost(lo.cls_logits[t].value(), lo.boxes[t].value(), gt, w));
      if (li < report.gran[t].matched_per_layer.size())
        report.gran[t].matched_per_layer[li] = static_cast<int>(assign.pairs.size());

      // classification: matched queries positive for their class
      TensorData<T> cls_target({nq, vocab});
      for (const auto& [pi, gj] : assign.pairs)
        cls_target.v[static_cast<size_t>(pi) * vocab + gt.classes[gj]] = T(1);
      Var<T> focal = g.muls(
          focal_elements_sum(g, lo.cls_logits[t], cls_target, w.focal_alpha, w.focal_gamma),
          T(1.0 / nq));
      report.gran[t].focal += focal.scalar();
      Var<T> layer_loss = g.muls(focal, T(w.cls));

      if (!assign.pairs.empty()) {
        std::vector<int> pred_rows;
        TensorData<T> gt_boxes({static_cast<int>(assign.pairs.size()), 4});
        for (size_t k = 0; k < assign.pairs.size(); ++k) {
          pred_rows.push_back(assign.pairs[k].first);
          for (int c = 0; c < 4; ++c)
            gt_boxes.v[k * 4 + c] = static_cast<T>(gt.boxes[assign.pairs[k].second][c]);
        }
        Var<T> pred_b = g.select_rows(lo.boxes[t], pred_rows);
        Var<T> gt_b = g.constant(gt_boxes);
        Var<T> l1 = g.reduce_mean(g.absv(g.sub(pred_b, gt_b)));
        Var<T> gl = g.reduce_mean(g.adds(g.neg(giou_pairs(g, pred_b, gt_b)), T(1)));
        report.gran[t].box_l1 += l1.scalar();
        report.gran[t].giou += gl.scalar();
        layer_loss = g.add(layer_loss, g.add(g.muls(l1, T(w.box_l1)), g.muls(gl, T(w.giou))));

        if (lo.polys[t].has_value()) {
          const int pk = lo.polys[t]->shape()[1];
          TensorData<T> gt_p({static_cast<int>(assign.pairs.size()), pk});
          for (size_t k = 0; k < assign.pairs.size(); ++k) {
            const auto& flat = gt.polys[assign.pairs[k].second];
            if (static_cast<int>(flat.size()) != pk)
              throw validation_error("det_loss: polygon target arity mismatch");
            for (int c = 0; c < pk; ++c) gt_p.v[k * pk + c] = static_cast<T>(flat[c]);
          }
          Var<T> pl = g.reduce_mean(
              g.absv(g.sub(g.select_rows(*lo.polys[t], pred_rows), g.constant(gt_p))));
          report.gran[t].poly_l1 += pl.scalar();
          layer_loss = g.add(layer_loss, g.muls(pl, T(w.poly_l1)));
        }
      }
      gran_loss = g.add(gran_loss, layer_loss);
    }
    report.weighted_terms[t] = report.weight[t] * gran_loss.scalar();
    total = g.add(total, g.muls(gran_loss, T(report.weight[t])));
  }
  report.total = total.scalar();
  return {total, report};
}

}  // namespace textdet
