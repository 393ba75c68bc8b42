#include "wdfq/detect.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "wdfq/errors.hpp"
#include "wdfq/ops.hpp"

namespace wdfq {

namespace {

constexpr double kAreaFloor = 1e-12;
constexpr double kProbFloor = 1e-12;

double sig(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

struct Corners {
  double x0, y0, x1, y1;
};

Corners corners(const Box& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

void check_gt(const GtItem& gt, std::int64_t classes, std::size_t index) {
  const Box& b = gt.box;
  if (!(b.cx >= 0.0 && b.cx <= 1.0 && b.cy >= 0.0 && b.cy <= 1.0 && b.w > 0.0 && b.w <= 1.0 &&
        b.h > 0.0 && b.h <= 1.0))
    raise(ErrorCode::Argument, "ground truth " + std::to_string(index) +
                                   " box outside the normalized range");
  if (gt.class_id < 0 || gt.class_id >= classes)
    raise(ErrorCode::Argument, "ground truth " + std::to_string(index) + " class " +
                                   std::to_string(gt.class_id) + " outside [0," +
                                   std::to_string(classes) + ")");
}

double box_l1(const Tensor& boxes, std::int64_t q, const Box& gt) {
  return std::abs(boxes.at(q, 0) - gt.cx) + std::abs(boxes.at(q, 1) - gt.cy) +
         std::abs(boxes.at(q, 2) - gt.w) + std::abs(boxes.at(q, 3) - gt.h);
}

Box box_row(const Tensor& boxes, std::int64_t q) {
  return {boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
}

// Shortest-augmenting-path assignment on a submatrix view: rows index ground
// truths, cols index queries, cost is read [query, gt]. Requires
// rows.size() <= cols.size(). Returns, per row, the position in cols.
std::vector<std::int64_t> assign_min(const Tensor& cost, const std::vector<std::int64_t>& rows,
                                     const std::vector<std::int64_t>& cols) {
  const std::int64_t n = static_cast<std::int64_t>(rows.size());
  const std::int64_t m = static_cast<std::int64_t>(cols.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0);
  std::vector<double> v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<std::int64_t> p(static_cast<std::size_t>(m + 1), 0);
  std::vector<std::int64_t> way(static_cast<std::size_t>(m + 1), 0);
  for (std::int64_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::int64_t j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<bool> used(static_cast<std::size_t>(m + 1), false);
    do {
      used[static_cast<std::size_t>(j0)] = true;
      const std::int64_t i0 = p[static_cast<std::size_t>(j0)];
      std::int64_t j1 = 0;
      double delta = inf;
      for (std::int64_t j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost.at(cols[static_cast<std::size_t>(j - 1)],
                                   rows[static_cast<std::size_t>(i0 - 1)]) -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (std::int64_t j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const std::int64_t j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::int64_t> row_to_col(static_cast<std::size_t>(n), -1);
  for (std::int64_t j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] != 0)
      row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return row_to_col;
}

// Totals are always summed in ascending ground-truth order so equal-valued
// assignments compare bitwise equal during tie canonicalization.
double assignment_total(const Tensor& cost, const std::vector<std::int64_t>& gt_to_query) {
  double total = 0.0;
  for (std::size_t g = 0; g < gt_to_query.size(); ++g) {
    if (gt_to_query[g] >= 0) total += cost.at(gt_to_query[g], static_cast<std::int64_t>(g));
  }
  return total;
}

}  // namespace

void DetectConfig::validate() const {
  if (d < 1 || classes < 1)
    raise(ErrorCode::Config, "detect head needs positive content width and class count");
}

void detect_register(ParamStore& ps, const DetectConfig& cfg) {
  cfg.validate();
  ps.create("det.cls.w", {cfg.classes, cfg.d}, Init::FanScaledUniform);
  ps.create("det.cls.b", {cfg.classes}, Init::Zeros);
}

Tensor class_logits(const Tensor& z, const ParamStore& ps) {
  if (z.rank() != 3)
    raise(ErrorCode::Shape, "class head expects query content [N,K,D], got " +
                                shape_str(z.shape()));
  return linear(z, ps.get("det.cls.w"), ps.get("det.cls.b"));
}

Tensor class_logits_vjp(const Tensor& z, const ParamStore& ps, const Tensor& gy, GradStore& gs) {
  LinearGrads g = linear_vjp(z, ps.get("det.cls.w"), ps.get("det.cls.b"), gy);
  gs.accumulate("det.cls.w", g.gw);
  gs.accumulate("det.cls.b", g.gb);
  return g.gx;
}

std::vector<std::vector<Detection>> predict(const Tensor& z, const Tensor& anchor_logits,
                                            const ParamStore& ps) {
  Tensor logits = class_logits(z, ps);
  if (anchor_logits.rank() != 3 || anchor_logits.extent(2) != 4 ||
      anchor_logits.extent(0) != z.extent(0) || anchor_logits.extent(1) != z.extent(1))
    raise(ErrorCode::Shape, "predict anchors must be [N,K,4] matching the queries, got " +
                                shape_str(anchor_logits.shape()));
  Tensor boxes = sigmoid(anchor_logits);
  const std::int64_t n = logits.extent(0), k = logits.extent(1), c = logits.extent(2);
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(n));
  for (std::int64_t b = 0; b < n; ++b) {
    out[static_cast<std::size_t>(b)].reserve(static_cast<std::size_t>(k));
    for (std::int64_t q = 0; q < k; ++q) {
      std::int64_t best = 0;
      for (std::int64_t ci = 1; ci < c; ++ci)
        if (logits.at(b, q, ci) > logits.at(b, q, best)) best = ci;
      Detection det;
      det.class_id = best;
      det.confidence = sig(logits.at(b, q, best));
      det.box = {boxes.at(b, q, 0), boxes.at(b, q, 1), boxes.at(b, q, 2), boxes.at(b, q, 3)};
      out[static_cast<std::size_t>(b)].push_back(det);
    }
  }
  return out;
}

double box_iou(const Box& a, const Box& b) {
  const Corners ca = corners(a), cb = corners(b);
  const double iw = std::max(0.0, std::min(ca.x1, cb.x1) - std::max(ca.x0, cb.x0));
  const double ih = std::max(0.0, std::min(ca.y1, cb.y1) - std::max(ca.y0, cb.y0));
  const double inter = iw * ih;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return inter / (uni + kAreaFloor);
}

double giou(const Box& a, const Box& b, std::array<double, 4>* ga, std::array<double, 4>* gb,
            double gy) {
  const Corners ca = corners(a), cb = corners(b);
  const double iw_raw = std::min(ca.x1, cb.x1) - std::max(ca.x0, cb.x0);
  const double ih_raw = std::min(ca.y1, cb.y1) - std::max(ca.y0, cb.y0);
  const double iw = std::max(0.0, iw_raw), ih = std::max(0.0, ih_raw);
  const double inter = iw * ih;
  const double ua = a.w * a.h, ub = b.w * b.h;
  const double uni = ua + ub - inter;
  const double iou = inter / (uni + kAreaFloor);
  const double ew = std::max(ca.x1, cb.x1) - std::min(ca.x0, cb.x0);
  const double eh = std::max(ca.y1, cb.y1) - std::min(ca.y0, cb.y0);
  const double enc = ew * eh;
  const double pen = (enc - uni) / (enc + kAreaFloor);
  const double out = iou - pen;
  if (!ga && !gb) return out;

  const double d_iou = gy, d_pen = -gy;
  double d_inter = d_iou / (uni + kAreaFloor);
  double d_uni = -d_iou * inter / ((uni + kAreaFloor) * (uni + kAreaFloor));
  const double d_enc = d_pen * (kAreaFloor + uni) / ((enc + kAreaFloor) * (enc + kAreaFloor));
  d_uni += -d_pen / (enc + kAreaFloor);
  const double d_ua = d_uni, d_ub = d_uni;
  d_inter -= d_uni;
  const double d_iw = d_inter * ih, d_ih = d_inter * iw;
  const double d_iw_raw = iw_raw > 0.0 ? d_iw : 0.0;
  const double d_ih_raw = ih_raw > 0.0 ? d_ih : 0.0;
  const double d_ew = d_enc * eh, d_eh = d_enc * ew;

  // min/max route to `a` on exact ties.
  const double d_ax1 = (ca.x1 <= cb.x1 ? d_iw_raw : 0.0) + (ca.x1 >= cb.x1 ? d_ew : 0.0);
  const double d_bx1 = (cb.x1 < ca.x1 ? d_iw_raw : 0.0) + (cb.x1 > ca.x1 ? d_ew : 0.0);
  const double d_ax0 = (ca.x0 >= cb.x0 ? -d_iw_raw : 0.0) + (ca.x0 <= cb.x0 ? -d_ew : 0.0);
  const double d_bx0 = (cb.x0 > ca.x0 ? -d_iw_raw : 0.0) + (cb.x0 < ca.x0 ? -d_ew : 0.0);
  const double d_ay1 = (ca.y1 <= cb.y1 ? d_ih_raw : 0.0) + (ca.y1 >= cb.y1 ? d_eh : 0.0);
  const double d_by1 = (cb.y1 < ca.y1 ? d_ih_raw : 0.0) + (cb.y1 > ca.y1 ? d_eh : 0.0);
  const double d_ay0 = (ca.y0 >= cb.y0 ? -d_ih_raw : 0.0) + (ca.y0 <= cb.y0 ? -d_eh : 0.0);
  const double d_by0 = (cb.y0 > ca.y0 ? -d_ih_raw : 0.0) + (cb.y0 < ca.y0 ? -d_eh : 0.0);

  if (ga) {
    (*ga)[0] = d_ax0 + d_ax1;
    (*ga)[1] = d_ay0 + d_ay1;
    (*ga)[2] = d_ua * a.h + 0.5 * (d_ax1 - d_ax0);
    (*ga)[3] = d_ua * a.w + 0.5 * (d_ay1 - d_ay0);
  }
  if (gb) {
    (*gb)[0] = d_bx0 + d_bx1;
    (*gb)[1] = d_by0 + d_by1;
    (*gb)[2] = d_ub * b.h + 0.5 * (d_bx1 - d_bx0);
    (*gb)[3] = d_ub * b.w + 0.5 * (d_by1 - d_by0);
  }
  return out;
}

std::vector<std::int64_t> hungarian_match(const Tensor& cost) {
  if (cost.rank() != 2)
    raise(ErrorCode::Shape, "match cost must be [queries, ground truths], got " +
                                shape_str(cost.shape()));
  const std::int64_t nq = cost.extent(0), ng = cost.extent(1);
  if (ng > nq)
    raise(ErrorCode::Shape, "infeasible match: " + std::to_string(ng) + " ground truths but only " +
                                std::to_string(nq) + " queries");
  if (!cost.all_finite()) raise(ErrorCode::Numeric, "match cost contains non-finite entries");

  // Optimal total first, then a greedy per-gt repair that keeps the smallest
  // query index whose completion still reaches the optimum; this pins the
  // lexicographically smallest optimal assignment vector.
  std::vector<std::int64_t> result(static_cast<std::size_t>(ng), -1);
  std::vector<char> used(static_cast<std::size_t>(nq), 0);
  for (std::int64_t g = 0; g < ng; ++g) {
    std::vector<std::int64_t> rows_rest;
    for (std::int64_t r = g + 1; r < ng; ++r) rows_rest.push_back(r);
    std::int64_t best_q = -1;
    double best_total = std::numeric_limits<double>::infinity();
    for (std::int64_t q = 0; q < nq; ++q) {
      if (used[static_cast<std::size_t>(q)]) continue;
      std::vector<std::int64_t> cols_rest;
      for (std::int64_t cq = 0; cq < nq; ++cq)
        if (!used[static_cast<std::size_t>(cq)] && cq != q) cols_rest.push_back(cq);
      std::vector<std::int64_t> cand = result;
      cand[static_cast<std::size_t>(g)] = q;
      const std::vector<std::int64_t> tail = assign_min(cost, rows_rest, cols_rest);
      for (std::size_t i = 0; i < rows_rest.size(); ++i)
        cand[static_cast<std::size_t>(rows_rest[i])] =
            cols_rest[static_cast<std::size_t>(tail[i])];
      const double total = assignment_total(cost, cand);
      if (total < best_total) {
        best_total = total;
        best_q = q;
      }
    }
    result[static_cast<std::size_t>(g)] = best_q;
    used[static_cast<std::size_t>(best_q)] = 1;
  }
  return result;
}

DetectionLoss detection_loss(const Tensor& logits, const Tensor& boxes,
                             const std::vector<GtItem>& gts, const MatchWeights& w) {
  if (logits.rank() != 2)
    raise(ErrorCode::Shape, "detection loss expects logits [K,C], got " +
                                shape_str(logits.shape()));
  if (boxes.rank() != 2 || boxes.extent(1) != 4 || boxes.extent(0) != logits.extent(0))
    raise(ErrorCode::Shape, "detection loss expects boxes [K,4] matching the logits, got " +
                                shape_str(boxes.shape()));
  const std::int64_t k = logits.extent(0), c = logits.extent(1);
  const std::int64_t ng = static_cast<std::int64_t>(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) check_gt(gts[i], c, i);
  if (ng > k)
    raise(ErrorCode::Shape, "infeasible match: " + std::to_string(ng) + " ground truths but only " +
                                std::to_string(k) + " queries");

  DetectionLoss out;
  if (ng > 0) {
    Tensor cost({k, ng});
    for (std::int64_t q = 0; q < k; ++q) {
      const Box bq = box_row(boxes, q);
      for (std::int64_t g = 0; g < ng; ++g) {
        const GtItem& gt = gts[static_cast<std::size_t>(g)];
        const double p = sig(logits.at(q, gt.class_id));
        cost.at(q, g) = w.cls * (1.0 - p) + w.l1 * box_l1(boxes, q, gt.box) +
                        w.giou * (1.0 - giou(bq, gt.box));
      }
    }
    out.assignment = hungarian_match(cost);
    double lbox = 0.0;
    for (std::int64_t g = 0; g < ng; ++g) {
      const std::int64_t q = out.assignment[static_cast<std::size_t>(g)];
      const GtItem& gt = gts[static_cast<std::size_t>(g)];
      lbox += w.l1 * box_l1(boxes, q, gt.box) + w.giou * (1.0 - giou(box_row(boxes, q), gt.box));
    }
    out.box = lbox / static_cast<double>(ng);
  }

  // Focal binary cross-entropy over every (query, class) entry; the matched
  // query is positive for its ground-truth class only.
  std::vector<std::int64_t> positive(static_cast<std::size_t>(k), -1);
  for (std::int64_t g = 0; g < ng; ++g)
    positive[static_cast<std::size_t>(out.assignment[static_cast<std::size_t>(g)])] =
        gts[static_cast<std::size_t>(g)].class_id;
  double lcls = 0.0;
  for (std::int64_t q = 0; q < k; ++q)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const double p =
          std::clamp(sig(logits.at(q, ci)), kProbFloor, 1.0 - kProbFloor);
      if (positive[static_cast<std::size_t>(q)] == ci)
        lcls += -0.25 * (1.0 - p) * (1.0 - p) * std::log(p);
      else
        lcls += -0.75 * p * p * std::log(1.0 - p);
    }
  out.cls = lcls / static_cast<double>(k * c);
  return out;
}

DetectionLossGrads detection_loss_vjp(const Tensor& logits, const Tensor& boxes,
                                      const std::vector<GtItem>& gts,
                                      const std::vector<std::int64_t>& assignment,
                                      const MatchWeights& w, double dl_box, double dl_cls) {
  const std::int64_t k = logits.extent(0), c = logits.extent(1);
  const std::int64_t ng = static_cast<std::int64_t>(gts.size());
  DetectionLossGrads out;
  out.glogits = Tensor(logits.shape());
  out.gboxes = Tensor(boxes.shape());

  std::vector<std::int64_t> positive(static_cast<std::size_t>(k), -1);
  for (std::int64_t g = 0; g < ng; ++g)
    positive[static_cast<std::size_t>(assignment[static_cast<std::size_t>(g)])] =
        gts[static_cast<std::size_t>(g)].class_id;
  const double scls = dl_cls / static_cast<double>(k * c);
  for (std::int64_t q = 0; q < k; ++q)
    for (std::int64_t ci = 0; ci < c; ++ci) {
      const double x = logits.at(q, ci);
      const double p = sig(x);
      const double pc = std::clamp(p, kProbFloor, 1.0 - kProbFloor);
      double dpc;
      if (positive[static_cast<std::size_t>(q)] == ci)
        dpc = -0.25 * (-2.0 * (1.0 - pc) * std::log(pc) + (1.0 - pc) * (1.0 - pc) / pc);
      else
        dpc = -0.75 * (2.0 * pc * std::log(1.0 - pc) - pc * pc / (1.0 - pc));
      const double gate = (p > kProbFloor && p < 1.0 - kProbFloor) ? 1.0 : 0.0;
      out.glogits.at(q, ci) = scls * dpc * gate * p * (1.0 - p);
    }

  if (ng > 0) {
    const double sbox = dl_box / static_cast<double>(ng);
    for (std::int64_t g = 0; g < ng; ++g) {
      const std::int64_t q = assignment[static_cast<std::size_t>(g)];
      const GtItem& gt = gts[static_cast<std::size_t>(g)];
      const double gtv[4] = {gt.box.cx, gt.box.cy, gt.box.w, gt.box.h};
      for (std::int64_t j = 0; j < 4; ++j) {
        const double diff = boxes.at(q, j) - gtv[j];
        const double s = diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
        out.gboxes.at(q, j) += sbox * w.l1 * s;
      }
      std::array<double, 4> gq{};
      giou(box_row(boxes, q), gt.box, &gq, nullptr, 1.0);
      for (std::int64_t j = 0; j < 4; ++j) out.gboxes.at(q, j) += sbox * w.giou * (-gq[j]);
    }
  }
  return out;
}

}  // namespace wdfq
