#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "test_utils.hpp"
#include "wdfq/detect.hpp"
#include "wdfq/gradcheck.hpp"

using namespace wdfq;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

void zero_param(ParamStore& ps, const std::string& name) {
  Tensor& t = ps.get(name);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.0;
}

Box rand_box(std::uint64_t seed, const char* tag) {
  Tensor u = random_tensor({4}, seed, tag);
  return {0.5 + 0.3 * u[0], 0.5 + 0.3 * u[1], 0.3 + 0.2 * u[2], 0.3 + 0.2 * u[3]};
}

Tensor rand_boxes(std::int64_t k, std::uint64_t seed, const char* tag) {
  Tensor u = random_tensor({k, 4}, seed, tag);
  Tensor b({k, 4});
  for (std::int64_t q = 0; q < k; ++q) {
    b.at(q, 0) = 0.5 + 0.3 * u.at(q, 0);
    b.at(q, 1) = 0.5 + 0.3 * u.at(q, 1);
    b.at(q, 2) = 0.3 + 0.2 * u.at(q, 2);
    b.at(q, 3) = 0.3 + 0.2 * u.at(q, 3);
  }
  return b;
}

// Distance from every min/max switch inside the giou surface.
double giou_kink_margin(const Box& a, const Box& b) {
  const double ax0 = a.cx - 0.5 * a.w, ax1 = a.cx + 0.5 * a.w;
  const double ay0 = a.cy - 0.5 * a.h, ay1 = a.cy + 0.5 * a.h;
  const double bx0 = b.cx - 0.5 * b.w, bx1 = b.cx + 0.5 * b.w;
  const double by0 = b.cy - 0.5 * b.h, by1 = b.cy + 0.5 * b.h;
  double m = 1e300;
  m = std::min(m, std::abs(ax1 - bx1));
  m = std::min(m, std::abs(ax0 - bx0));
  m = std::min(m, std::abs(ay1 - by1));
  m = std::min(m, std::abs(ay0 - by0));
  m = std::min(m, std::abs(std::min(ax1, bx1) - std::max(ax0, bx0)));
  m = std::min(m, std::abs(std::min(ay1, by1) - std::max(ay0, by0)));
  return m;
}

Box row_box(const Tensor& boxes, std::int64_t q) {
  return {boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
}

// The same matching cost detection_loss builds, for oracle-side gap checks.
Tensor match_cost(const Tensor& logits, const Tensor& boxes, const std::vector<GtItem>& gts,
                  const MatchWeights& w) {
  const std::int64_t k = logits.extent(0);
  const std::int64_t ng = static_cast<std::int64_t>(gts.size());
  Tensor cost({k, ng});
  for (std::int64_t q = 0; q < k; ++q)
    for (std::int64_t g = 0; g < ng; ++g) {
      const GtItem& gt = gts[static_cast<std::size_t>(g)];
      const double x = logits.at(q, gt.class_id);
      const double p = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      const double l1 = std::abs(boxes.at(q, 0) - gt.box.cx) +
                        std::abs(boxes.at(q, 1) - gt.box.cy) +
                        std::abs(boxes.at(q, 2) - gt.box.w) + std::abs(boxes.at(q, 3) - gt.box.h);
      cost.at(q, g) =
          w.cls * (1.0 - p) + w.l1 * l1 + w.giou * (1.0 - giou(row_box(boxes, q), gt.box));
    }
  return cost;
}

double l1_margin(const Tensor& boxes, std::int64_t q, const Box& gt) {
  const double g[4] = {gt.cx, gt.cy, gt.w, gt.h};
  double m = 1e300;
  for (std::int64_t j = 0; j < 4; ++j) m = std::min(m, std::abs(boxes.at(q, j) - g[j]));
  return m;
}

}  // namespace

TEST_CASE("class head with zero weights reports half confidence everywhere") {
  DetectConfig cfg;
  cfg.d = 8;
  cfg.classes = 3;
  ParamStore ps(7);
  detect_register(ps, cfg);
  zero_param(ps, "det.cls.w");
  Tensor z = random_tensor({1, 5, cfg.d}, 3, "det.z");
  Tensor anchors = random_tensor({1, 5, 4}, 4, "det.anc", 2.0);
  Tensor logits = class_logits(z, ps);
  REQUIRE(logits.rank() == 3);
  CHECK(logits.extent(1) == 5);
  CHECK(logits.extent(2) == 3);
  auto dets = predict(z, anchors, ps);
  REQUIRE(dets.size() == 1);
  REQUIRE(dets[0].size() == 5);
  for (const Detection& d : dets[0]) {
    CHECK(d.confidence == 0.5);
    CHECK(d.class_id == 0);  // all-equal logits tie to the lowest id
    CHECK(d.box.w > 0.0);
    CHECK(d.box.w < 1.0);
  }
}

TEST_CASE("identical queries yield identical detections") {
  DetectConfig cfg;
  cfg.d = 8;
  cfg.classes = 4;
  ParamStore ps(11);
  detect_register(ps, cfg);
  Tensor z = random_tensor({1, 3, cfg.d}, 5, "det.z");
  Tensor anchors = random_tensor({1, 3, 4}, 6, "det.anc", 2.0);
  for (std::int64_t j = 0; j < cfg.d; ++j) z.at(0, 2, j) = z.at(0, 0, j);
  for (std::int64_t j = 0; j < 4; ++j) anchors.at(0, 2, j) = anchors.at(0, 0, j);
  auto dets = predict(z, anchors, ps);
  CHECK(dets[0][2].class_id == dets[0][0].class_id);
  CHECK(dets[0][2].confidence == dets[0][0].confidence);
  CHECK(dets[0][2].box.cx == dets[0][0].box.cx);
  CHECK(dets[0][2].box.h == dets[0][0].box.h);
}

TEST_CASE("argmax class ties break to the lower id") {
  DetectConfig cfg;
  cfg.d = 2;
  cfg.classes = 3;
  ParamStore ps(13);
  detect_register(ps, cfg);
  // Rig the head so two classes produce the identical logit.
  Tensor& w = ps.get("det.cls.w");
  for (std::int64_t i = 0; i < w.size(); ++i) w[i] = 0.0;
  w.at(1, 0) = 1.0;
  w.at(2, 0) = 1.0;
  Tensor z({1, 1, 2});
  z.at(0, 0, 0) = 0.7;
  Tensor anchors({1, 1, 4});
  auto dets = predict(z, anchors, ps);
  CHECK(dets[0][0].class_id == 1);
}

TEST_CASE("giou hits the pinned closed forms") {
  const Box unit{0.5, 0.5, 1.0, 1.0};
  CHECK(giou(unit, unit) == doctest::Approx(1.0).epsilon(1e-9));

  const Box far{1.5, 1.5, 1.0, 1.0};  // corner-touching in xyxy
  CHECK(giou(unit, far) == doctest::Approx(-0.5).epsilon(1e-9));

  const Box half{0.5, 0.5, 1.0, 0.5};  // nested, half the area
  CHECK(giou(unit, half) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("giou is symmetric, bounded, and never above iou") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Box a = rand_box(seed, "det.a");
    const Box b = rand_box(seed + 500, "det.b");
    const double gab = giou(a, b);
    CHECK(gab == giou(b, a));
    CHECK(gab > -1.0);
    CHECK(gab <= 1.0);
    CHECK(gab <= box_iou(a, b) + 1e-12);
  }
}

TEST_CASE("giou gradients match central differences") {
  const double h = 1e-6;
  int tested = 0;
  for (std::uint64_t seed = 0; seed < 300 && tested < 25; ++seed) {
    const Box a = rand_box(seed, "det.ga");
    const Box b = rand_box(seed + 900, "det.gb");
    if (giou_kink_margin(a, b) < 1e-3) continue;
    ++tested;
    std::array<double, 4> ga{}, gb{};
    giou(a, b, &ga, &gb);
    auto probe = [&](bool first, int coord, double delta) {
      Box pa = a, pb = b;
      double* f = first ? (coord == 0   ? &pa.cx
                           : coord == 1 ? &pa.cy
                           : coord == 2 ? &pa.w
                                        : &pa.h)
                        : (coord == 0   ? &pb.cx
                           : coord == 1 ? &pb.cy
                           : coord == 2 ? &pb.w
                                        : &pb.h);
      *f += delta;
      return giou(pa, pb);
    };
    for (int side = 0; side < 2; ++side)
      for (int coord = 0; coord < 4; ++coord) {
        const double fd =
            (probe(side == 0, coord, h) - probe(side == 0, coord, -h)) / (2.0 * h);
        const double an = side == 0 ? ga[static_cast<std::size_t>(coord)]
                                    : gb[static_cast<std::size_t>(coord)];
        CHECK(std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)}) < 1e-5);
      }
  }
  CHECK(tested >= 25);
}

TEST_CASE("hungarian matches the pinned examples") {
  Tensor c1({2, 2});
  c1.at(0, 0) = 1.0;
  c1.at(0, 1) = 2.0;
  c1.at(1, 0) = 3.0;
  c1.at(1, 1) = 0.0;
  std::vector<std::int64_t> a1 = hungarian_match(c1);
  REQUIRE(a1.size() == 2);
  CHECK(a1[0] == 0);
  CHECK(a1[1] == 1);

  Tensor diag({3, 3});
  for (std::int64_t q = 0; q < 3; ++q)
    for (std::int64_t g = 0; g < 3; ++g) diag.at(q, g) = q == g ? 0.0 : 1.0;
  std::vector<std::int64_t> a2 = hungarian_match(diag);
  CHECK(a2 == std::vector<std::int64_t>{0, 1, 2});

  Tensor infeasible({2, 3});
  CHECK_THROWS_WITH_AS(hungarian_match(infeasible), doctest::Contains("WDFQ_E_SHAPE"), Error);

  Tensor bad({2, 2});
  bad[0] = std::nan("");
  CHECK_THROWS_WITH_AS(hungarian_match(bad), doctest::Contains("WDFQ_E_NUMERIC"), Error);
}

TEST_CASE("hungarian equals brute force on random matrices") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const std::int64_t q = 3 + static_cast<std::int64_t>(seed % 4);
    const std::int64_t g = 1 + static_cast<std::int64_t>(seed % q);
    Tensor cost = random_tensor({q, g}, seed, "det.cost", 3.0);
    CHECK(hungarian_match(cost) == oracle::brute_match(cost));
  }
}

TEST_CASE("hungarian canonicalizes ties to the smallest assignment vector") {
  // Identical rows: every assignment costs the same.
  Tensor flat({3, 2});
  for (std::int64_t q = 0; q < 3; ++q) {
    flat.at(q, 0) = 0.4;
    flat.at(q, 1) = 0.7;
  }
  CHECK(hungarian_match(flat) == std::vector<std::int64_t>{0, 1});

  // Small integer grids produce plenty of exact ties.
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Tensor cost = random_tensor({4, 3}, seed, "det.int", 1.0);
    for (std::int64_t i = 0; i < cost.size(); ++i)
      cost[i] = std::floor((cost[i] + 1.0) * 1.5);  // values in {0,1,2,3}
    CHECK(hungarian_match(cost) == oracle::brute_match(cost));
  }
}

TEST_CASE("detection loss closed form with no ground truths") {
  Tensor logits({4, 3});
  Tensor boxes = rand_boxes(4, 21, "det.b");
  DetectionLoss l = detection_loss(logits, boxes, {});
  CHECK(l.box == 0.0);
  CHECK(l.assignment.empty());
  CHECK(l.cls == doctest::Approx(0.75 * 0.25 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("perfect predictions drive the losses toward zero") {
  const std::int64_t k = 2, c = 3;
  Tensor logits({k, c});
  for (std::int64_t i = 0; i < logits.size(); ++i) logits[i] = -14.0;
  logits.at(0, 1) = 14.0;
  Tensor boxes({k, 4});
  const Box target{0.4, 0.6, 0.3, 0.2};
  boxes.at(0, 0) = target.cx;
  boxes.at(0, 1) = target.cy;
  boxes.at(0, 2) = target.w;
  boxes.at(0, 3) = target.h;
  boxes.at(1, 0) = 0.8;
  boxes.at(1, 1) = 0.2;
  boxes.at(1, 2) = 0.1;
  boxes.at(1, 3) = 0.1;
  DetectionLoss l = detection_loss(logits, boxes, {{1, target}});
  REQUIRE(l.assignment == std::vector<std::int64_t>{0});
  CHECK(l.box < 1e-9);
  CHECK(l.cls < 1e-9);
}

TEST_CASE("ground-truth order does not change the losses") {
  const std::int64_t k = 5, c = 4;
  Tensor logits = random_tensor({k, c}, 31, "det.lg", 2.0);
  Tensor boxes = rand_boxes(k, 32, "det.bx");
  std::vector<GtItem> gts = {{0, rand_box(41, "det.g0")},
                             {2, rand_box(42, "det.g1")},
                             {1, rand_box(43, "det.g2")}};
  DetectionLoss base = detection_loss(logits, boxes, gts);
  std::vector<GtItem> shuffled = {gts[2], gts[0], gts[1]};
  DetectionLoss perm = detection_loss(logits, boxes, shuffled);
  CHECK(base.box == doctest::Approx(perm.box).epsilon(1e-12));
  CHECK(base.cls == doctest::Approx(perm.cls).epsilon(1e-12));
  CHECK(base.assignment[0] == perm.assignment[1]);
  CHECK(base.assignment[1] == perm.assignment[2]);
  CHECK(base.assignment[2] == perm.assignment[0]);
}

TEST_CASE("detection loss rejects invalid ground truths") {
  Tensor logits({3, 2});
  Tensor boxes = rand_boxes(3, 51, "det.bx");
  CHECK_THROWS_WITH_AS(detection_loss(logits, boxes, {{0, Box{0.5, 0.5, 0.0, 0.2}}}),
                       doctest::Contains("WDFQ_E_ARG"), Error);
  CHECK_THROWS_WITH_AS(detection_loss(logits, boxes, {{5, Box{0.5, 0.5, 0.2, 0.2}}}),
                       doctest::Contains("WDFQ_E_ARG"), Error);
  std::vector<GtItem> many(4, {0, Box{0.5, 0.5, 0.2, 0.2}});
  CHECK_THROWS_WITH_AS(detection_loss(logits, boxes, many),
                       doctest::Contains("WDFQ_E_SHAPE"), Error);
}

TEST_CASE("detection loss gradients match finite differences") {
  const std::int64_t k = 5, c = 3;
  const MatchWeights w;
  Tensor logits, boxes;
  std::vector<GtItem> gts;
  DetectionLoss fwd;
  for (std::uint64_t seed = 0;; ++seed) {
    logits = random_tensor({k, c}, seed, "det.lg", 2.0);
    boxes = rand_boxes(k, seed + 100, "det.bx");
    gts = {{static_cast<std::int64_t>(seed % c), rand_box(seed + 200, "det.g0")},
           {static_cast<std::int64_t>((seed + 1) % c), rand_box(seed + 300, "det.g1")}};
    fwd = detection_loss(logits, boxes, gts, w);
    double margin = oracle::match_gap(match_cost(logits, boxes, gts, w));
    for (std::size_t g = 0; g < gts.size(); ++g) {
      const std::int64_t q = fwd.assignment[g];
      margin = std::min(margin, giou_kink_margin(row_box(boxes, q), gts[g].box));
      margin = std::min(margin, l1_margin(boxes, q, gts[g].box));
    }
    if (margin > 5e-3) break;
    REQUIRE(seed < 300);
  }
  Tensor cot = random_tensor({2}, 61, "det.cot");
  DetectionLossGrads g = detection_loss_vjp(logits, boxes, gts, fwd.assignment, w, cot[0], cot[1]);

  FdCase fd;
  fd.inputs = {logits, boxes};
  fd.forward = [&](const std::vector<Tensor>& in) {
    DetectionLoss l = detection_loss(in[0], in[1], gts, w);
    Tensor out({2});
    out[0] = l.box;
    out[1] = l.cls;
    return out;
  };
  fd.cotangent = cot;
  fd.analytic = {g.glogits, g.gboxes};
  fd.probe_stride = {1, 1};
  FdReport rep = fd_check(fd);
  CHECK(rep.elements == k * c + k * 4);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("total loss is the plain sum") {
  CHECK(total_loss(0.0, 0.0, 0.0) == 0.0);
  CHECK(total_loss(1.0, 2.0, 3.0) == 6.0);
  CHECK(total_loss(0.25, 0.5, 0.125) == 0.875);
}
