#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "wdfq/params.hpp"
#include "wdfq/tensor.hpp"

namespace wdfq {

// Detection head: a linear class head over query content, box decoding from
// anchor logits, Hungarian assignment, and the matched detection losses.

struct DetectConfig {
  std::int64_t d = 256;       // query content width
  std::int64_t classes = 80;  // C
  void validate() const;
};

void detect_register(ParamStore& ps, const DetectConfig& cfg);

// Normalized center-size box. Valid boxes keep cx, cy in [0,1] and w, h in
// (0,1].
struct Box {
  double cx = 0.0, cy = 0.0, w = 0.0, h = 0.0;
};

struct Detection {
  std::int64_t class_id = 0;
  double confidence = 0.0;  // sigmoid of the winning class logit
  Box box;
};

struct GtItem {
  std::int64_t class_id = 0;
  Box box;
};

// Class logits [N,K,C] from final query content [N,K,D].
Tensor class_logits(const Tensor& z, const ParamStore& ps);
// Returns gz and accumulates the head parameter gradients.
Tensor class_logits_vjp(const Tensor& z, const ParamStore& ps, const Tensor& gy, GradStore& gs);

// One detection per query: argmax class logit (ties to the lower class id),
// confidence sigmoid(logit), box = sigmoid(anchor logits) as cxcywh.
std::vector<std::vector<Detection>> predict(const Tensor& z, const Tensor& anchor_logits,
                                            const ParamStore& ps);

// Plain intersection-over-union with a 1e-12 area floor on the denominator.
double box_iou(const Box& a, const Box& b);
// Generalized IoU in (-1, 1]: IoU minus the enclosing-box penalty
// (enc - union)/enc, both ratios floored by +1e-12 in the denominator.
// When ga/gb are given they receive d(giou)/d(cx,cy,w,h) scaled by gy.
double giou(const Box& a, const Box& b, std::array<double, 4>* ga = nullptr,
            std::array<double, 4>* gb = nullptr, double gy = 1.0);

// Minimum-cost injective assignment of ground truths to queries for a cost
// matrix indexed [query, gt]; requires Q >= G. Among equal-cost optima the
// lexicographically smallest assignment vector (per-gt query indices) wins.
std::vector<std::int64_t> hungarian_match(const Tensor& cost);

struct MatchWeights {
  double cls = 2.0, l1 = 5.0, giou = 2.0;
};

struct DetectionLoss {
  double box = 0.0;  // mean over ground truths of l1 + giou terms
  double cls = 0.0;  // focal binary cross-entropy, mean over K*C entries
  std::vector<std::int64_t> assignment;  // per gt: matched query
};

// Matched losses for one image. logits [K,C], boxes [K,4] cxcywh. The match
// minimizes cls + l1 + giou costs with the given weights; L_box reuses the
// l1/giou weights, L_cls is focal (gamma 2, alpha 0.25) with matched queries
// positive for their ground-truth class.
DetectionLoss detection_loss(const Tensor& logits, const Tensor& boxes,
                             const std::vector<GtItem>& gts, const MatchWeights& w = {});

struct DetectionLossGrads {
  Tensor glogits, gboxes;
};

// Gradients treating the assignment as fixed; dl_box and dl_cls are the
// upstream cotangents of the two scalar losses.
DetectionLossGrads detection_loss_vjp(const Tensor& logits, const Tensor& boxes,
                                      const std::vector<GtItem>& gts,
                                      const std::vector<std::int64_t>& assignment,
                                      const MatchWeights& w, double dl_box, double dl_cls);

inline double total_loss(double l_box, double l_cls, double l_grad) {
  return l_box + l_cls + l_grad;
}

}  // namespace wdfq
