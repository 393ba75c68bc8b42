#pragma once

#include <vector>

#include "wdfq/ops.hpp"
#include "wdfq/params.hpp"
#include "wdfq/tensor.hpp"

namespace wdfq {

// Stand-in for a deep multi-scale extractor: a stride-2 stem plus four
// stride-2 stages; stages 3..5 are emitted at strides 8/16/32. One parameter
// set serves both modalities.
struct BackboneConfig {
  std::int64_t c0 = 16;    // stem and stage-2 channels
  std::int64_t c3 = 32;
  std::int64_t c4 = 64;
  std::int64_t c5 = 128;
  int blocks = 1;          // residual blocks per stage

  void validate() const;
};

// conv 3x3 (+bias) then elementwise max with 0; `pre` is kept for backward.
struct ConvActCtx {
  Tensor x, pre;
};

struct ResBlockCtx {
  Tensor x, pre;
};

struct StageCtx {
  ConvActCtx down;
  std::vector<ResBlockCtx> blocks;
};

struct BackboneCtx {
  ConvActCtx stem;
  StageCtx s2, s3, s4, s5;
};

struct Pyramid {
  Tensor l3, l4, l5;
};

void backbone_register(ParamStore& ps, const BackboneConfig& cfg);

// image: [N,3,H,W] with H and W divisible by 64 (checked before any compute).
Pyramid backbone_forward(const Tensor& image, const ParamStore& ps, const BackboneConfig& cfg,
                         BackboneCtx* ctx = nullptr);

// Accumulates parameter gradients; gimage (optional) receives the image
// cotangent.
void backbone_backward(const BackboneCtx& ctx, const ParamStore& ps, const BackboneConfig& cfg,
                       const Tensor& gl3, const Tensor& gl4, const Tensor& gl5, GradStore& gs,
                       Tensor* gimage = nullptr);

}  // namespace wdfq
