#pragma once

#include "wdfq/ops.hpp"
#include "wdfq/params.hpp"
#include "wdfq/tensor.hpp"

namespace wdfq {

// High-frequency retention stage: per level, each modality's detail map goes
// through summed multi-scale convs and an orientation-energy residual, then a
// depthwise-separable fusion compresses the pair back to C channels. A fixed
// gradient bank drives the consistency loss against the pre-stage inputs.

struct MultiscaleParams {
  const Tensor* w1;  // [C,C,1,1]
  const Tensor* w3;  // [C,C,3,3], pad 1
  const Tensor* w5;  // [C,C,5,5], pad 2
};

struct MultiscaleCtx {
  Tensor x;
};

// Sum of the three bias-free branches; extents are preserved.
Tensor multiscale_conv(const Tensor& x, const MultiscaleParams& p, MultiscaleCtx* ctx = nullptr);

struct MultiscaleGrads {
  Tensor gx, gw1, gw3, gw5;
};
MultiscaleGrads multiscale_conv_vjp(const MultiscaleCtx& ctx, const MultiscaleParams& p,
                                    const Tensor& gy);

struct HogCtx {
  Tensor dx, dy;  // Sobel responses, replicate padded
  Tensor wavg;    // mean of the 4 orientation-bin weights per pixel
  Tensor h;       // orientation-energy map before normalization
  Tensor s;       // 3x3 neighborhood sums of h^2 (in-bounds neighbors only)
};

// x + normalize(orientation_energy(x)) per channel. Sobel gradients use
// replicate padding and pairwise differences so constant inputs reproduce
// themselves bit for bit. Energy is the soft 4-bin histogram of the gradient
// magnitude (bins at 0, pi/4, pi/2, 3pi/4 with cos^2 weights), averaged over
// bins and divided by the local 3x3 L2 norm plus eps.
Tensor hog_enhance(const Tensor& x, HogCtx* ctx = nullptr);

// Gradient w.r.t. x. The orientation path is skipped: the four cos^2 weights
// sum to 2 for every angle, so their angular derivative cancels identically.
Tensor hog_enhance_vjp(const HogCtx& ctx, const Tensor& gy);

struct FuseParams {
  const Tensor* dw;  // [2C,1,3,3] depthwise, pad 1
  const Tensor* pw;  // [C,2C,1,1] pointwise
};

struct FuseCtx {
  Tensor cat, mid;
};

// concat(a,b) on channels -> depthwise 3x3 -> pointwise 2C->C, bias-free.
Tensor fuse_specific(const Tensor& a, const Tensor& b, const FuseParams& p,
                     FuseCtx* ctx = nullptr);

struct FuseGrads {
  Tensor ga, gb, gdw, gpw;
};
FuseGrads fuse_specific_vjp(const FuseCtx& ctx, const FuseParams& p, const Tensor& gy);

// Dilated 3x3 Sobel responses, replicate padded; d >= 1. Single-pixel maps
// give exactly 0 for any value (every tap clamps to the same cell).
Tensor sobel_dx(const Tensor& x, std::int64_t d);
Tensor sobel_dy(const Tensor& x, std::int64_t d);

// G_k(x) = |sobel_x * x| + |sobel_y * x| with dilation and padding k, per
// channel, replicate padded. Fixed stencils, never trained; k in {1,2,3}.
// Constant maps give exactly 0 and G_k(-x) == G_k(x) bitwise.
Tensor grad_bank(const Tensor& x, int k);

// (1/N) sum_{k=1..3} [ |fh - G_k(fh_r)|_1 + |fh - G_k(fh_i)|_1 ] with N the
// element count of fh. Optional gradients cover all three inputs; the targets
// receive gradient through the Sobel responses. sign(0) = 0 at every kink.
double grad_consistency_loss(const Tensor& fh, const Tensor& fh_r, const Tensor& fh_i,
                             Tensor* gfh = nullptr, Tensor* gfh_r = nullptr,
                             Tensor* gfh_i = nullptr);

// One kernel set per level, shared by both modalities.
void hfsr_register(ParamStore& ps, int level, std::int64_t c);

struct HfsrCtx {
  MultiscaleCtx ms_r, ms_i;
  HogCtx hog_r, hog_i;
  FuseCtx fuse;
};

// Per-level stage: multiscale convs, orientation residual, then fusion.
Tensor hfsr_apply(const Tensor& fh_r, const Tensor& fh_i, const ParamStore& ps, int level,
                  HfsrCtx* ctx = nullptr);

struct HfsrGrads {
  Tensor gfh_r, gfh_i;
};
HfsrGrads hfsr_backward(const HfsrCtx& ctx, const ParamStore& ps, int level, const Tensor& gy,
                        GradStore& gs);

}  // namespace wdfq
