#pragma once

#include "wdfq/ops.hpp"
#include "wdfq/tensor.hpp"

namespace wdfq {

// Single-level orthonormal Haar split of [N,C,H,W] into four [N,C,H/2,W/2]
// sub-bands. Per 2x2 block [[a,b],[c,d]]: ll=(a+b+c+d)/2, lh=(a+b-c-d)/2,
// hl=(a-b+c-d)/2, hh=(a-b-c+d)/2. Orthonormality makes idwt both the exact
// inverse and the VJP of dwt (and vice versa).
struct WaveletBands {
  Tensor ll, lh, hl, hh;
};

WaveletBands dwt_haar(const Tensor& x);                // H, W must be even
Tensor idwt_haar(const Tensor& ll, const Tensor& lh, const Tensor& hl, const Tensor& hh);

// Channel concat of (lh,hl,hh) followed by a 1x1 conv 3C->C plus bias.
// w: [C,3C,1,1], b: [C].
Tensor reduce_high(const Tensor& lh, const Tensor& hl, const Tensor& hh, const Tensor& w,
                   const Tensor& b);

struct ReduceHighGrads {
  Tensor glh, ghl, ghh, gw, gb;
};
ReduceHighGrads reduce_high_vjp(const Tensor& lh, const Tensor& hl, const Tensor& hh,
                                const Tensor& w, const Tensor& b, const Tensor& gy);

// Matches band features back to the spatial extent of their source level.
inline Tensor lift_to_level(const Tensor& band) { return upsample2x(band); }

// 2x2 average pooling; stands in for the low band when the wavelet stage is
// disabled by config (the high band is then all zeros).
Tensor avg_pool2x(const Tensor& x);
Tensor avg_pool2x_vjp(const Tensor& x, const Tensor& gy);

}  // namespace wdfq
