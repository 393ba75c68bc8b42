#pragma once

#include <string>
#include <vector>

#include "wdfq/tensor.hpp"

namespace wdfq {

// Symmetric padding on both spatial axes. edge_pad=false pads with zeros;
// edge_pad=true clamps sample coordinates to the border instead (used by the
// gradient-bank and orientation-histogram paths so constant inputs stay
// constant under derivative filters).
struct Conv2dSpec {
  int stride = 1;
  int pad = 0;
  int dilation = 1;
  int groups = 1;
  bool edge_pad = false;
};

// x: [N,Cin,H,W], w: [Cout,Cin/groups,kh,kw] -> [N,Cout,H',W'] with
// H' = floor((H + 2*pad - dilation*(kh-1) - 1)/stride) + 1.
Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dSpec& spec);

struct Conv2dGrads {
  Tensor gx, gw;
};
Conv2dGrads conv2d_vjp(const Tensor& x, const Tensor& w, const Conv2dSpec& spec,
                       const Tensor& gy);

// Batched matrix product [..,M,K]x[..,K,P] -> [..,M,P]; leading extents
// broadcast against each other (1 stretches).
Tensor matmul(const Tensor& a, const Tensor& b);

struct MatmulGrads {
  Tensor ga, gb;
};
MatmulGrads matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& gy);

// Max-subtracted softmax along `axis`; slices along the axis sum to 1.
Tensor softmax(const Tensor& x, int axis);
Tensor softmax_vjp(const Tensor& x, int axis, const Tensor& gy);

// x: [N,C,H,W]; points: [..,2] with (px,py) normalized to [0,1] over width
// and height. Cell centers sit at ((j+0.5)/W, (i+0.5)/H); out-of-range
// coordinates clamp to the border. N==1 samples the single map for any points
// shape; N>1 requires points' leading extent == N and pairs slice n with map n.
// Output replaces the trailing 2 with C.
Tensor bilinear_sample(const Tensor& x, const Tensor& points);

struct BilinearGrads {
  Tensor gx, gpoints;
};
BilinearGrads bilinear_sample_vjp(const Tensor& x, const Tensor& points, const Tensor& gy);

Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor abs(const Tensor& x);               // VJP uses sign with sign(0)=0
Tensor sigmoid(const Tensor& x);           // overflow-safe on both tails
Tensor sigmoid_vjp(const Tensor& x, const Tensor& gy);
Tensor relu(const Tensor& x);              // subgradient 0 at 0
Tensor relu_vjp(const Tensor& x, const Tensor& gy);

// Normalization over the last axis with eps=1e-12. gamma is stored as an
// offset from 1 (zeros give the identity scale); beta is additive.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta);

struct LayerNormGrads {
  Tensor gx, ggamma, gbeta;
};
LayerNormGrads layer_norm_vjp(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              const Tensor& gy);

// Nearest-neighbor 2x on the two trailing spatial axes of [N,C,H,W].
Tensor upsample2x(const Tensor& x);
Tensor upsample2x_vjp(const Tensor& x, const Tensor& gy);

// [N,C,H,W] -> [N,C] spatial mean.
Tensor global_avg_pool(const Tensor& x);
Tensor global_avg_pool_vjp(const Tensor& x, const Tensor& gy);

// Swap of the two trailing axes; self-inverse, and its own VJP.
Tensor transpose_last2(const Tensor& x);

// [N,C,H,W] <-> [N,H*W,C] token layout; inverse permutations of each other.
Tensor nchw_to_tokens(const Tensor& x);
Tensor tokens_to_nchw(const Tensor& t, std::int64_t h, std::int64_t w);

Tensor scale(const Tensor& x, double s);

// Concatenation along `axis`; parts must agree on every other extent.
// split is its inverse (and VJP) given the part extents along the axis.
Tensor concat(const std::vector<Tensor>& parts, int axis);
std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<std::int64_t>& extents);

// Per-channel bias on [N,C,H,W]; the bias VJP sums over N,H,W.
Tensor bias_add_channels(const Tensor& x, const Tensor& b);
Tensor bias_add_channels_vjp(const Tensor& x, const Tensor& gy);

// y = x . w^T + b over the last axis; w: [out,in], b: [out] or empty for none.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

struct LinearGrads {
  Tensor gx, gw, gb;
};
LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& gy);

// Uniform dispatch over the fixed kernel set, for gradient-check harnesses.
// Registered ids: conv2d, matmul, softmax, bilinear_sample, add, mul, abs,
// sigmoid, layer_norm, upsample, pooling.
struct OpAttrs {
  int axis = -1;     // softmax
  Conv2dSpec conv;   // conv2d
};

const std::vector<std::string>& registered_ops();
bool op_registered(const std::string& op);
Tensor op_forward(const std::string& op, const std::vector<Tensor>& inputs,
                  const OpAttrs& attrs);
std::vector<Tensor> op_vjp(const std::string& op, const std::vector<Tensor>& inputs,
                           const Tensor& cotangent, const OpAttrs& attrs);

}  // namespace wdfq
