#pragma once

#include <utility>

#include "wdfq/ops.hpp"
#include "wdfq/params.hpp"
#include "wdfq/tensor.hpp"

namespace wdfq {

// Low-frequency alignment stage: swap the first half of the channel slices
// between the modalities, gate each map with efficient channel attention,
// then run single-head cross-modal attention with thermal queries against
// visible keys/values.

// a' takes b's first C/2 channels, b' takes a's; applying it twice restores
// the pair.
std::pair<Tensor, Tensor> channel_swap(const Tensor& a, const Tensor& b);

struct EcaCtx {
  Tensor x, pooled, preact;  // pooled [N,C]; preact: channel conv output before the gate
};

// Global average pool per channel, zero-padded 1-D conv of odd width across
// the channel axis, sigmoid gate, then per-channel rescale of x.
Tensor eca(const Tensor& x, const Tensor& kernel, EcaCtx* ctx = nullptr);

struct EcaGrads {
  Tensor gx, gkernel;
};
EcaGrads eca_vjp(const EcaCtx& ctx, const Tensor& kernel, const Tensor& gy);

struct CrossModalParams {
  const Tensor* wf;     // [Da, C] queries, thermal side
  const Tensor* wg;     // [Da, C] keys, visible side
  const Tensor* wh;     // [Da, C] values, visible side
  const Tensor* wproj;  // [C, Da]
  const Tensor* bproj;  // [C]
};

struct CrossModalCtx {
  std::int64_t h = 0, w = 0;
  Tensor tok_q, tok_kv;          // [N,T,C]
  Tensor q, k, v;                // [N,T,Da]
  Tensor scores;                 // [N,T,T] after the 1/sqrt(Da) scale
  Tensor attn;                   // row-stochastic over visible tokens
  Tensor mixed;                  // [N,T,Da]
};

// fl_q: thermal low band, fl_kv: visible low band, both [N,C,H,W] at the same
// level. Rows of the attention matrix sum to 1; output is projected back to C
// and reshaped onto the input grid.
Tensor cross_modal_align(const Tensor& fl_q, const Tensor& fl_kv, const CrossModalParams& p,
                         CrossModalCtx* ctx = nullptr);

struct CrossModalGrads {
  Tensor gfl_q, gfl_kv, gwf, gwg, gwh, gwproj, gbproj;
};
CrossModalGrads cross_modal_align_vjp(const CrossModalCtx& ctx, const CrossModalParams& p,
                                      const Tensor& gy);

// Registers per-level attention maps plus one ECA kernel per modality.
void lfha_register(ParamStore& ps, int level, std::int64_t c);
void lfha_register_shared(ParamStore& ps);

struct LfhaCtx {
  Tensor swapped_q, swapped_kv;
  EcaCtx eca_q, eca_kv;
  CrossModalCtx cma;
};

// Full per-level stage on the two low bands: swap, per-modality ECA, align.
Tensor lfha_apply(const Tensor& ll_ir, const Tensor& ll_rgb, const ParamStore& ps, int level,
                  LfhaCtx* ctx = nullptr);

struct LfhaGrads {
  Tensor gll_ir, gll_rgb;
};
LfhaGrads lfha_backward(const LfhaCtx& ctx, const ParamStore& ps, int level, const Tensor& gy,
                        GradStore& gs);

}  // namespace wdfq
