#pragma once

#include <string>
#include <vector>

#include "wdfq/backbone.hpp"
#include "wdfq/ops.hpp"
#include "wdfq/params.hpp"
#include "wdfq/tensor.hpp"

namespace wdfq {

// Pyramid enhancement: level-5 self-attention, a top-down pass that folds the
// frequency stream into each level, then a bottom-up pass that folds the
// spatial stream back in. Runs once per stream ("low" pairs the aligned
// low-frequency pyramid with thermal spatial features, "high" pairs the
// fused detail pyramid with visible ones) with disjoint parameters.

struct HfeConfig {
  std::int64_t c3 = 32, c4 = 64, c5 = 128;  // pyramid widths
  std::int64_t ce = 256;                    // fused width
  int heads = 8;
  int rep_blocks = 3;

  void validate() const;
};

struct MhsaCtx {
  std::int64_t h = 0, w = 0;
  Tensor tok, ln;              // [N,T,C]
  Tensor q, k, v;              // [N,T,C]
  std::vector<Tensor> scores;  // per head, [N,T,T], scaled
  std::vector<Tensor> attn;    // per head, row-stochastic
  Tensor mixed;                // [N,T,C] head concat
};

// Pre-norm single encoder layer: x + Wo(MHSA(LN(x))) on flattened level-5
// cells. All projections are square and bias-free; zero weights give the
// identity map.
Tensor level5_self_attention(const Tensor& f5, const ParamStore& ps, const std::string& stream,
                             const HfeConfig& cfg, MhsaCtx* ctx = nullptr);
Tensor level5_self_attention_vjp(const MhsaCtx& ctx, const ParamStore& ps,
                                 const std::string& stream, const HfeConfig& cfg,
                                 const Tensor& gy, GradStore& gs);

struct FusionCtx {
  Tensor in0, in1, in2;        // raw site inputs
  std::vector<Tensor> block_in, pre;  // RepBlock chain
};

struct FpnCtx {
  Tensor f5s, u4_up;  // upsample input/output feeding the level-4 site
  FusionCtx fus4;
  Tensor p4, u3_up;
  FusionCtx fus3;
};

struct FpnOutputs {
  Tensor p4, p3;
};

// Top-down: P4 fuses the upsampled attention output with the level-4
// frequency and spatial maps; P3 repeats one level down. U(.) is nearest 2x
// followed by a square 1x1 conv; every site projects its three inputs to the
// fused width, sums, and runs the RepBlock chain.
FpnOutputs fpn_topdown(const Tensor& f5s, const Tensor& f4_freq, const Tensor& f4_spatial,
                       const Tensor& f3_freq, const Tensor& f3_spatial, const ParamStore& ps,
                       const std::string& stream, const HfeConfig& cfg, FpnCtx* ctx = nullptr);

struct FpnGrads {
  Tensor gf5s, gf4_freq, gf4_spatial, gf3_freq, gf3_spatial;
};
FpnGrads fpn_backward(const FpnCtx& ctx, const ParamStore& ps, const std::string& stream,
                      const HfeConfig& cfg, const Tensor& gp4, const Tensor& gp3, GradStore& gs);

struct PanCtx {
  Tensor p3, p4, f5s;  // conv inputs for the downsample and lateral branches
  FusionCtx fus4;
  Tensor n4;
  FusionCtx fus5;
};

struct PanOutputs {
  Tensor n4, n5;
};

// Bottom-up: N4 fuses a stride-2 3x3 downsample of P3 with a 1x1 lateral of
// P4 and the level-4 spatial map; N5 repeats with the attention output's
// lateral and the level-5 spatial map.
PanOutputs pan_bottomup(const Tensor& p3, const Tensor& p4, const Tensor& f5s,
                        const Tensor& f4_spatial, const Tensor& f5_spatial, const ParamStore& ps,
                        const std::string& stream, const HfeConfig& cfg, PanCtx* ctx = nullptr);

struct PanGrads {
  Tensor gp3, gp4, gf5s, gf4_spatial, gf5_spatial;
};
PanGrads pan_backward(const PanCtx& ctx, const ParamStore& ps, const std::string& stream,
                      const HfeConfig& cfg, const Tensor& gn4, const Tensor& gn5, GradStore& gs);

void hfe_register(ParamStore& ps, const std::string& stream, const HfeConfig& cfg);

struct HfeOutputs {
  Tensor p3, n4, n5;  // strides 8/16/32, fused width
};

struct HfeStreamCtx {
  MhsaCtx att;
  FpnCtx fpn;
  PanCtx pan;
};

HfeOutputs run_hfe(const Pyramid& freq, const Pyramid& spatial, const ParamStore& ps,
                   const std::string& stream, const HfeConfig& cfg, HfeStreamCtx* ctx = nullptr);

struct HfeGrads {
  Pyramid gfreq, gspatial;
};
HfeGrads hfe_backward(const HfeStreamCtx& ctx, const ParamStore& ps, const std::string& stream,
                      const HfeConfig& cfg, const Tensor& gp3, const Tensor& gn4,
                      const Tensor& gn5, GradStore& gs);

}  // namespace wdfq
