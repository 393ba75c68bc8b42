#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "wdfq/backbone.hpp"
#include "wdfq/params.hpp"
#include "wdfq/tensor.hpp"

namespace wdfq {

// Frequency-aware query selection: scalar gates on the two token streams, a
// scored top-K query initialization with a box head, and a deformable decoder
// whose cross-attention samples both gated pyramids jointly.
//
// Layout conventions, fixed so tie-breaks and oracles are reproducible:
//  - token axis per stream concatenates levels finest-first (l3, l4, l5),
//    row-major within a level; select_queries concatenates high then low;
//  - the cross-attention slot axis is head-major: slot g within a head runs
//    over (stream, level, point) with stream 0 = low, 1 = high, so each
//    head's joint softmax group of 2*3*points values is contiguous;
//  - anchors are carried as logits; boxes are their sigmoid. Refinement adds
//    deltas in logit space and clamps to [-8, 8], and the initial box head
//    clamps the same way so a zero refinement is exactly idempotent.
struct FqsConfig {
  std::int64_t d = 256;     // decoder embedding width
  std::int64_t ce = 256;    // pyramid channel width feeding tokens and values
  int heads = 8;            // M
  int points = 4;           // sampling points per (head, level, stream)
  int layers = 6;
  std::int64_t queries = 300;  // K
  void validate() const;
};

inline constexpr int kFqsLevels = 3;

void fqs_register(ParamStore& ps, const FqsConfig& cfg);

// --- stream gating -------------------------------------------------------

struct StreamGateCtx {
  Tensor tok;     // [N,T,D] ungated tokens
  Tensor pooled;  // [N,D] token mean
  Tensor pre1;    // [N,D] hidden pre-activation
  Tensor hidden;  // [N,D]
  Tensor logit;   // [N,1]
};

// sigmoid(MLP(mean over tokens)) -> [N,1]; stream is "high" or "low".
Tensor stream_gate(const Tensor& tok, const ParamStore& ps, const std::string& stream,
                   StreamGateCtx* ctx = nullptr);
// Gradient of the gate scalar wrt the tokens through the pooled descriptor.
Tensor stream_gate_vjp(const StreamGateCtx& ctx, const ParamStore& ps, const std::string& stream,
                       const Tensor& ggate, GradStore& gs);

struct GateStreamsCtx {
  StreamGateCtx high, low;
  Tensor gate_high, gate_low;  // [N,1]
};
struct GatedStreams {
  Tensor high, low;            // gated tokens
  Tensor gate_high, gate_low;  // [N,1]
};
GatedStreams gate_streams(const Tensor& tok_high, const Tensor& tok_low, const ParamStore& ps,
                          GateStreamsCtx* ctx = nullptr);
struct GateStreamsGrads {
  Tensor gtok_high, gtok_low;
};
// extra_ggate_* carries cotangents that reached the gate scalars outside the
// token product (the pipeline also scales the value pyramids by the gates);
// pass empty tensors when unused.
GateStreamsGrads gate_streams_vjp(const GateStreamsCtx& ctx, const ParamStore& ps,
                                  const Tensor& gy_high, const Tensor& gy_low,
                                  const Tensor& extra_ggate_high, const Tensor& extra_ggate_low,
                                  GradStore& gs);

// --- query initialization ------------------------------------------------

struct SelectCtx {
  Tensor cat;                        // [N,T,D] concatenated gated tokens
  Tensor scores;                     // [N,T]
  std::vector<std::int64_t> picked;  // N*K selected flat indices, score order
  Tensor z;                          // [N,K,D]
  Tensor box_pre;                    // [N,K,4] box logits before the clamp
  std::int64_t t_high = 0;           // high-stream share of the token axis
};
struct SelectedQueries {
  Tensor z;                          // [N,K,D] content queries
  Tensor anchor_logits;              // [N,K,4]
  std::vector<std::int64_t> picked;  // flat indices into cat, per (n,q)
};
// Scores every token with one linear scalar, keeps the K best (ties to the
// lower flat index), ordered by descending score, and derives each query's
// initial anchor from a linear box head in logit space.
SelectedQueries select_queries(const Tensor& tok_high, const Tensor& tok_low,
                               const ParamStore& ps, std::int64_t k, SelectCtx* ctx = nullptr);
struct SelectGrads {
  Tensor gtok_high, gtok_low;
};
SelectGrads select_queries_vjp(const SelectCtx& ctx, const ParamStore& ps, const Tensor& gz,
                               const Tensor& glogits, GradStore& gs);

// --- positional queries ---------------------------------------------------

struct PosCtx {
  Tensor anchors;  // [N,Q,4]
  Tensor pre1;     // [N,Q,D]
  Tensor hidden;   // [N,Q,D]
};
// 2-layer MLP 4 -> D -> D with relu between; anchors are box coordinates in
// [0,1]^4. Parameters are shared by every decoder layer.
Tensor positional_query(const Tensor& anchors, const ParamStore& ps, PosCtx* ctx = nullptr);
Tensor positional_query_vjp(const PosCtx& ctx, const ParamStore& ps, const Tensor& gy,
                            GradStore& gs);

// --- decoder self-attention ------------------------------------------------

struct SelfAttnCtx {
  Tensor z, p, qk;                  // qk = z + p feeds the q/k projections
  Tensor q, k, v;                   // [N,Q,D]
  std::vector<Tensor> scores;       // per head [N,Q,Q], scaled pre-softmax
  std::vector<Tensor> attn;         // per head
  Tensor mixed;                     // [N,Q,D] concatenated head outputs
  Tensor res;                       // z + output projection, pre-norm
};
// Post-norm multi-head attention with q = k = z + p and v = z; prefix names
// the parameter block, e.g. "fqs.dec0.sa.".
Tensor decoder_self_attention(const Tensor& z, const Tensor& p, const ParamStore& ps,
                              const std::string& prefix, const FqsConfig& cfg,
                              SelfAttnCtx* ctx = nullptr);
// Returns gz and writes the positional cotangent to *gp.
Tensor decoder_self_attention_vjp(const SelfAttnCtx& ctx, const ParamStore& ps,
                                  const std::string& prefix, const FqsConfig& cfg,
                                  const Tensor& gy, GradStore& gs, Tensor* gp);

// --- frequency-aware cross-attention ---------------------------------------

struct FacaCtx {
  Tensor z;                       // [N,Q,D]
  Tensor centers;                 // [N,Q,2] normalized (x,y)
  Tensor off;                     // [N,Q,M*2*levels*points*2] raw offsets
  Tensor att_pre;                 // [N,Q,M,2*levels*points] logits
  Tensor attn;                    // softmax of att_pre along the slot axis
  std::array<Tensor, 6> pts;      // per (stream,level): [N,Q,M*points,2]
  std::array<Tensor, 6> feats;    // sampled [N,Q,M*points,Ce]
  std::array<Tensor, 6> vals;     // value-projected [N,Q,M*points,D]
  std::array<Tensor, 6> maps;     // copies of the level maps
  Tensor head_sum;                // [N,Q,D] weighted per-head sums
};
struct FacaGrads {
  Tensor gz, gcenters;
  Pyramid glow, ghigh;
};
// Deformable cross-attention over both pyramids: offsets and logits are
// linear in z, the logits softmax jointly over (stream, level, point) per
// head, and samples are taken at center + offset/level-extent with bilinear
// border clamping. prefix names the block, e.g. "fqs.dec0.faca.".
Tensor faca(const Tensor& z, const Tensor& centers, const Pyramid& low, const Pyramid& high,
            const ParamStore& ps, const std::string& prefix, const FqsConfig& cfg,
            FacaCtx* ctx = nullptr);
FacaGrads faca_vjp(const FacaCtx& ctx, const ParamStore& ps, const std::string& prefix,
                   const FqsConfig& cfg, const Tensor& gy, GradStore& gs);

// --- decoder stack ----------------------------------------------------------

struct DecodeLayerCtx {
  Tensor z_in, logits_in;
  Tensor anchors;      // sigmoid(logits_in)
  PosCtx pos;
  Tensor p;
  SelfAttnCtx sa;
  Tensor z_sa;
  FacaCtx cross;
  Tensor cross_res;    // z_sa + faca output, pre-norm
  Tensor z_cross;
  Tensor ffn_pre1;     // [N,Q,2D]
  Tensor ffn_hidden;
  Tensor ffn_res;      // z_cross + ffn output, pre-norm
  Tensor z_out;
  Tensor logits_sum;   // logits_in + refinement delta, pre-clamp
};
struct DecodeCtx {
  std::vector<DecodeLayerCtx> layers;
};
struct DecodeOutputs {
  Tensor z;              // [N,K,D]
  Tensor anchor_logits;  // [N,K,4]
};
// Per layer: positional query from the current anchors, self-attention, then
// cross-attention and a feed-forward block (each residual + layer norm), and
// finally an anchor refinement in logit space.
DecodeOutputs decode(const Tensor& z0, const Tensor& anchor_logits0, const Pyramid& low,
                     const Pyramid& high, const ParamStore& ps, const FqsConfig& cfg,
                     DecodeCtx* ctx = nullptr);
struct DecodeGrads {
  Tensor gz0, glogits0;
  Pyramid glow, ghigh;
};
DecodeGrads decode_backward(const DecodeCtx& ctx, const ParamStore& ps, const FqsConfig& cfg,
                            const Tensor& gz, const Tensor& glogits, GradStore& gs);

// --- module entry -----------------------------------------------------------

struct FqsCtx {
  std::array<Tensor, 6> raw_maps;       // inputs, (stream*3 + level), low first
  std::array<std::int64_t, 6> level_h{}, level_w{};
  std::array<Tensor, 6> level_tok;      // nchw token layouts before projection
  Tensor tok_high, tok_low;             // projected, pre-gate
  GateStreamsCtx gate;
  Tensor gated_high, gated_low;         // gated tokens
  SelectCtx sel;
  DecodeCtx dec;
};
struct FqsOutputs {
  Tensor z;              // [N,K,D]
  Tensor anchor_logits;  // [N,K,4]
  Tensor gate_high, gate_low;
};
// Full module: tokenize and project both pyramids, gate tokens and value
// pyramids by the per-stream scalars, select K queries, run the decoder.
FqsOutputs fqs_run(const Pyramid& high, const Pyramid& low, const ParamStore& ps,
                   const FqsConfig& cfg, FqsCtx* ctx = nullptr);
struct FqsGrads {
  Pyramid ghigh, glow;
};
FqsGrads fqs_backward(const FqsCtx& ctx, const ParamStore& ps, const FqsConfig& cfg,
                      const Tensor& gz, const Tensor& glogits, GradStore& gs);

}  // namespace wdfq
