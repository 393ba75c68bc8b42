#include "wdfq/hfe.hpp"

#include <cmath>

#include "wdfq/errors.hpp"

namespace wdfq {

namespace {

const Conv2dSpec kProj{};                  // 1x1
const Conv2dSpec kRep{1, 1, 1, 1, false};  // 3x3 pad 1
const Conv2dSpec kDown{2, 1, 1, 1, false};

std::string stream_prefix(const std::string& stream) { return "hfe." + stream + "."; }

void require_same_grid(const Tensor& a, const Tensor& b, const std::string& what) {
  if (a.extent(2) != b.extent(2) || a.extent(3) != b.extent(3))
    raise(ErrorCode::Shape, what + ": grids " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()) + " differ");
}

// Project the three site inputs to the fused width, sum, then run the
// RepBlock chain y <- y + relu(conv3x3(y)).
Tensor fusion_forward(const Tensor& in0, const Tensor& in1, const Tensor& in2,
                      const ParamStore& ps, const std::string& site, int n_rep,
                      FusionCtx* ctx) {
  require_same_grid(in0, in1, site + "fusion");
  require_same_grid(in0, in2, site + "fusion");
  Tensor y = conv2d(in0, ps.get(site + "proj0.w"), kProj);
  y = add(y, conv2d(in1, ps.get(site + "proj1.w"), kProj));
  y = add(y, conv2d(in2, ps.get(site + "proj2.w"), kProj));
  if (ctx) {
    ctx->in0 = in0;
    ctx->in1 = in1;
    ctx->in2 = in2;
    ctx->block_in.clear();
    ctx->pre.clear();
  }
  for (int j = 0; j < n_rep; ++j) {
    Tensor pre = conv2d(y, ps.get(site + "rep" + std::to_string(j) + ".w"), kRep);
    if (ctx) {
      ctx->block_in.push_back(y);
      ctx->pre.push_back(pre);
    }
    y = add(y, relu(pre));
  }
  return y;
}

struct FusionGrads {
  Tensor g0, g1, g2;
};

FusionGrads fusion_backward(const FusionCtx& ctx, const ParamStore& ps, const std::string& site,
                            const Tensor& gy, GradStore& gs) {
  Tensor g = gy;
  for (int j = static_cast<int>(ctx.pre.size()) - 1; j >= 0; --j) {
    const std::string name = site + "rep" + std::to_string(j) + ".w";
    Tensor gpre = relu_vjp(ctx.pre[static_cast<std::size_t>(j)], g);
    Conv2dGrads cg = conv2d_vjp(ctx.block_in[static_cast<std::size_t>(j)], ps.get(name), kRep,
                                gpre);
    gs.accumulate(name, cg.gw);
    g = add(g, cg.gx);
  }
  FusionGrads out;
  Conv2dGrads c0 = conv2d_vjp(ctx.in0, ps.get(site + "proj0.w"), kProj, g);
  Conv2dGrads c1 = conv2d_vjp(ctx.in1, ps.get(site + "proj1.w"), kProj, g);
  Conv2dGrads c2 = conv2d_vjp(ctx.in2, ps.get(site + "proj2.w"), kProj, g);
  gs.accumulate(site + "proj0.w", c0.gw);
  gs.accumulate(site + "proj1.w", c1.gw);
  gs.accumulate(site + "proj2.w", c2.gw);
  out.g0 = std::move(c0.gx);
  out.g1 = std::move(c1.gx);
  out.g2 = std::move(c2.gx);
  return out;
}

void register_site(ParamStore& ps, const std::string& site, std::int64_t w0, std::int64_t w1,
                   std::int64_t w2, const HfeConfig& cfg) {
  ps.create(site + "proj0.w", {cfg.ce, w0, 1, 1}, Init::FanScaledUniform);
  ps.create(site + "proj1.w", {cfg.ce, w1, 1, 1}, Init::FanScaledUniform);
  ps.create(site + "proj2.w", {cfg.ce, w2, 1, 1}, Init::FanScaledUniform);
  for (int j = 0; j < cfg.rep_blocks; ++j)
    ps.create(site + "rep" + std::to_string(j) + ".w", {cfg.ce, cfg.ce, 3, 3},
              Init::FanScaledUniform);
}

}  // namespace

void HfeConfig::validate() const {
  if (c3 <= 0 || c4 <= 0 || c5 <= 0 || ce <= 0)
    raise(ErrorCode::Config, "pyramid and fused widths must be positive");
  if (heads <= 0 || c5 % heads != 0)
    raise(ErrorCode::Config, "level-5 width " + std::to_string(c5) +
                                 " not divisible by head count " + std::to_string(heads));
  if (rep_blocks < 0) raise(ErrorCode::Config, "rep_blocks must be nonnegative");
}

Tensor level5_self_attention(const Tensor& f5, const ParamStore& ps, const std::string& stream,
                             const HfeConfig& cfg, MhsaCtx* ctx) {
  cfg.validate();
  if (f5.rank() != 4 || f5.extent(1) != cfg.c5)
    raise(ErrorCode::Shape, "level-5 attention expects [N," + std::to_string(cfg.c5) +
                                ",H,W], got " + shape_str(f5.shape()));
  const std::string p = stream_prefix(stream) + "att.";
  const std::int64_t c = cfg.c5, hh = f5.extent(2), ww = f5.extent(3);
  const std::int64_t dh = c / cfg.heads;
  Tensor tok = nchw_to_tokens(f5);
  Tensor ln = layer_norm(tok, ps.get(p + "ln.g"), ps.get(p + "ln.b"));
  Tensor q = linear(ln, ps.get(p + "wq"), Tensor());
  Tensor k = linear(ln, ps.get(p + "wk"), Tensor());
  Tensor v = linear(ln, ps.get(p + "wv"), Tensor());
  const std::vector<std::int64_t> parts(static_cast<std::size_t>(cfg.heads), dh);
  std::vector<Tensor> qh = split(q, 2, parts);
  std::vector<Tensor> kh = split(k, 2, parts);
  std::vector<Tensor> vh = split(v, 2, parts);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> scores, attn, mixed_h;
  for (int m = 0; m < cfg.heads; ++m) {
    Tensor s = scale(matmul(qh[static_cast<std::size_t>(m)],
                            transpose_last2(kh[static_cast<std::size_t>(m)])),
                     sc);
    Tensor a = softmax(s, 2);
    mixed_h.push_back(matmul(a, vh[static_cast<std::size_t>(m)]));
    scores.push_back(std::move(s));
    attn.push_back(std::move(a));
  }
  Tensor mixed = concat(mixed_h, 2);
  Tensor out_tok = linear(mixed, ps.get(p + "wo"), Tensor());
  Tensor y = add(f5, tokens_to_nchw(out_tok, hh, ww));
  if (ctx) {
    ctx->h = hh;
    ctx->w = ww;
    ctx->tok = std::move(tok);
    ctx->ln = std::move(ln);
    ctx->q = std::move(q);
    ctx->k = std::move(k);
    ctx->v = std::move(v);
    ctx->scores = std::move(scores);
    ctx->attn = std::move(attn);
    ctx->mixed = std::move(mixed);
  }
  return y;
}

Tensor level5_self_attention_vjp(const MhsaCtx& ctx, const ParamStore& ps,
                                 const std::string& stream, const HfeConfig& cfg,
                                 const Tensor& gy, GradStore& gs) {
  const std::string p = stream_prefix(stream) + "att.";
  const std::int64_t dh = cfg.c5 / cfg.heads;
  const std::vector<std::int64_t> parts(static_cast<std::size_t>(cfg.heads), dh);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor gout_tok = nchw_to_tokens(gy);
  LinearGrads lo = linear_vjp(ctx.mixed, ps.get(p + "wo"), Tensor(), gout_tok);
  gs.accumulate(p + "wo", lo.gw);
  std::vector<Tensor> gmixed_h = split(lo.gx, 2, parts);
  std::vector<Tensor> qh = split(ctx.q, 2, parts);
  std::vector<Tensor> kh = split(ctx.k, 2, parts);
  std::vector<Tensor> vh = split(ctx.v, 2, parts);
  std::vector<Tensor> gqh, gkh, gvh;
  for (int m = 0; m < cfg.heads; ++m) {
    const auto mi = static_cast<std::size_t>(m);
    MatmulGrads mv = matmul_vjp(ctx.attn[mi], vh[mi], gmixed_h[mi]);
    gvh.push_back(std::move(mv.gb));
    Tensor gscores = scale(softmax_vjp(ctx.scores[mi], 2, mv.ga), sc);
    MatmulGrads qk = matmul_vjp(qh[mi], transpose_last2(kh[mi]), gscores);
    gqh.push_back(std::move(qk.ga));
    gkh.push_back(transpose_last2(qk.gb));
  }
  LinearGrads lq = linear_vjp(ctx.ln, ps.get(p + "wq"), Tensor(), concat(gqh, 2));
  LinearGrads lk = linear_vjp(ctx.ln, ps.get(p + "wk"), Tensor(), concat(gkh, 2));
  LinearGrads lv = linear_vjp(ctx.ln, ps.get(p + "wv"), Tensor(), concat(gvh, 2));
  gs.accumulate(p + "wq", lq.gw);
  gs.accumulate(p + "wk", lk.gw);
  gs.accumulate(p + "wv", lv.gw);
  Tensor gln = add(add(lq.gx, lk.gx), lv.gx);
  LayerNormGrads ln = layer_norm_vjp(ctx.tok, ps.get(p + "ln.g"), ps.get(p + "ln.b"), gln);
  gs.accumulate(p + "ln.g", ln.ggamma);
  gs.accumulate(p + "ln.b", ln.gbeta);
  return add(gy, tokens_to_nchw(ln.gx, ctx.h, ctx.w));
}

FpnOutputs fpn_topdown(const Tensor& f5s, const Tensor& f4_freq, const Tensor& f4_spatial,
                       const Tensor& f3_freq, const Tensor& f3_spatial, const ParamStore& ps,
                       const std::string& stream, const HfeConfig& cfg, FpnCtx* ctx) {
  const std::string pre = stream_prefix(stream);
  Tensor u4_up = upsample2x(f5s);
  Tensor lifted4 = conv2d(u4_up, ps.get(pre + "u4.w"), kProj);
  Tensor p4 = fusion_forward(lifted4, f4_freq, f4_spatial, ps, pre + "p4.", cfg.rep_blocks,
                             ctx ? &ctx->fus4 : nullptr);
  Tensor u3_up = upsample2x(p4);
  Tensor lifted3 = conv2d(u3_up, ps.get(pre + "u3.w"), kProj);
  Tensor p3 = fusion_forward(lifted3, f3_freq, f3_spatial, ps, pre + "p3.", cfg.rep_blocks,
                             ctx ? &ctx->fus3 : nullptr);
  if (ctx) {
    ctx->f5s = f5s;
    ctx->u4_up = std::move(u4_up);
    ctx->p4 = p4;
    ctx->u3_up = std::move(u3_up);
  }
  return {std::move(p4), std::move(p3)};
}

FpnGrads fpn_backward(const FpnCtx& ctx, const ParamStore& ps, const std::string& stream,
                      const HfeConfig& cfg, const Tensor& gp4, const Tensor& gp3, GradStore& gs) {
  (void)cfg;
  const std::string pre = stream_prefix(stream);
  FusionGrads f3 = fusion_backward(ctx.fus3, ps, pre + "p3.", gp3, gs);
  Conv2dGrads u3 = conv2d_vjp(ctx.u3_up, ps.get(pre + "u3.w"), kProj, f3.g0);
  gs.accumulate(pre + "u3.w", u3.gw);
  Tensor gp4_total = add(gp4, upsample2x_vjp(ctx.p4, u3.gx));
  FusionGrads f4 = fusion_backward(ctx.fus4, ps, pre + "p4.", gp4_total, gs);
  Conv2dGrads u4 = conv2d_vjp(ctx.u4_up, ps.get(pre + "u4.w"), kProj, f4.g0);
  gs.accumulate(pre + "u4.w", u4.gw);
  FpnGrads out;
  out.gf5s = upsample2x_vjp(ctx.f5s, u4.gx);
  out.gf4_freq = std::move(f4.g1);
  out.gf4_spatial = std::move(f4.g2);
  out.gf3_freq = std::move(f3.g1);
  out.gf3_spatial = std::move(f3.g2);
  return out;
}

PanOutputs pan_bottomup(const Tensor& p3, const Tensor& p4, const Tensor& f5s,
                        const Tensor& f4_spatial, const Tensor& f5_spatial, const ParamStore& ps,
                        const std::string& stream, const HfeConfig& cfg, PanCtx* ctx) {
  const std::string pre = stream_prefix(stream);
  Tensor d4 = conv2d(p3, ps.get(pre + "d4.w"), kDown);
  Tensor lat4 = conv2d(p4, ps.get(pre + "lat4.w"), kProj);
  Tensor n4 = fusion_forward(d4, lat4, f4_spatial, ps, pre + "n4.", cfg.rep_blocks,
                             ctx ? &ctx->fus4 : nullptr);
  Tensor d5 = conv2d(n4, ps.get(pre + "d5.w"), kDown);
  Tensor lat5 = conv2d(f5s, ps.get(pre + "lat5.w"), kProj);
  Tensor n5 = fusion_forward(d5, lat5, f5_spatial, ps, pre + "n5.", cfg.rep_blocks,
                             ctx ? &ctx->fus5 : nullptr);
  if (ctx) {
    ctx->p3 = p3;
    ctx->p4 = p4;
    ctx->f5s = f5s;
    ctx->n4 = n4;
  }
  return {std::move(n4), std::move(n5)};
}

PanGrads pan_backward(const PanCtx& ctx, const ParamStore& ps, const std::string& stream,
                      const HfeConfig& cfg, const Tensor& gn4, const Tensor& gn5, GradStore& gs) {
  (void)cfg;
  const std::string pre = stream_prefix(stream);
  FusionGrads f5 = fusion_backward(ctx.fus5, ps, pre + "n5.", gn5, gs);
  Conv2dGrads d5 = conv2d_vjp(ctx.n4, ps.get(pre + "d5.w"), kDown, f5.g0);
  Conv2dGrads l5 = conv2d_vjp(ctx.f5s, ps.get(pre + "lat5.w"), kProj, f5.g1);
  gs.accumulate(pre + "d5.w", d5.gw);
  gs.accumulate(pre + "lat5.w", l5.gw);
  Tensor gn4_total = add(gn4, d5.gx);
  FusionGrads f4 = fusion_backward(ctx.fus4, ps, pre + "n4.", gn4_total, gs);
  Conv2dGrads d4 = conv2d_vjp(ctx.p3, ps.get(pre + "d4.w"), kDown, f4.g0);
  Conv2dGrads l4 = conv2d_vjp(ctx.p4, ps.get(pre + "lat4.w"), kProj, f4.g1);
  gs.accumulate(pre + "d4.w", d4.gw);
  gs.accumulate(pre + "lat4.w", l4.gw);
  PanGrads out;
  out.gp3 = std::move(d4.gx);
  out.gp4 = std::move(l4.gx);
  out.gf5s = std::move(l5.gx);
  out.gf4_spatial = std::move(f4.g2);
  out.gf5_spatial = std::move(f5.g2);
  return out;
}

void hfe_register(ParamStore& ps, const std::string& stream, const HfeConfig& cfg) {
  cfg.validate();
  const std::string pre = stream_prefix(stream);
  for (const char* n : {"wq", "wk", "wv", "wo"})
    ps.create(pre + "att." + n, {cfg.c5, cfg.c5}, Init::FanScaledUniform);
  ps.create(pre + "att.ln.g", {cfg.c5}, Init::Zeros);
  ps.create(pre + "att.ln.b", {cfg.c5}, Init::Zeros);
  ps.create(pre + "u4.w", {cfg.c5, cfg.c5, 1, 1}, Init::FanScaledUniform);
  ps.create(pre + "u3.w", {cfg.ce, cfg.ce, 1, 1}, Init::FanScaledUniform);
  ps.create(pre + "d4.w", {cfg.ce, cfg.ce, 3, 3}, Init::FanScaledUniform);
  ps.create(pre + "d5.w", {cfg.ce, cfg.ce, 3, 3}, Init::FanScaledUniform);
  ps.create(pre + "lat4.w", {cfg.ce, cfg.ce, 1, 1}, Init::FanScaledUniform);
  ps.create(pre + "lat5.w", {cfg.c5, cfg.c5, 1, 1}, Init::FanScaledUniform);
  register_site(ps, pre + "p4.", cfg.c5, cfg.c4, cfg.c4, cfg);
  register_site(ps, pre + "p3.", cfg.ce, cfg.c3, cfg.c3, cfg);
  register_site(ps, pre + "n4.", cfg.ce, cfg.ce, cfg.c4, cfg);
  register_site(ps, pre + "n5.", cfg.ce, cfg.c5, cfg.c5, cfg);
}

HfeOutputs run_hfe(const Pyramid& freq, const Pyramid& spatial, const ParamStore& ps,
                   const std::string& stream, const HfeConfig& cfg, HfeStreamCtx* ctx) {
  cfg.validate();
  require_same_grid(freq.l3, spatial.l3, "hfe level 3");
  require_same_grid(freq.l4, spatial.l4, "hfe level 4");
  require_same_grid(freq.l5, spatial.l5, "hfe level 5");
  Tensor f5s = level5_self_attention(freq.l5, ps, stream, cfg, ctx ? &ctx->att : nullptr);
  FpnOutputs fp = fpn_topdown(f5s, freq.l4, spatial.l4, freq.l3, spatial.l3, ps, stream, cfg,
                              ctx ? &ctx->fpn : nullptr);
  PanOutputs pn = pan_bottomup(fp.p3, fp.p4, f5s, spatial.l4, spatial.l5, ps, stream, cfg,
                               ctx ? &ctx->pan : nullptr);
  return {std::move(fp.p3), std::move(pn.n4), std::move(pn.n5)};
}

HfeGrads hfe_backward(const HfeStreamCtx& ctx, const ParamStore& ps, const std::string& stream,
                      const HfeConfig& cfg, const Tensor& gp3, const Tensor& gn4,
                      const Tensor& gn5, GradStore& gs) {
  PanGrads pg = pan_backward(ctx.pan, ps, stream, cfg, gn4, gn5, gs);
  FpnGrads fg = fpn_backward(ctx.fpn, ps, stream, cfg, pg.gp4, add(gp3, pg.gp3), gs);
  Tensor gf5s = add(pg.gf5s, fg.gf5s);
  HfeGrads out;
  out.gfreq.l5 = level5_self_attention_vjp(ctx.att, ps, stream, cfg, gf5s, gs);
  out.gfreq.l4 = std::move(fg.gf4_freq);
  out.gfreq.l3 = std::move(fg.gf3_freq);
  out.gspatial.l3 = std::move(fg.gf3_spatial);
  out.gspatial.l4 = add(fg.gf4_spatial, pg.gf4_spatial);
  out.gspatial.l5 = std::move(pg.gf5_spatial);
  return out;
}

}  // namespace wdfq
