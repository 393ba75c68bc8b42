#include "wdfq/lfha.hpp"

#include <cmath>

namespace wdfq {

std::pair<Tensor, Tensor> channel_swap(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "channel_swap");
  if (a.rank() != 4) raise(ErrorCode::Shape, "channel_swap expects rank-4");
  const std::int64_t c = a.extent(1);
  if (c % 2 != 0)
    raise(ErrorCode::Config, "channel_swap needs an even channel count, got " + std::to_string(c));
  auto ah = split(a, 1, {c / 2, c / 2});
  auto bh = split(b, 1, {c / 2, c / 2});
  return {concat({bh[0], ah[1]}, 1), concat({ah[0], bh[1]}, 1)};
}

Tensor eca(const Tensor& x, const Tensor& kernel, EcaCtx* ctx) {
  if (kernel.rank() != 1 || kernel.extent(0) % 2 == 0)
    raise(ErrorCode::Argument, "eca kernel must be rank-1 with odd width");
  const std::int64_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  const std::int64_t k = kernel.extent(0), half = k / 2;
  Tensor pooled = global_avg_pool(x);
  Tensor pre({n, c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::int64_t j = 0; j < k; ++j) {
        const std::int64_t src = ch + j - half;
        if (src >= 0 && src < c) acc += kernel[j] * pooled.at(i, src);
      }
      pre.at(i, ch) = acc;
    }
  Tensor gate = sigmoid(pre);
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double g = gate.at(i, ch);
      const double* src = x.data() + (i * c + ch) * hw;
      double* dst = y.data() + (i * c + ch) * hw;
      for (std::int64_t p = 0; p < hw; ++p) dst[p] = src[p] * g;
    }
  if (ctx) {
    ctx->x = x;
    ctx->pooled = std::move(pooled);
    ctx->preact = std::move(pre);
  }
  return y;
}

EcaGrads eca_vjp(const EcaCtx& ctx, const Tensor& kernel, const Tensor& gy) {
  const Tensor& x = ctx.x;
  require_same_shape(x, gy, "eca vjp");
  const std::int64_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  const std::int64_t k = kernel.extent(0), half = k / 2;
  Tensor gate = sigmoid(ctx.preact);
  EcaGrads out{Tensor(x.shape()), Tensor(kernel.shape())};
  Tensor ggate({n, c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double g = gate.at(i, ch);
      const double* gsrc = gy.data() + (i * c + ch) * hw;
      const double* xsrc = x.data() + (i * c + ch) * hw;
      double* dst = out.gx.data() + (i * c + ch) * hw;
      double acc = 0.0;
      for (std::int64_t p = 0; p < hw; ++p) {
        dst[p] = gsrc[p] * g;
        acc += gsrc[p] * xsrc[p];
      }
      ggate.at(i, ch) = acc;
    }
  // through the sigmoid and the channel conv back to the pooled descriptor
  Tensor gpre({n, c});
  for (std::int64_t i = 0; i < n * c; ++i)
    gpre[i] = ggate[i] * gate[i] * (1.0 - gate[i]);
  Tensor gpooled({n, c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double gp = gpre.at(i, ch);
      for (std::int64_t j = 0; j < k; ++j) {
        const std::int64_t src = ch + j - half;
        if (src >= 0 && src < c) {
          gpooled.at(i, src) += kernel[j] * gp;
          out.gkernel[j] += ctx.pooled.at(i, src) * gp;
        }
      }
    }
  Tensor gx_pool = global_avg_pool_vjp(x, gpooled);
  out.gx.as_vector() += gx_pool.as_vector();
  return out;
}

Tensor cross_modal_align(const Tensor& fl_q, const Tensor& fl_kv, const CrossModalParams& p,
                         CrossModalCtx* ctx) {
  require_same_shape(fl_q, fl_kv, "cross_modal_align");
  if (fl_q.rank() != 4) raise(ErrorCode::Shape, "cross_modal_align expects rank-4 maps");
  const std::int64_t h = fl_q.extent(2), w = fl_q.extent(3);
  const std::int64_t da = p.wf->extent(0);
  Tensor tok_q = nchw_to_tokens(fl_q);
  Tensor tok_kv = nchw_to_tokens(fl_kv);
  Tensor q = linear(tok_q, *p.wf, Tensor());
  Tensor k = linear(tok_kv, *p.wg, Tensor());
  Tensor v = linear(tok_kv, *p.wh, Tensor());
  Tensor scores = scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(static_cast<double>(da)));
  Tensor attn = softmax(scores, scores.rank() - 1);
  Tensor mixed = matmul(attn, v);
  Tensor out_tok = linear(mixed, *p.wproj, *p.bproj);
  Tensor y = tokens_to_nchw(out_tok, h, w);
  if (ctx) {
    ctx->h = h;
    ctx->w = w;
    ctx->tok_q = std::move(tok_q);
    ctx->tok_kv = std::move(tok_kv);
    ctx->q = std::move(q);
    ctx->k = std::move(k);
    ctx->v = std::move(v);
    ctx->scores = std::move(scores);
    ctx->attn = std::move(attn);
    ctx->mixed = std::move(mixed);
  }
  return y;
}

CrossModalGrads cross_modal_align_vjp(const CrossModalCtx& ctx, const CrossModalParams& p,
                                      const Tensor& gy) {
  const std::int64_t da = p.wf->extent(0);
  Tensor gout_tok = nchw_to_tokens(gy);
  LinearGrads lp = linear_vjp(ctx.mixed, *p.wproj, *p.bproj, gout_tok);
  MatmulGrads mv = matmul_vjp(ctx.attn, ctx.v, lp.gx);
  Tensor gscores = softmax_vjp(ctx.scores, ctx.scores.rank() - 1, mv.ga);
  gscores = scale(gscores, 1.0 / std::sqrt(static_cast<double>(da)));
  MatmulGrads qk = matmul_vjp(ctx.q, transpose_last2(ctx.k), gscores);
  Tensor gk = transpose_last2(qk.gb);
  LinearGrads lq = linear_vjp(ctx.tok_q, *p.wf, Tensor(), qk.ga);
  LinearGrads lk = linear_vjp(ctx.tok_kv, *p.wg, Tensor(), gk);
  LinearGrads lv = linear_vjp(ctx.tok_kv, *p.wh, Tensor(), mv.gb);
  CrossModalGrads out;
  out.gwf = std::move(lq.gw);
  out.gwg = std::move(lk.gw);
  out.gwh = std::move(lv.gw);
  out.gwproj = std::move(lp.gw);
  out.gbproj = std::move(lp.gb);
  out.gfl_q = tokens_to_nchw(lq.gx, ctx.h, ctx.w);
  Tensor gtok_kv = add(lk.gx, lv.gx);
  out.gfl_kv = tokens_to_nchw(gtok_kv, ctx.h, ctx.w);
  return out;
}

namespace {

std::string lvl(int level) { return "lfha.l" + std::to_string(level); }

CrossModalParams level_params(const ParamStore& ps, int level) {
  CrossModalParams p;
  p.wf = &ps.get(lvl(level) + ".f.w");
  p.wg = &ps.get(lvl(level) + ".g.w");
  p.wh = &ps.get(lvl(level) + ".h.w");
  p.wproj = &ps.get(lvl(level) + ".proj.w");
  p.bproj = &ps.get(lvl(level) + ".proj.b");
  return p;
}

}  // namespace

void lfha_register(ParamStore& ps, int level, std::int64_t c) {
  const std::int64_t da = c;  // attention width follows the level's channels
  ps.create(lvl(level) + ".f.w", {da, c}, Init::FanScaledUniform);
  ps.create(lvl(level) + ".g.w", {da, c}, Init::FanScaledUniform);
  ps.create(lvl(level) + ".h.w", {da, c}, Init::FanScaledUniform);
  ps.create(lvl(level) + ".proj.w", {c, da}, Init::FanScaledUniform);
  ps.create(lvl(level) + ".proj.b", {c}, Init::Zeros);
}

void lfha_register_shared(ParamStore& ps) {
  ps.create("lfha.eca.ir.k", {3}, Init::FanScaledUniform);
  ps.create("lfha.eca.rgb.k", {3}, Init::FanScaledUniform);
}

Tensor lfha_apply(const Tensor& ll_ir, const Tensor& ll_rgb, const ParamStore& ps, int level,
                  LfhaCtx* ctx) {
  auto [swapped_ir, swapped_rgb] = channel_swap(ll_ir, ll_rgb);
  Tensor gated_ir = eca(swapped_ir, ps.get("lfha.eca.ir.k"), ctx ? &ctx->eca_q : nullptr);
  Tensor gated_rgb = eca(swapped_rgb, ps.get("lfha.eca.rgb.k"), ctx ? &ctx->eca_kv : nullptr);
  if (ctx) {
    ctx->swapped_q = std::move(swapped_ir);
    ctx->swapped_kv = std::move(swapped_rgb);
  }
  return cross_modal_align(gated_ir, gated_rgb, level_params(ps, level),
                           ctx ? &ctx->cma : nullptr);
}

LfhaGrads lfha_backward(const LfhaCtx& ctx, const ParamStore& ps, int level, const Tensor& gy,
                        GradStore& gs) {
  CrossModalParams p = level_params(ps, level);
  CrossModalGrads cg = cross_modal_align_vjp(ctx.cma, p, gy);
  gs.accumulate(lvl(level) + ".f.w", cg.gwf);
  gs.accumulate(lvl(level) + ".g.w", cg.gwg);
  gs.accumulate(lvl(level) + ".h.w", cg.gwh);
  gs.accumulate(lvl(level) + ".proj.w", cg.gwproj);
  gs.accumulate(lvl(level) + ".proj.b", cg.gbproj);

  EcaGrads eir = eca_vjp(ctx.eca_q, ps.get("lfha.eca.ir.k"), cg.gfl_q);
  EcaGrads ergb = eca_vjp(ctx.eca_kv, ps.get("lfha.eca.rgb.k"), cg.gfl_kv);
  gs.accumulate("lfha.eca.ir.k", eir.gkernel);
  gs.accumulate("lfha.eca.rgb.k", ergb.gkernel);

  // the swap is a fixed permutation, so its VJP is the same swap
  auto [gll_ir, gll_rgb] = channel_swap(eir.gx, ergb.gx);
  return {std::move(gll_ir), std::move(gll_rgb)};
}

}  // namespace wdfq
