#include "wdfq/fqs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "wdfq/errors.hpp"
#include "wdfq/ops.hpp"

namespace wdfq {
namespace {

constexpr double kLogitClamp = 8.0;

std::string layer_prefix(int layer) { return "fqs.dec" + std::to_string(layer) + "."; }

Tensor clamp_logits(const Tensor& x) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i)
    y[i] = std::clamp(x[i], -kLogitClamp, kLogitClamp);
  return y;
}

// Pass-through on the closed interval, zero outside (saturated entries).
Tensor clamp_logits_vjp(const Tensor& pre, const Tensor& gy) {
  require_same_shape(pre, gy, "clamp cotangent");
  Tensor gx(pre.shape());
  for (std::int64_t i = 0; i < pre.size(); ++i)
    gx[i] = (pre[i] >= -kLogitClamp && pre[i] <= kLogitClamp) ? gy[i] : 0.0;
  return gx;
}

// Per-item scaling of [N,...] by a gate [N,1]. A gate of exactly 0 writes
// +0.0 instead of 0*x so a fully closed stream is bit-identical no matter
// what values it carried (0*negative would leave -0.0 fingerprints).
Tensor scale_per_item(const Tensor& x, const Tensor& gate) {
  Tensor y(x.shape());
  const std::int64_t n = x.extent(0), per = x.size() / n;
  for (std::int64_t b = 0; b < n; ++b) {
    const double g = gate[b];
    if (g == 0.0) continue;  // y is zero-initialized
    for (std::int64_t i = 0; i < per; ++i) y[b * per + i] = g * x[b * per + i];
  }
  return y;
}

void check_tokens(const Tensor& tok, const char* what) {
  if (tok.rank() != 3)
    raise(ErrorCode::Shape, std::string(what) + " tokens must be [N,T,D], got " +
                                shape_str(tok.shape()));
}

const Tensor* pyramid_level(const Pyramid& p, int i) {
  switch (i) {
    case 0: return &p.l3;
    case 1: return &p.l4;
    default: return &p.l5;
  }
}

}  // namespace

void FqsConfig::validate() const {
  if (d < 1 || ce < 1 || heads < 1 || points < 1 || queries < 1)
    raise(ErrorCode::Config, "fqs dimensions must be positive");
  if (layers < 1) raise(ErrorCode::Config, "fqs decoder needs at least one layer");
  if (d % heads != 0)
    raise(ErrorCode::Config, "content width " + std::to_string(d) +
                                 " not divisible by head count " + std::to_string(heads));
}

void fqs_register(ParamStore& ps, const FqsConfig& cfg) {
  cfg.validate();
  const std::int64_t d = cfg.d, ce = cfg.ce;
  for (const std::string stream : {"high", "low"}) {
    ps.create("fqs.tok." + stream + ".w", {d, ce}, Init::FanScaledUniform);
    const std::string g = "fqs.gate." + stream + ".";
    ps.create(g + "w1", {d, d}, Init::FanScaledUniform);
    ps.create(g + "b1", {d}, Init::Zeros);
    ps.create(g + "w2", {1, d}, Init::FanScaledUniform);
    ps.create(g + "b2", {1}, Init::Zeros);
  }
  ps.create("fqs.score.w", {1, d}, Init::FanScaledUniform);
  ps.create("fqs.box.w", {4, d}, Init::FanScaledUniform);
  ps.create("fqs.box.b", {4}, Init::Zeros);
  ps.create("fqs.pos.w1", {d, 4}, Init::FanScaledUniform);
  ps.create("fqs.pos.b1", {d}, Init::Zeros);
  ps.create("fqs.pos.w2", {d, d}, Init::FanScaledUniform);
  ps.create("fqs.pos.b2", {d}, Init::Zeros);
  const std::int64_t slots = 2 * kFqsLevels * cfg.points;  // joint softmax group per head
  for (int l = 0; l < cfg.layers; ++l) {
    const std::string pre = layer_prefix(l);
    for (const std::string w : {"wq", "wk", "wv", "wo"})
      ps.create(pre + "sa." + w, {d, d}, Init::FanScaledUniform);
    ps.create(pre + "sa.ln.g", {d}, Init::Zeros);
    ps.create(pre + "sa.ln.b", {d}, Init::Zeros);
    ps.create(pre + "faca.off.w", {cfg.heads * slots * 2, d}, Init::FanScaledUniform);
    ps.create(pre + "faca.off.b", {cfg.heads * slots * 2}, Init::Zeros);
    ps.create(pre + "faca.att.w", {cfg.heads * slots, d}, Init::FanScaledUniform);
    ps.create(pre + "faca.att.b", {cfg.heads * slots}, Init::Zeros);
    ps.create(pre + "faca.val.w", {d, ce}, Init::FanScaledUniform);
    ps.create(pre + "faca.out.w", {d, d}, Init::FanScaledUniform);
    ps.create(pre + "faca.ln.g", {d}, Init::Zeros);
    ps.create(pre + "faca.ln.b", {d}, Init::Zeros);
    ps.create(pre + "ffn.w1", {2 * d, d}, Init::FanScaledUniform);
    ps.create(pre + "ffn.b1", {2 * d}, Init::Zeros);
    ps.create(pre + "ffn.w2", {d, 2 * d}, Init::FanScaledUniform);
    ps.create(pre + "ffn.b2", {d}, Init::Zeros);
    ps.create(pre + "ffn.ln.g", {d}, Init::Zeros);
    ps.create(pre + "ffn.ln.b", {d}, Init::Zeros);
    ps.create(pre + "ref.w", {4, d}, Init::FanScaledUniform);
    ps.create(pre + "ref.b", {4}, Init::Zeros);
  }
}

Tensor stream_gate(const Tensor& tok, const ParamStore& ps, const std::string& stream,
                   StreamGateCtx* ctx) {
  check_tokens(tok, "stream_gate");
  const std::string pre = "fqs.gate." + stream + ".";
  const std::int64_t n = tok.extent(0), t = tok.extent(1), d = tok.extent(2);
  Tensor pooled({n, d});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t j = 0; j < d; ++j) {
      double acc = 0.0;
      for (std::int64_t i = 0; i < t; ++i) acc += tok.at(b, i, j);
      pooled.at(b, j) = acc / static_cast<double>(t);
    }
  Tensor pre1 = linear(pooled, ps.get(pre + "w1"), ps.get(pre + "b1"));
  Tensor hidden = relu(pre1);
  Tensor logit = linear(hidden, ps.get(pre + "w2"), ps.get(pre + "b2"));
  Tensor gate = sigmoid(logit);
  if (ctx) {
    ctx->tok = tok;
    ctx->pooled = std::move(pooled);
    ctx->pre1 = std::move(pre1);
    ctx->hidden = std::move(hidden);
    ctx->logit = std::move(logit);
  }
  return gate;
}

Tensor stream_gate_vjp(const StreamGateCtx& ctx, const ParamStore& ps, const std::string& stream,
                       const Tensor& ggate, GradStore& gs) {
  const std::string pre = "fqs.gate." + stream + ".";
  Tensor glogit = sigmoid_vjp(ctx.logit, ggate);
  LinearGrads l2 = linear_vjp(ctx.hidden, ps.get(pre + "w2"), ps.get(pre + "b2"), glogit);
  gs.accumulate(pre + "w2", l2.gw);
  gs.accumulate(pre + "b2", l2.gb);
  Tensor gpre1 = relu_vjp(ctx.pre1, l2.gx);
  LinearGrads l1 = linear_vjp(ctx.pooled, ps.get(pre + "w1"), ps.get(pre + "b1"), gpre1);
  gs.accumulate(pre + "w1", l1.gw);
  gs.accumulate(pre + "b1", l1.gb);
  const std::int64_t n = ctx.tok.extent(0), t = ctx.tok.extent(1), d = ctx.tok.extent(2);
  Tensor gtok(ctx.tok.shape());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < t; ++i)
      for (std::int64_t j = 0; j < d; ++j)
        gtok.at(b, i, j) = l1.gx.at(b, j) / static_cast<double>(t);
  return gtok;
}

GatedStreams gate_streams(const Tensor& tok_high, const Tensor& tok_low, const ParamStore& ps,
                          GateStreamsCtx* ctx) {
  StreamGateCtx hc, lc;
  Tensor gh = stream_gate(tok_high, ps, "high", &hc);
  Tensor gl = stream_gate(tok_low, ps, "low", &lc);
  GatedStreams out;
  out.high = scale_per_item(tok_high, gh);
  out.low = scale_per_item(tok_low, gl);
  out.gate_high = gh;
  out.gate_low = gl;
  if (ctx) {
    ctx->high = std::move(hc);
    ctx->low = std::move(lc);
    ctx->gate_high = std::move(gh);
    ctx->gate_low = std::move(gl);
  }
  return out;
}

GateStreamsGrads gate_streams_vjp(const GateStreamsCtx& ctx, const ParamStore& ps,
                                  const Tensor& gy_high, const Tensor& gy_low,
                                  const Tensor& extra_ggate_high, const Tensor& extra_ggate_low,
                                  GradStore& gs) {
  auto one_stream = [&](const StreamGateCtx& sc, const Tensor& gate, const Tensor& gy,
                        const Tensor& extra, const std::string& name) {
    require_same_shape(sc.tok, gy, "gate_streams cotangent");
    const std::int64_t n = sc.tok.extent(0), per = sc.tok.size() / sc.tok.extent(0);
    Tensor ggate({n, std::int64_t{1}});
    for (std::int64_t b = 0; b < n; ++b) {
      double acc = extra.empty() ? 0.0 : extra[b];
      for (std::int64_t i = 0; i < per; ++i) acc += sc.tok[b * per + i] * gy[b * per + i];
      ggate[b] = acc;
    }
    Tensor gtok = scale_per_item(gy, gate);
    Tensor gpool = stream_gate_vjp(sc, ps, name, ggate, gs);
    return add(gtok, gpool);
  };
  GateStreamsGrads out;
  out.gtok_high = one_stream(ctx.high, ctx.gate_high, gy_high, extra_ggate_high, "high");
  out.gtok_low = one_stream(ctx.low, ctx.gate_low, gy_low, extra_ggate_low, "low");
  return out;
}

SelectedQueries select_queries(const Tensor& tok_high, const Tensor& tok_low,
                               const ParamStore& ps, std::int64_t k, SelectCtx* ctx) {
  check_tokens(tok_high, "select_queries");
  check_tokens(tok_low, "select_queries");
  if (tok_high.extent(0) != tok_low.extent(0) || tok_high.extent(2) != tok_low.extent(2))
    raise(ErrorCode::Shape, "select_queries streams disagree: " + shape_str(tok_high.shape()) +
                                " vs " + shape_str(tok_low.shape()));
  Tensor cat = concat({tok_high, tok_low}, 1);
  const std::int64_t n = cat.extent(0), t = cat.extent(1), d = cat.extent(2);
  if (k < 1) raise(ErrorCode::Config, "query count must be positive");
  if (k > t)
    raise(ErrorCode::Config, "query count " + std::to_string(k) + " exceeds token count " +
                                 std::to_string(t));
  Tensor scores = linear(cat, ps.get("fqs.score.w"), Tensor()).reshaped({n, t});
  std::vector<std::int64_t> picked(static_cast<std::size_t>(n * k));
  std::vector<std::int64_t> order(static_cast<std::size_t>(t));
  for (std::int64_t b = 0; b < n; ++b) {
    std::iota(order.begin(), order.end(), std::int64_t{0});
    std::sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t c) {
      const double sa = scores.at(b, a), sc = scores.at(b, c);
      if (sa != sc) return sa > sc;
      return a < c;  // ties to the lower flat index
    });
    for (std::int64_t q = 0; q < k; ++q)
      picked[static_cast<std::size_t>(b * k + q)] = order[static_cast<std::size_t>(q)];
  }
  Tensor z({n, k, d});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t q = 0; q < k; ++q) {
      const std::int64_t row = picked[static_cast<std::size_t>(b * k + q)];
      for (std::int64_t j = 0; j < d; ++j) z.at(b, q, j) = cat.at(b, row, j);
    }
  Tensor box_pre = linear(z, ps.get("fqs.box.w"), ps.get("fqs.box.b"));
  Tensor logits = clamp_logits(box_pre);
  if (ctx) {
    ctx->cat = std::move(cat);
    ctx->scores = std::move(scores);
    ctx->picked = picked;
    ctx->z = z;
    ctx->box_pre = std::move(box_pre);
    ctx->t_high = tok_high.extent(1);
  }
  return {std::move(z), std::move(logits), std::move(picked)};
}

SelectGrads select_queries_vjp(const SelectCtx& ctx, const ParamStore& ps, const Tensor& gz,
                               const Tensor& glogits, GradStore& gs) {
  const std::int64_t n = ctx.cat.extent(0), t = ctx.cat.extent(1), d = ctx.cat.extent(2);
  const std::int64_t k = static_cast<std::int64_t>(ctx.picked.size()) / n;
  Tensor gbox = clamp_logits_vjp(ctx.box_pre, glogits);
  LinearGrads lb = linear_vjp(ctx.z, ps.get("fqs.box.w"), ps.get("fqs.box.b"), gbox);
  gs.accumulate("fqs.box.w", lb.gw);
  gs.accumulate("fqs.box.b", lb.gb);
  Tensor gz_total = add(gz, lb.gx);
  // Selection is discrete, so the score map carries no gradient; the content
  // rows scatter back to their source tokens.
  Tensor gcat({n, t, d});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t q = 0; q < k; ++q) {
      const std::int64_t row = ctx.picked[static_cast<std::size_t>(b * k + q)];
      for (std::int64_t j = 0; j < d; ++j) gcat.at(b, row, j) += gz_total.at(b, q, j);
    }
  std::vector<Tensor> parts = split(gcat, 1, {ctx.t_high, t - ctx.t_high});
  return {std::move(parts[0]), std::move(parts[1])};
}

Tensor positional_query(const Tensor& anchors, const ParamStore& ps, PosCtx* ctx) {
  if (anchors.rank() != 3 || anchors.extent(2) != 4)
    raise(ErrorCode::Shape, "positional_query expects [N,Q,4], got " + shape_str(anchors.shape()));
  Tensor pre1 = linear(anchors, ps.get("fqs.pos.w1"), ps.get("fqs.pos.b1"));
  Tensor hidden = relu(pre1);
  Tensor p = linear(hidden, ps.get("fqs.pos.w2"), ps.get("fqs.pos.b2"));
  if (ctx) {
    ctx->anchors = anchors;
    ctx->pre1 = std::move(pre1);
    ctx->hidden = std::move(hidden);
  }
  return p;
}

Tensor positional_query_vjp(const PosCtx& ctx, const ParamStore& ps, const Tensor& gy,
                            GradStore& gs) {
  LinearGrads l2 = linear_vjp(ctx.hidden, ps.get("fqs.pos.w2"), ps.get("fqs.pos.b2"), gy);
  gs.accumulate("fqs.pos.w2", l2.gw);
  gs.accumulate("fqs.pos.b2", l2.gb);
  Tensor gpre1 = relu_vjp(ctx.pre1, l2.gx);
  LinearGrads l1 = linear_vjp(ctx.anchors, ps.get("fqs.pos.w1"), ps.get("fqs.pos.b1"), gpre1);
  gs.accumulate("fqs.pos.w1", l1.gw);
  gs.accumulate("fqs.pos.b1", l1.gb);
  return l1.gx;
}

Tensor decoder_self_attention(const Tensor& z, const Tensor& p, const ParamStore& ps,
                              const std::string& prefix, const FqsConfig& cfg, SelfAttnCtx* ctx) {
  cfg.validate();
  check_tokens(z, "decoder_self_attention");
  require_same_shape(z, p, "decoder_self_attention positional");
  if (z.extent(2) != cfg.d)
    raise(ErrorCode::Shape, "decoder_self_attention content width " +
                                std::to_string(z.extent(2)) + " != configured " +
                                std::to_string(cfg.d));
  const std::int64_t dh = cfg.d / cfg.heads;
  const std::vector<std::int64_t> parts(static_cast<std::size_t>(cfg.heads), dh);
  Tensor qk = add(z, p);
  Tensor q = linear(qk, ps.get(prefix + "wq"), Tensor());
  Tensor k = linear(qk, ps.get(prefix + "wk"), Tensor());
  Tensor v = linear(z, ps.get(prefix + "wv"), Tensor());
  std::vector<Tensor> qh = split(q, 2, parts);
  std::vector<Tensor> kh = split(k, 2, parts);
  std::vector<Tensor> vh = split(v, 2, parts);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> scores, attn, mixed_h;
  for (int m = 0; m < cfg.heads; ++m) {
    const auto mi = static_cast<std::size_t>(m);
    Tensor s = scale(matmul(qh[mi], transpose_last2(kh[mi])), sc);
    Tensor a = softmax(s, 2);
    mixed_h.push_back(matmul(a, vh[mi]));
    scores.push_back(std::move(s));
    attn.push_back(std::move(a));
  }
  Tensor mixed = concat(mixed_h, 2);
  Tensor res = add(z, linear(mixed, ps.get(prefix + "wo"), Tensor()));
  Tensor y = layer_norm(res, ps.get(prefix + "ln.g"), ps.get(prefix + "ln.b"));
  if (ctx) {
    ctx->z = z;
    ctx->p = p;
    ctx->qk = std::move(qk);
    ctx->q = std::move(q);
    ctx->k = std::move(k);
    ctx->v = std::move(v);
    ctx->scores = std::move(scores);
    ctx->attn = std::move(attn);
    ctx->mixed = std::move(mixed);
    ctx->res = std::move(res);
  }
  return y;
}

Tensor decoder_self_attention_vjp(const SelfAttnCtx& ctx, const ParamStore& ps,
                                  const std::string& prefix, const FqsConfig& cfg,
                                  const Tensor& gy, GradStore& gs, Tensor* gp) {
  const std::int64_t dh = cfg.d / cfg.heads;
  const std::vector<std::int64_t> parts(static_cast<std::size_t>(cfg.heads), dh);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  LayerNormGrads ln =
      layer_norm_vjp(ctx.res, ps.get(prefix + "ln.g"), ps.get(prefix + "ln.b"), gy);
  gs.accumulate(prefix + "ln.g", ln.ggamma);
  gs.accumulate(prefix + "ln.b", ln.gbeta);
  LinearGrads lo = linear_vjp(ctx.mixed, ps.get(prefix + "wo"), Tensor(), ln.gx);
  gs.accumulate(prefix + "wo", lo.gw);
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
    MatmulGrads qkg = matmul_vjp(qh[mi], transpose_last2(kh[mi]), gscores);
    gqh.push_back(std::move(qkg.ga));
    gkh.push_back(transpose_last2(qkg.gb));
  }
  LinearGrads lq = linear_vjp(ctx.qk, ps.get(prefix + "wq"), Tensor(), concat(gqh, 2));
  LinearGrads lk = linear_vjp(ctx.qk, ps.get(prefix + "wk"), Tensor(), concat(gkh, 2));
  LinearGrads lv = linear_vjp(ctx.z, ps.get(prefix + "wv"), Tensor(), concat(gvh, 2));
  gs.accumulate(prefix + "wq", lq.gw);
  gs.accumulate(prefix + "wk", lk.gw);
  gs.accumulate(prefix + "wv", lv.gw);
  Tensor gqk = add(lq.gx, lk.gx);
  if (gp) *gp = gqk;
  return add(ln.gx, add(gqk, lv.gx));  // residual + q/k path + v path
}

Tensor faca(const Tensor& z, const Tensor& centers, const Pyramid& low, const Pyramid& high,
            const ParamStore& ps, const std::string& prefix, const FqsConfig& cfg, FacaCtx* ctx) {
  cfg.validate();
  check_tokens(z, "faca");
  if (centers.rank() != 3 || centers.extent(2) != 2 || centers.extent(0) != z.extent(0) ||
      centers.extent(1) != z.extent(1))
    raise(ErrorCode::Shape, "faca centers must be [N,Q,2] matching the queries, got " +
                                shape_str(centers.shape()));
  const std::int64_t n = z.extent(0), nq = z.extent(1);
  const int m_heads = cfg.heads, ks = cfg.points;
  const std::int64_t slots = 2 * kFqsLevels * ks;
  const std::int64_t dh = cfg.d / m_heads;
  const Pyramid* streams[2] = {&low, &high};
  std::array<const Tensor*, 6> maps{};
  for (int s = 0; s < 2; ++s)
    for (int i = 0; i < kFqsLevels; ++i) {
      const Tensor* map = pyramid_level(*streams[s], i);
      if (map->rank() != 4 || map->extent(0) != n || map->extent(1) != cfg.ce)
        raise(ErrorCode::Shape, "faca level map must be [N," + std::to_string(cfg.ce) +
                                    ",H,W], got " + shape_str(map->shape()));
      maps[static_cast<std::size_t>(s * kFqsLevels + i)] = map;
    }
  Tensor off = linear(z, ps.get(prefix + "off.w"), ps.get(prefix + "off.b"));
  Tensor att_pre =
      linear(z, ps.get(prefix + "att.w"), ps.get(prefix + "att.b"))
          .reshaped({n, nq, m_heads, slots});
  Tensor attn = softmax(att_pre, 3);
  std::array<Tensor, 6> pts, feats, vals;
  for (int s = 0; s < 2; ++s)
    for (int i = 0; i < kFqsLevels; ++i) {
      const auto mi = static_cast<std::size_t>(s * kFqsLevels + i);
      const Tensor& map = *maps[mi];
      const double wext = static_cast<double>(map.extent(3));
      const double hext = static_cast<double>(map.extent(2));
      Tensor pt({n, nq, static_cast<std::int64_t>(m_heads) * ks, 2});
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t q = 0; q < nq; ++q)
          for (int m = 0; m < m_heads; ++m)
            for (int k = 0; k < ks; ++k) {
              const std::int64_t slot = (static_cast<std::int64_t>(s) * kFqsLevels + i) * ks + k;
              const std::int64_t col = (m * slots + slot) * 2;
              pt.at(b, q, static_cast<std::int64_t>(m) * ks + k, 0) =
                  centers.at(b, q, 0) + off.at(b, q, col) / wext;
              pt.at(b, q, static_cast<std::int64_t>(m) * ks + k, 1) =
                  centers.at(b, q, 1) + off.at(b, q, col + 1) / hext;
            }
      feats[mi] = bilinear_sample(map, pt);
      vals[mi] = linear(feats[mi], ps.get(prefix + "val.w"), Tensor());
      pts[mi] = std::move(pt);
    }
  Tensor head_sum({n, nq, cfg.d});
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t q = 0; q < nq; ++q)
      for (int m = 0; m < m_heads; ++m)
        for (std::int64_t dloc = 0; dloc < dh; ++dloc) {
          const std::int64_t col = m * dh + dloc;
          double acc = 0.0;
          for (int s = 0; s < 2; ++s)
            for (int i = 0; i < kFqsLevels; ++i)
              for (int k = 0; k < ks; ++k) {
                const std::int64_t slot = (static_cast<std::int64_t>(s) * kFqsLevels + i) * ks + k;
                acc += attn.at(b, q, m, slot) *
                       vals[static_cast<std::size_t>(s * kFqsLevels + i)].at(
                           b, q, static_cast<std::int64_t>(m) * ks + k, col);
              }
          head_sum.at(b, q, col) = acc;
        }
  Tensor y = linear(head_sum, ps.get(prefix + "out.w"), Tensor());
  if (ctx) {
    ctx->z = z;
    ctx->centers = centers;
    ctx->off = std::move(off);
    ctx->att_pre = std::move(att_pre);
    ctx->attn = std::move(attn);
    ctx->pts = std::move(pts);
    ctx->feats = std::move(feats);
    ctx->vals = std::move(vals);
    for (std::size_t i = 0; i < 6; ++i) ctx->maps[i] = *maps[i];
    ctx->head_sum = std::move(head_sum);
  }
  return y;
}

FacaGrads faca_vjp(const FacaCtx& ctx, const ParamStore& ps, const std::string& prefix,
                   const FqsConfig& cfg, const Tensor& gy, GradStore& gs) {
  const std::int64_t n = ctx.z.extent(0), nq = ctx.z.extent(1);
  const int m_heads = cfg.heads, ks = cfg.points;
  const std::int64_t slots = 2 * kFqsLevels * ks;
  const std::int64_t dh = cfg.d / m_heads;
  LinearGrads lo = linear_vjp(ctx.head_sum, ps.get(prefix + "out.w"), Tensor(), gy);
  gs.accumulate(prefix + "out.w", lo.gw);
  const Tensor& ghead = lo.gx;
  Tensor gattn(ctx.attn.shape());
  std::array<Tensor, 6> gvals;
  for (std::size_t i = 0; i < 6; ++i) gvals[i] = Tensor(ctx.vals[i].shape());
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t q = 0; q < nq; ++q)
      for (int m = 0; m < m_heads; ++m)
        for (int s = 0; s < 2; ++s)
          for (int i = 0; i < kFqsLevels; ++i)
            for (int k = 0; k < ks; ++k) {
              const auto mi = static_cast<std::size_t>(s * kFqsLevels + i);
              const std::int64_t slot = (static_cast<std::int64_t>(s) * kFqsLevels + i) * ks + k;
              const std::int64_t row = static_cast<std::int64_t>(m) * ks + k;
              double acc = 0.0;
              for (std::int64_t dloc = 0; dloc < dh; ++dloc) {
                const std::int64_t col = m * dh + dloc;
                const double gv = ghead.at(b, q, col);
                acc += gv * ctx.vals[mi].at(b, q, row, col);
                gvals[mi].at(b, q, row, col) += ctx.attn.at(b, q, m, slot) * gv;
              }
              gattn.at(b, q, m, slot) += acc;
            }
  Tensor gatt_flat = softmax_vjp(ctx.att_pre, 3, gattn).reshaped({n, nq, m_heads * slots});
  LinearGrads la = linear_vjp(ctx.z, ps.get(prefix + "att.w"), ps.get(prefix + "att.b"), gatt_flat);
  gs.accumulate(prefix + "att.w", la.gw);
  gs.accumulate(prefix + "att.b", la.gb);
  Tensor goff(ctx.off.shape());
  FacaGrads out;
  out.gcenters = Tensor(ctx.centers.shape());
  std::array<Tensor, 6> gmaps;
  for (int s = 0; s < 2; ++s)
    for (int i = 0; i < kFqsLevels; ++i) {
      const auto mi = static_cast<std::size_t>(s * kFqsLevels + i);
      LinearGrads lv = linear_vjp(ctx.feats[mi], ps.get(prefix + "val.w"), Tensor(), gvals[mi]);
      gs.accumulate(prefix + "val.w", lv.gw);
      BilinearGrads bg = bilinear_sample_vjp(ctx.maps[mi], ctx.pts[mi], lv.gx);
      gmaps[mi] = std::move(bg.gx);
      const double wext = static_cast<double>(ctx.maps[mi].extent(3));
      const double hext = static_cast<double>(ctx.maps[mi].extent(2));
      for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t q = 0; q < nq; ++q)
          for (int m = 0; m < m_heads; ++m)
            for (int k = 0; k < ks; ++k) {
              const std::int64_t slot = (static_cast<std::int64_t>(s) * kFqsLevels + i) * ks + k;
              const std::int64_t col = (m * slots + slot) * 2;
              const std::int64_t row = static_cast<std::int64_t>(m) * ks + k;
              const double gpx = bg.gpoints.at(b, q, row, 0);
              const double gpy = bg.gpoints.at(b, q, row, 1);
              out.gcenters.at(b, q, 0) += gpx;
              out.gcenters.at(b, q, 1) += gpy;
              goff.at(b, q, col) += gpx / wext;
              goff.at(b, q, col + 1) += gpy / hext;
            }
    }
  LinearGrads lof = linear_vjp(ctx.z, ps.get(prefix + "off.w"), ps.get(prefix + "off.b"), goff);
  gs.accumulate(prefix + "off.w", lof.gw);
  gs.accumulate(prefix + "off.b", lof.gb);
  out.gz = add(la.gx, lof.gx);
  out.glow = {gmaps[0], gmaps[1], gmaps[2]};
  out.ghigh = {gmaps[3], gmaps[4], gmaps[5]};
  return out;
}

DecodeOutputs decode(const Tensor& z0, const Tensor& anchor_logits0, const Pyramid& low,
                     const Pyramid& high, const ParamStore& ps, const FqsConfig& cfg,
                     DecodeCtx* ctx) {
  cfg.validate();
  check_tokens(z0, "decode");
  if (anchor_logits0.rank() != 3 || anchor_logits0.extent(2) != 4 ||
      anchor_logits0.extent(0) != z0.extent(0) || anchor_logits0.extent(1) != z0.extent(1))
    raise(ErrorCode::Shape, "decode anchors must be [N,Q,4] matching the queries, got " +
                                shape_str(anchor_logits0.shape()));
  const std::int64_t n = z0.extent(0), nq = z0.extent(1);
  if (ctx) ctx->layers.assign(static_cast<std::size_t>(cfg.layers), DecodeLayerCtx{});
  Tensor z = z0, logits = anchor_logits0;
  for (int l = 0; l < cfg.layers; ++l) {
    DecodeLayerCtx* lc = ctx ? &ctx->layers[static_cast<std::size_t>(l)] : nullptr;
    const std::string pre = layer_prefix(l);
    Tensor anchors = sigmoid(logits);
    Tensor p = positional_query(anchors, ps, lc ? &lc->pos : nullptr);
    Tensor z_sa = decoder_self_attention(z, p, ps, pre + "sa.", cfg, lc ? &lc->sa : nullptr);
    Tensor centers({n, nq, 2});
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t q = 0; q < nq; ++q) {
        centers.at(b, q, 0) = anchors.at(b, q, 0);
        centers.at(b, q, 1) = anchors.at(b, q, 1);
      }
    Tensor f = faca(z_sa, centers, low, high, ps, pre + "faca.", cfg, lc ? &lc->cross : nullptr);
    Tensor cross_res = add(z_sa, f);
    Tensor z_cross = layer_norm(cross_res, ps.get(pre + "faca.ln.g"), ps.get(pre + "faca.ln.b"));
    Tensor ffn_pre1 = linear(z_cross, ps.get(pre + "ffn.w1"), ps.get(pre + "ffn.b1"));
    Tensor ffn_hidden = relu(ffn_pre1);
    Tensor ffn_out = linear(ffn_hidden, ps.get(pre + "ffn.w2"), ps.get(pre + "ffn.b2"));
    Tensor ffn_res = add(z_cross, ffn_out);
    Tensor z_out = layer_norm(ffn_res, ps.get(pre + "ffn.ln.g"), ps.get(pre + "ffn.ln.b"));
    Tensor delta = linear(z_out, ps.get(pre + "ref.w"), ps.get(pre + "ref.b"));
    Tensor logits_sum = add(logits, delta);
    Tensor logits_next = clamp_logits(logits_sum);
    if (lc) {
      lc->z_in = std::move(z);
      lc->logits_in = std::move(logits);
      lc->anchors = std::move(anchors);
      lc->p = std::move(p);
      lc->z_sa = z_sa;
      lc->cross_res = std::move(cross_res);
      lc->z_cross = std::move(z_cross);
      lc->ffn_pre1 = std::move(ffn_pre1);
      lc->ffn_hidden = std::move(ffn_hidden);
      lc->ffn_res = std::move(ffn_res);
      lc->z_out = z_out;
      lc->logits_sum = std::move(logits_sum);
    }
    z = std::move(z_out);
    logits = std::move(logits_next);
  }
  return {std::move(z), std::move(logits)};
}

DecodeGrads decode_backward(const DecodeCtx& ctx, const ParamStore& ps, const FqsConfig& cfg,
                            const Tensor& gz_final, const Tensor& glogits_final, GradStore& gs) {
  if (ctx.layers.empty()) raise(ErrorCode::Argument, "decode_backward needs a populated context");
  DecodeGrads out;
  Tensor gz = gz_final, glogits = glogits_final;
  bool maps_init = false;
  for (int l = static_cast<int>(ctx.layers.size()) - 1; l >= 0; --l) {
    const DecodeLayerCtx& lc = ctx.layers[static_cast<std::size_t>(l)];
    const std::string pre = layer_prefix(l);
    const std::int64_t n = lc.z_in.extent(0), nq = lc.z_in.extent(1);
    Tensor gsum = clamp_logits_vjp(lc.logits_sum, glogits);
    LinearGrads lref = linear_vjp(lc.z_out, ps.get(pre + "ref.w"), ps.get(pre + "ref.b"), gsum);
    gs.accumulate(pre + "ref.w", lref.gw);
    gs.accumulate(pre + "ref.b", lref.gb);
    Tensor gz_out = add(gz, lref.gx);
    LayerNormGrads ln2 =
        layer_norm_vjp(lc.ffn_res, ps.get(pre + "ffn.ln.g"), ps.get(pre + "ffn.ln.b"), gz_out);
    gs.accumulate(pre + "ffn.ln.g", ln2.ggamma);
    gs.accumulate(pre + "ffn.ln.b", ln2.gbeta);
    LinearGrads l2 = linear_vjp(lc.ffn_hidden, ps.get(pre + "ffn.w2"), ps.get(pre + "ffn.b2"),
                                ln2.gx);
    gs.accumulate(pre + "ffn.w2", l2.gw);
    gs.accumulate(pre + "ffn.b2", l2.gb);
    Tensor gpre1 = relu_vjp(lc.ffn_pre1, l2.gx);
    LinearGrads l1 = linear_vjp(lc.z_cross, ps.get(pre + "ffn.w1"), ps.get(pre + "ffn.b1"), gpre1);
    gs.accumulate(pre + "ffn.w1", l1.gw);
    gs.accumulate(pre + "ffn.b1", l1.gb);
    Tensor gz_cross = add(ln2.gx, l1.gx);
    LayerNormGrads lnc = layer_norm_vjp(lc.cross_res, ps.get(pre + "faca.ln.g"),
                                        ps.get(pre + "faca.ln.b"), gz_cross);
    gs.accumulate(pre + "faca.ln.g", lnc.ggamma);
    gs.accumulate(pre + "faca.ln.b", lnc.gbeta);
    FacaGrads fg = faca_vjp(lc.cross, ps, pre + "faca.", cfg, lnc.gx, gs);
    if (!maps_init) {
      out.glow = fg.glow;
      out.ghigh = fg.ghigh;
      maps_init = true;
    } else {
      out.glow.l3 = add(out.glow.l3, fg.glow.l3);
      out.glow.l4 = add(out.glow.l4, fg.glow.l4);
      out.glow.l5 = add(out.glow.l5, fg.glow.l5);
      out.ghigh.l3 = add(out.ghigh.l3, fg.ghigh.l3);
      out.ghigh.l4 = add(out.ghigh.l4, fg.ghigh.l4);
      out.ghigh.l5 = add(out.ghigh.l5, fg.ghigh.l5);
    }
    Tensor gz_sa = add(lnc.gx, fg.gz);
    Tensor gp;
    Tensor gz_in = decoder_self_attention_vjp(lc.sa, ps, pre + "sa.", cfg, gz_sa, gs, &gp);
    Tensor ganchors = positional_query_vjp(lc.pos, ps, gp, gs);
    for (std::int64_t b = 0; b < n; ++b)
      for (std::int64_t q = 0; q < nq; ++q) {
        ganchors.at(b, q, 0) += fg.gcenters.at(b, q, 0);
        ganchors.at(b, q, 1) += fg.gcenters.at(b, q, 1);
      }
    glogits = add(gsum, sigmoid_vjp(lc.logits_in, ganchors));
    gz = std::move(gz_in);
  }
  out.gz0 = std::move(gz);
  out.glogits0 = std::move(glogits);
  return out;
}

FqsOutputs fqs_run(const Pyramid& high, const Pyramid& low, const ParamStore& ps,
                   const FqsConfig& cfg, FqsCtx* ctx) {
  cfg.validate();
  const Pyramid* streams[2] = {&low, &high};
  std::array<Tensor, 6> level_tok;
  std::array<std::int64_t, 6> level_h{}, level_w{};
  Tensor tok_stream[2];
  for (int s = 0; s < 2; ++s) {
    const std::string name = s == 0 ? "low" : "high";
    const Tensor& tokw = ps.get("fqs.tok." + name + ".w");
    std::vector<Tensor> parts;
    for (int i = 0; i < kFqsLevels; ++i) {
      const Tensor& map = *pyramid_level(*streams[s], i);
      if (map.rank() != 4 || map.extent(1) != cfg.ce)
        raise(ErrorCode::Shape, "fqs level map must be [N," + std::to_string(cfg.ce) +
                                    ",H,W], got " + shape_str(map.shape()));
      const auto mi = static_cast<std::size_t>(s * kFqsLevels + i);
      level_h[mi] = map.extent(2);
      level_w[mi] = map.extent(3);
      level_tok[mi] = nchw_to_tokens(map);
      parts.push_back(linear(level_tok[mi], tokw, Tensor()));
    }
    tok_stream[s] = concat(parts, 1);
  }
  GateStreamsCtx gate_ctx;
  GatedStreams gated = gate_streams(tok_stream[1], tok_stream[0], ps, ctx ? &gate_ctx : nullptr);
  Pyramid gated_low{scale_per_item(low.l3, gated.gate_low),
                    scale_per_item(low.l4, gated.gate_low),
                    scale_per_item(low.l5, gated.gate_low)};
  Pyramid gated_high{scale_per_item(high.l3, gated.gate_high),
                     scale_per_item(high.l4, gated.gate_high),
                     scale_per_item(high.l5, gated.gate_high)};
  SelectedQueries sel =
      select_queries(gated.high, gated.low, ps, cfg.queries, ctx ? &ctx->sel : nullptr);
  DecodeOutputs dec = decode(sel.z, sel.anchor_logits, gated_low, gated_high, ps, cfg,
                             ctx ? &ctx->dec : nullptr);
  if (ctx) {
    for (int s = 0; s < 2; ++s)
      for (int i = 0; i < kFqsLevels; ++i) {
        const auto mi = static_cast<std::size_t>(s * kFqsLevels + i);
        ctx->raw_maps[mi] = *pyramid_level(*streams[s], i);
      }
    ctx->level_h = level_h;
    ctx->level_w = level_w;
    ctx->level_tok = std::move(level_tok);
    ctx->tok_high = std::move(tok_stream[1]);
    ctx->tok_low = std::move(tok_stream[0]);
    ctx->gate = std::move(gate_ctx);
    ctx->gated_high = std::move(gated.high);
    ctx->gated_low = std::move(gated.low);
  }
  return {std::move(dec.z), std::move(dec.anchor_logits), std::move(gated.gate_high),
          std::move(gated.gate_low)};
}

FqsGrads fqs_backward(const FqsCtx& ctx, const ParamStore& ps, const FqsConfig& cfg,
                      const Tensor& gz, const Tensor& glogits, GradStore& gs) {
  DecodeGrads dg = decode_backward(ctx.dec, ps, cfg, gz, glogits, gs);
  SelectGrads sg = select_queries_vjp(ctx.sel, ps, dg.gz0, dg.glogits0, gs);
  // The decoder saw gated pyramids: split its map cotangents between the raw
  // maps and the gate scalars before walking back through the gate MLPs.
  const Tensor* ggated[6] = {&dg.glow.l3,  &dg.glow.l4,  &dg.glow.l5,
                             &dg.ghigh.l3, &dg.ghigh.l4, &dg.ghigh.l5};
  const Tensor* gates[2] = {&ctx.gate.gate_low, &ctx.gate.gate_high};
  std::array<Tensor, 6> graw;
  const std::int64_t n = ctx.raw_maps[0].extent(0);
  Tensor extra_low({n, std::int64_t{1}}), extra_high({n, std::int64_t{1}});
  Tensor* extras[2] = {&extra_low, &extra_high};
  for (int s = 0; s < 2; ++s)
    for (int i = 0; i < kFqsLevels; ++i) {
      const auto mi = static_cast<std::size_t>(s * kFqsLevels + i);
      graw[mi] = scale_per_item(*ggated[mi], *gates[s]);
      const Tensor& raw = ctx.raw_maps[mi];
      const std::int64_t per = raw.size() / n;
      for (std::int64_t b = 0; b < n; ++b) {
        double acc = 0.0;
        for (std::int64_t e = 0; e < per; ++e)
          acc += raw[b * per + e] * (*ggated[mi])[b * per + e];
        (*extras[s])[b] += acc;
      }
    }
  GateStreamsGrads gg =
      gate_streams_vjp(ctx.gate, ps, sg.gtok_high, sg.gtok_low, extra_high, extra_low, gs);
  const Tensor* gtok_stream[2] = {&gg.gtok_low, &gg.gtok_high};
  for (int s = 0; s < 2; ++s) {
    const std::string name = s == 0 ? "low" : "high";
    const Tensor& tokw = ps.get("fqs.tok." + name + ".w");
    std::vector<std::int64_t> extents;
    for (int i = 0; i < kFqsLevels; ++i) {
      const auto mi = static_cast<std::size_t>(s * kFqsLevels + i);
      extents.push_back(ctx.level_h[mi] * ctx.level_w[mi]);
    }
    std::vector<Tensor> parts = split(*gtok_stream[s], 1, extents);
    for (int i = 0; i < kFqsLevels; ++i) {
      const auto mi = static_cast<std::size_t>(s * kFqsLevels + i);
      LinearGrads lt = linear_vjp(ctx.level_tok[mi], tokw, Tensor(),
                                  parts[static_cast<std::size_t>(i)]);
      gs.accumulate("fqs.tok." + name + ".w", lt.gw);
      graw[mi] = add(graw[mi], tokens_to_nchw(lt.gx, ctx.level_h[mi], ctx.level_w[mi]));
    }
  }
  return {{graw[3], graw[4], graw[5]}, {graw[0], graw[1], graw[2]}};
}

}  // namespace wdfq
