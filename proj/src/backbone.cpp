#include "wdfq/backbone.hpp"

namespace wdfq {

namespace {

const Conv2dSpec kDown{2, 1, 1, 1, false};   // 3x3 stride-2 halver
const Conv2dSpec kSame{1, 1, 1, 1, false};   // 3x3 shape-preserving

Tensor conv_act_fwd(const Tensor& x, const Tensor& w, const Tensor& b, const Conv2dSpec& s,
                    ConvActCtx* ctx) {
  Tensor pre = bias_add_channels(conv2d(x, w, s), b);
  Tensor y = relu(pre);
  if (ctx) {
    ctx->x = x;
    ctx->pre = std::move(pre);
  }
  return y;
}

Tensor conv_act_bwd(const ConvActCtx& ctx, const Tensor& w, const Conv2dSpec& s,
                    const Tensor& gy, const std::string& prefix, GradStore& gs) {
  Tensor gpre = relu_vjp(ctx.pre, gy);
  gs.accumulate(prefix + ".b", bias_add_channels_vjp(ctx.pre, gpre));
  Conv2dGrads cg = conv2d_vjp(ctx.x, w, s, gpre);
  gs.accumulate(prefix + ".w", cg.gw);
  return std::move(cg.gx);
}

Tensor res_block_fwd(const Tensor& x, const Tensor& w, const Tensor& b, ResBlockCtx* ctx) {
  Tensor pre = bias_add_channels(conv2d(x, w, kSame), b);
  Tensor y = add(x, relu(pre));
  if (ctx) {
    ctx->x = x;
    ctx->pre = std::move(pre);
  }
  return y;
}

Tensor res_block_bwd(const ResBlockCtx& ctx, const Tensor& w, const Tensor& gy,
                     const std::string& prefix, GradStore& gs) {
  Tensor gpre = relu_vjp(ctx.pre, gy);
  gs.accumulate(prefix + ".b", bias_add_channels_vjp(ctx.pre, gpre));
  Conv2dGrads cg = conv2d_vjp(ctx.x, w, kSame, gpre);
  gs.accumulate(prefix + ".w", cg.gw);
  return add(gy, cg.gx);
}

Tensor stage_fwd(const Tensor& x, const ParamStore& ps, const std::string& prefix, int blocks,
                 StageCtx* ctx) {
  Tensor y = conv_act_fwd(x, ps.get(prefix + ".down.w"), ps.get(prefix + ".down.b"), kDown,
                          ctx ? &ctx->down : nullptr);
  if (ctx) ctx->blocks.resize(static_cast<std::size_t>(blocks));
  for (int j = 0; j < blocks; ++j)
    y = res_block_fwd(y, ps.get(prefix + ".blk" + std::to_string(j) + ".w"),
                      ps.get(prefix + ".blk" + std::to_string(j) + ".b"),
                      ctx ? &ctx->blocks[static_cast<std::size_t>(j)] : nullptr);
  return y;
}

Tensor stage_bwd(const StageCtx& ctx, const ParamStore& ps, const std::string& prefix,
                 const Tensor& gy, GradStore& gs) {
  Tensor g = gy;
  for (int j = static_cast<int>(ctx.blocks.size()) - 1; j >= 0; --j) {
    const std::string bp = prefix + ".blk" + std::to_string(j);
    g = res_block_bwd(ctx.blocks[static_cast<std::size_t>(j)], ps.get(bp + ".w"), g, bp, gs);
  }
  return conv_act_bwd(ctx.down, ps.get(prefix + ".down.w"), kDown, g, prefix + ".down", gs);
}

}  // namespace

void BackboneConfig::validate() const {
  if (c0 < 1 || c3 < 1 || c4 < 1 || c5 < 1 || blocks < 0)
    raise(ErrorCode::Config, "backbone channel counts must be positive");
  if (!(c3 < c4 && c4 < c5))
    raise(ErrorCode::Config, "backbone channels must satisfy c3 < c4 < c5");
}

void backbone_register(ParamStore& ps, const BackboneConfig& cfg) {
  cfg.validate();
  const auto stage = [&](const std::string& prefix, std::int64_t cin, std::int64_t cout) {
    ps.create(prefix + ".down.w", {cout, cin, 3, 3}, Init::FanScaledUniform);
    ps.create(prefix + ".down.b", {cout}, Init::Zeros);
    for (int j = 0; j < cfg.blocks; ++j) {
      ps.create(prefix + ".blk" + std::to_string(j) + ".w", {cout, cout, 3, 3},
                Init::FanScaledUniform);
      ps.create(prefix + ".blk" + std::to_string(j) + ".b", {cout}, Init::Zeros);
    }
  };
  ps.create("bb.stem.w", {cfg.c0, 3, 3, 3}, Init::FanScaledUniform);
  ps.create("bb.stem.b", {cfg.c0}, Init::Zeros);
  stage("bb.s2", cfg.c0, cfg.c0);
  stage("bb.s3", cfg.c0, cfg.c3);
  stage("bb.s4", cfg.c3, cfg.c4);
  stage("bb.s5", cfg.c4, cfg.c5);
}

Pyramid backbone_forward(const Tensor& image, const ParamStore& ps, const BackboneConfig& cfg,
                         BackboneCtx* ctx) {
  if (image.rank() != 4 || image.extent(1) != 3)
    raise(ErrorCode::Shape, "backbone expects [N,3,H,W], got " + shape_str(image.shape()));
  if (image.extent(2) % 64 != 0 || image.extent(3) % 64 != 0)
    raise(ErrorCode::Divisibility, "backbone input extents " +
                                       std::to_string(image.extent(2)) + "x" +
                                       std::to_string(image.extent(3)) +
                                       " must be divisible by 64");
  Tensor y = conv_act_fwd(image, ps.get("bb.stem.w"), ps.get("bb.stem.b"), kDown,
                          ctx ? &ctx->stem : nullptr);
  y = stage_fwd(y, ps, "bb.s2", cfg.blocks, ctx ? &ctx->s2 : nullptr);
  Pyramid out;
  out.l3 = stage_fwd(y, ps, "bb.s3", cfg.blocks, ctx ? &ctx->s3 : nullptr);
  out.l4 = stage_fwd(out.l3, ps, "bb.s4", cfg.blocks, ctx ? &ctx->s4 : nullptr);
  out.l5 = stage_fwd(out.l4, ps, "bb.s5", cfg.blocks, ctx ? &ctx->s5 : nullptr);
  return out;
}

void backbone_backward(const BackboneCtx& ctx, const ParamStore& ps, const BackboneConfig& cfg,
                       const Tensor& gl3, const Tensor& gl4, const Tensor& gl5, GradStore& gs,
                       Tensor* gimage) {
  (void)cfg;
  Tensor g4 = add(gl4, stage_bwd(ctx.s5, ps, "bb.s5", gl5, gs));
  Tensor g3 = add(gl3, stage_bwd(ctx.s4, ps, "bb.s4", g4, gs));
  Tensor g2 = stage_bwd(ctx.s3, ps, "bb.s3", g3, gs);
  Tensor g1 = stage_bwd(ctx.s2, ps, "bb.s2", g2, gs);
  Tensor gimg = conv_act_bwd(ctx.stem, ps.get("bb.stem.w"), kDown, g1, "bb.stem", gs);
  if (gimage) *gimage = std::move(gimg);
}

}  // namespace wdfq
