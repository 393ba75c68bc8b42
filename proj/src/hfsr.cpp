#include "wdfq/hfsr.hpp"

#include <cmath>
#include <string>

#include "wdfq/errors.hpp"

namespace wdfq {

namespace {

constexpr double kHogEps = 1e-6;

std::int64_t clampi(std::int64_t v, std::int64_t hi) {
  return v < 0 ? 0 : (v >= hi ? hi - 1 : v);
}

// Adjoints of the Sobel stencils below: scatter each response back through the same
// clamped taps.
Tensor sobel_dx_adjoint(const Tensor& g, std::int64_t d) {
  Tensor out(g.shape());
  const std::int64_t planes = g.extent(0) * g.extent(1);
  const std::int64_t hh = g.extent(2), ww = g.extent(3);
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* src = g.data() + pl * hh * ww;
    double* dst = out.data() + pl * hh * ww;
    for (std::int64_t i = 0; i < hh; ++i)
      for (std::int64_t j = 0; j < ww; ++j) {
        const double gv = src[i * ww + j];
        if (gv == 0.0) continue;
        const std::int64_t jl = clampi(j - d, ww), jr = clampi(j + d, ww);
        for (std::int64_t u = -1; u <= 1; ++u) {
          const std::int64_t r = clampi(i + u * d, hh);
          const double wk = (u == 0 ? 2.0 : 1.0) * gv;
          dst[r * ww + jr] += wk;
          dst[r * ww + jl] -= wk;
        }
      }
  }
  return out;
}

Tensor sobel_dy_adjoint(const Tensor& g, std::int64_t d) {
  Tensor out(g.shape());
  const std::int64_t planes = g.extent(0) * g.extent(1);
  const std::int64_t hh = g.extent(2), ww = g.extent(3);
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* src = g.data() + pl * hh * ww;
    double* dst = out.data() + pl * hh * ww;
    for (std::int64_t i = 0; i < hh; ++i) {
      const std::int64_t it = clampi(i - d, hh), ib = clampi(i + d, hh);
      for (std::int64_t j = 0; j < ww; ++j) {
        const double gv = src[i * ww + j];
        if (gv == 0.0) continue;
        for (std::int64_t u = -1; u <= 1; ++u) {
          const std::int64_t c = clampi(j + u * d, ww);
          const double wk = (u == 0 ? 2.0 : 1.0) * gv;
          dst[ib * ww + c] += wk;
          dst[it * ww + c] -= wk;
        }
      }
    }
  }
  return out;
}

// Sum over the 3x3 window intersected with the plane; symmetric, so it is its
// own adjoint.
Tensor box_sum3(const Tensor& t) {
  Tensor out(t.shape());
  const std::int64_t planes = t.extent(0) * t.extent(1);
  const std::int64_t hh = t.extent(2), ww = t.extent(3);
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* src = t.data() + pl * hh * ww;
    double* dst = out.data() + pl * hh * ww;
    for (std::int64_t i = 0; i < hh; ++i)
      for (std::int64_t j = 0; j < ww; ++j) {
        double acc = 0.0;
        for (std::int64_t di = -1; di <= 1; ++di) {
          const std::int64_t r = i + di;
          if (r < 0 || r >= hh) continue;
          for (std::int64_t dj = -1; dj <= 1; ++dj) {
            const std::int64_t c = j + dj;
            if (c < 0 || c >= ww) continue;
            acc += src[r * ww + c];
          }
        }
        dst[i * ww + j] = acc;
      }
  }
  return out;
}

void require_rank4(const Tensor& x, const char* what) {
  if (x.rank() != 4)
    raise(ErrorCode::Shape, std::string(what) + " expects rank-4, got " + shape_str(x.shape()));
}

std::string level_prefix(int level) { return "hfsr.l" + std::to_string(level) + "."; }

}  // namespace

// The three row terms are pairwise differences, so equal neighbors cancel
// exactly and a constant plane maps to exact zeros.
Tensor sobel_dx(const Tensor& x, std::int64_t d) {
  require_rank4(x, "sobel_dx");
  Tensor out(x.shape());
  const std::int64_t planes = x.extent(0) * x.extent(1);
  const std::int64_t hh = x.extent(2), ww = x.extent(3);
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* src = x.data() + pl * hh * ww;
    double* dst = out.data() + pl * hh * ww;
    for (std::int64_t i = 0; i < hh; ++i)
      for (std::int64_t j = 0; j < ww; ++j) {
        const std::int64_t jl = clampi(j - d, ww), jr = clampi(j + d, ww);
        double acc = 0.0;
        for (std::int64_t u = -1; u <= 1; ++u) {
          const std::int64_t r = clampi(i + u * d, hh);
          acc += (u == 0 ? 2.0 : 1.0) * (src[r * ww + jr] - src[r * ww + jl]);
        }
        dst[i * ww + j] = acc;
      }
  }
  return out;
}

Tensor sobel_dy(const Tensor& x, std::int64_t d) {
  require_rank4(x, "sobel_dy");
  Tensor out(x.shape());
  const std::int64_t planes = x.extent(0) * x.extent(1);
  const std::int64_t hh = x.extent(2), ww = x.extent(3);
  for (std::int64_t pl = 0; pl < planes; ++pl) {
    const double* src = x.data() + pl * hh * ww;
    double* dst = out.data() + pl * hh * ww;
    for (std::int64_t i = 0; i < hh; ++i) {
      const std::int64_t it = clampi(i - d, hh), ib = clampi(i + d, hh);
      for (std::int64_t j = 0; j < ww; ++j) {
        double acc = 0.0;
        for (std::int64_t u = -1; u <= 1; ++u) {
          const std::int64_t c = clampi(j + u * d, ww);
          acc += (u == 0 ? 2.0 : 1.0) * (src[ib * ww + c] - src[it * ww + c]);
        }
        dst[i * ww + j] = acc;
      }
    }
  }
  return out;
}

Tensor multiscale_conv(const Tensor& x, const MultiscaleParams& p, MultiscaleCtx* ctx) {
  require_rank4(x, "multiscale_conv");
  Tensor y = conv2d(x, *p.w1, Conv2dSpec{});
  y = add(y, conv2d(x, *p.w3, Conv2dSpec{1, 1, 1, 1, false}));
  y = add(y, conv2d(x, *p.w5, Conv2dSpec{1, 2, 1, 1, false}));
  if (ctx) ctx->x = x;
  return y;
}

MultiscaleGrads multiscale_conv_vjp(const MultiscaleCtx& ctx, const MultiscaleParams& p,
                                    const Tensor& gy) {
  Conv2dGrads g1 = conv2d_vjp(ctx.x, *p.w1, Conv2dSpec{}, gy);
  Conv2dGrads g3 = conv2d_vjp(ctx.x, *p.w3, Conv2dSpec{1, 1, 1, 1, false}, gy);
  Conv2dGrads g5 = conv2d_vjp(ctx.x, *p.w5, Conv2dSpec{1, 2, 1, 1, false}, gy);
  MultiscaleGrads out;
  out.gx = add(add(g1.gx, g3.gx), g5.gx);
  out.gw1 = std::move(g1.gw);
  out.gw3 = std::move(g3.gw);
  out.gw5 = std::move(g5.gw);
  return out;
}

Tensor hog_enhance(const Tensor& x, HogCtx* ctx) {
  require_rank4(x, "hog_enhance");
  Tensor dx = sobel_dx(x, 1);
  Tensor dy = sobel_dy(x, 1);
  static const double centers[4] = {0.0, M_PI / 4.0, M_PI / 2.0, 3.0 * M_PI / 4.0};
  const double shift = std::sqrt(kHogEps);
  Tensor wavg(x.shape()), h(x.shape()), hsq(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double m = std::sqrt(dx[i] * dx[i] + dy[i] * dy[i] + kHogEps) - shift;
    const double th = std::atan2(dy[i], dx[i]);
    double wsum = 0.0;
    for (int b = 0; b < 4; ++b) {
      const double c = std::cos(th - centers[b]);
      wsum += c * c;
    }
    wavg[i] = wsum / 4.0;
    h[i] = m * wavg[i];
    hsq[i] = h[i] * h[i];
  }
  Tensor s = box_sum3(hsq);
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i)
    y[i] = x[i] + h[i] / (std::sqrt(s[i]) + kHogEps);
  if (ctx) {
    ctx->dx = std::move(dx);
    ctx->dy = std::move(dy);
    ctx->wavg = std::move(wavg);
    ctx->h = std::move(h);
    ctx->s = std::move(s);
  }
  return y;
}

Tensor hog_enhance_vjp(const HogCtx& ctx, const Tensor& gy) {
  require_same_shape(gy, ctx.h, "hog_enhance_vjp cotangent");
  const std::int64_t n = gy.size();
  // normalization: n_p = h_p / (sqrt(s_p) + eps) with s_p the windowed sum of
  // squares. dL/dh needs a box sum of the per-pixel denominator terms; s_p = 0
  // forces h_p = 0, so those terms drop.
  Tensor t(gy.shape()), gh(gy.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    const double rs = std::sqrt(ctx.s[i]);
    gh[i] = gy[i] / (rs + kHogEps);
    t[i] = ctx.s[i] > 0.0 ? gy[i] * ctx.h[i] / ((rs + kHogEps) * (rs + kHogEps) * rs) : 0.0;
  }
  Tensor bt = box_sum3(t);
  Tensor gdx(gy.shape()), gdy(gy.shape());
  for (std::int64_t i = 0; i < n; ++i) {
    gh[i] -= ctx.h[i] * bt[i];
    const double gm = gh[i] * ctx.wavg[i];
    const double denom = std::sqrt(ctx.dx[i] * ctx.dx[i] + ctx.dy[i] * ctx.dy[i] + kHogEps);
    gdx[i] = gm * ctx.dx[i] / denom;
    gdy[i] = gm * ctx.dy[i] / denom;
  }
  Tensor gx = add(sobel_dx_adjoint(gdx, 1), sobel_dy_adjoint(gdy, 1));
  for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i];
  return gx;
}

Tensor fuse_specific(const Tensor& a, const Tensor& b, const FuseParams& p, FuseCtx* ctx) {
  require_rank4(a, "fuse_specific");
  require_same_shape(a, b, "fuse_specific inputs");
  Tensor cat = concat({a, b}, 1);
  const int groups = static_cast<int>(cat.extent(1));
  Tensor mid = conv2d(cat, *p.dw, Conv2dSpec{1, 1, 1, groups, false});
  Tensor out = conv2d(mid, *p.pw, Conv2dSpec{});
  if (ctx) {
    ctx->cat = std::move(cat);
    ctx->mid = std::move(mid);
  }
  return out;
}

FuseGrads fuse_specific_vjp(const FuseCtx& ctx, const FuseParams& p, const Tensor& gy) {
  const int groups = static_cast<int>(ctx.cat.extent(1));
  Conv2dGrads gpw = conv2d_vjp(ctx.mid, *p.pw, Conv2dSpec{}, gy);
  Conv2dGrads gdw = conv2d_vjp(ctx.cat, *p.dw, Conv2dSpec{1, 1, 1, groups, false}, gpw.gx);
  const std::int64_t c = ctx.cat.extent(1) / 2;
  std::vector<Tensor> halves = split(gdw.gx, 1, {c, c});
  FuseGrads out;
  out.ga = std::move(halves[0]);
  out.gb = std::move(halves[1]);
  out.gdw = std::move(gdw.gw);
  out.gpw = std::move(gpw.gw);
  return out;
}

Tensor grad_bank(const Tensor& x, int k) {
  if (k < 1 || k > 3)
    raise(ErrorCode::Argument, "grad_bank scale must be 1, 2, or 3, got " + std::to_string(k));
  require_rank4(x, "grad_bank");
  Tensor dx = sobel_dx(x, k);
  Tensor dy = sobel_dy(x, k);
  Tensor out(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i)
    out[i] = std::fabs(dx[i]) + std::fabs(dy[i]);
  return out;
}

double grad_consistency_loss(const Tensor& fh, const Tensor& fh_r, const Tensor& fh_i,
                             Tensor* gfh, Tensor* gfh_r, Tensor* gfh_i) {
  require_rank4(fh, "grad_consistency_loss");
  require_same_shape(fh, fh_r, "grad_consistency_loss thermal target");
  require_same_shape(fh, fh_i, "grad_consistency_loss visible target");
  const std::int64_t n = fh.size();
  if (gfh) *gfh = Tensor(fh.shape());
  if (gfh_r) *gfh_r = Tensor(fh.shape());
  if (gfh_i) *gfh_i = Tensor(fh.shape());
  double loss = 0.0;
  for (int k = 1; k <= 3; ++k) {
    for (int t = 0; t < 2; ++t) {
      const Tensor& target = t == 0 ? fh_r : fh_i;
      Tensor* gt = t == 0 ? gfh_r : gfh_i;
      Tensor dx = sobel_dx(target, k);
      Tensor dy = sobel_dy(target, k);
      Tensor gdx, gdy;
      if (gt) {
        gdx = Tensor(fh.shape());
        gdy = Tensor(fh.shape());
      }
      for (std::int64_t i = 0; i < n; ++i) {
        const double r = fh[i] - std::fabs(dx[i]) - std::fabs(dy[i]);
        loss += std::fabs(r);
        const double s = static_cast<double>((r > 0.0) - (r < 0.0));
        if (gfh) (*gfh)[i] += s;
        if (gt) {
          gdx[i] = -s * static_cast<double>((dx[i] > 0.0) - (dx[i] < 0.0));
          gdy[i] = -s * static_cast<double>((dy[i] > 0.0) - (dy[i] < 0.0));
        }
      }
      if (gt) {
        Tensor back = add(sobel_dx_adjoint(gdx, k), sobel_dy_adjoint(gdy, k));
        for (std::int64_t i = 0; i < n; ++i) (*gt)[i] += back[i];
      }
    }
  }
  const double inv = 1.0 / static_cast<double>(n);
  if (gfh)
    for (std::int64_t i = 0; i < n; ++i) (*gfh)[i] *= inv;
  for (Tensor* gt : {gfh_r, gfh_i})
    if (gt)
      for (std::int64_t i = 0; i < n; ++i) (*gt)[i] *= inv;
  return loss * inv;
}

void hfsr_register(ParamStore& ps, int level, std::int64_t c) {
  const std::string p = level_prefix(level);
  ps.create(p + "ms1.w", {c, c, 1, 1}, Init::FanScaledUniform);
  ps.create(p + "ms3.w", {c, c, 3, 3}, Init::FanScaledUniform);
  ps.create(p + "ms5.w", {c, c, 5, 5}, Init::FanScaledUniform);
  ps.create(p + "dw.w", {2 * c, 1, 3, 3}, Init::FanScaledUniform);
  ps.create(p + "pw.w", {c, 2 * c, 1, 1}, Init::FanScaledUniform);
}

Tensor hfsr_apply(const Tensor& fh_r, const Tensor& fh_i, const ParamStore& ps, int level,
                  HfsrCtx* ctx) {
  const std::string p = level_prefix(level);
  MultiscaleParams mp{&ps.get(p + "ms1.w"), &ps.get(p + "ms3.w"), &ps.get(p + "ms5.w")};
  FuseParams fp{&ps.get(p + "dw.w"), &ps.get(p + "pw.w")};
  Tensor r_star = hog_enhance(multiscale_conv(fh_r, mp, ctx ? &ctx->ms_r : nullptr),
                              ctx ? &ctx->hog_r : nullptr);
  Tensor i_star = hog_enhance(multiscale_conv(fh_i, mp, ctx ? &ctx->ms_i : nullptr),
                              ctx ? &ctx->hog_i : nullptr);
  return fuse_specific(r_star, i_star, fp, ctx ? &ctx->fuse : nullptr);
}

HfsrGrads hfsr_backward(const HfsrCtx& ctx, const ParamStore& ps, int level, const Tensor& gy,
                        GradStore& gs) {
  const std::string p = level_prefix(level);
  MultiscaleParams mp{&ps.get(p + "ms1.w"), &ps.get(p + "ms3.w"), &ps.get(p + "ms5.w")};
  FuseParams fp{&ps.get(p + "dw.w"), &ps.get(p + "pw.w")};
  FuseGrads fg = fuse_specific_vjp(ctx.fuse, fp, gy);
  gs.accumulate(p + "dw.w", fg.gdw);
  gs.accumulate(p + "pw.w", fg.gpw);
  MultiscaleGrads mr = multiscale_conv_vjp(ctx.ms_r, mp, hog_enhance_vjp(ctx.hog_r, fg.ga));
  MultiscaleGrads mi = multiscale_conv_vjp(ctx.ms_i, mp, hog_enhance_vjp(ctx.hog_i, fg.gb));
  gs.accumulate(p + "ms1.w", mr.gw1);
  gs.accumulate(p + "ms3.w", mr.gw3);
  gs.accumulate(p + "ms5.w", mr.gw5);
  gs.accumulate(p + "ms1.w", mi.gw1);
  gs.accumulate(p + "ms3.w", mi.gw3);
  gs.accumulate(p + "ms5.w", mi.gw5);
  HfsrGrads out;
  out.gfh_r = std::move(mr.gx);
  out.gfh_i = std::move(mi.gx);
  return out;
}

}  // namespace wdfq
