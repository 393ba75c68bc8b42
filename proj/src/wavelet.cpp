#include "wdfq/wavelet.hpp"

namespace wdfq {

WaveletBands dwt_haar(const Tensor& x) {
  if (x.rank() != 4) raise(ErrorCode::Shape, "dwt_haar expects rank-4, got " + shape_str(x.shape()));
  const std::int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (h % 2 != 0) raise(ErrorCode::Shape, "dwt_haar axis 2 extent " + std::to_string(h) + " is odd");
  if (w % 2 != 0) raise(ErrorCode::Shape, "dwt_haar axis 3 extent " + std::to_string(w) + " is odd");
  const Shape bshape{n, c, h / 2, w / 2};
  WaveletBands bands{Tensor(bshape), Tensor(bshape), Tensor(bshape), Tensor(bshape)};
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t by = 0; by < h / 2; ++by)
        for (std::int64_t bx = 0; bx < w / 2; ++bx) {
          const double a = x.at(i, ch, 2 * by, 2 * bx);
          const double b = x.at(i, ch, 2 * by, 2 * bx + 1);
          const double cc = x.at(i, ch, 2 * by + 1, 2 * bx);
          const double d = x.at(i, ch, 2 * by + 1, 2 * bx + 1);
          bands.ll.at(i, ch, by, bx) = (a + b + cc + d) / 2.0;
          bands.lh.at(i, ch, by, bx) = (a + b - cc - d) / 2.0;
          bands.hl.at(i, ch, by, bx) = (a - b + cc - d) / 2.0;
          bands.hh.at(i, ch, by, bx) = (a - b - cc + d) / 2.0;
        }
  return bands;
}

Tensor idwt_haar(const Tensor& ll, const Tensor& lh, const Tensor& hl, const Tensor& hh) {
  require_same_shape(ll, lh, "idwt_haar bands");
  require_same_shape(ll, hl, "idwt_haar bands");
  require_same_shape(ll, hh, "idwt_haar bands");
  if (ll.rank() != 4) raise(ErrorCode::Shape, "idwt_haar expects rank-4 bands");
  const std::int64_t n = ll.extent(0), c = ll.extent(1), hb = ll.extent(2), wb = ll.extent(3);
  Tensor x({n, c, 2 * hb, 2 * wb});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t by = 0; by < hb; ++by)
        for (std::int64_t bx = 0; bx < wb; ++bx) {
          const double s = ll.at(i, ch, by, bx), v = lh.at(i, ch, by, bx);
          const double hz = hl.at(i, ch, by, bx), dg = hh.at(i, ch, by, bx);
          x.at(i, ch, 2 * by, 2 * bx) = (s + v + hz + dg) / 2.0;
          x.at(i, ch, 2 * by, 2 * bx + 1) = (s + v - hz - dg) / 2.0;
          x.at(i, ch, 2 * by + 1, 2 * bx) = (s - v + hz - dg) / 2.0;
          x.at(i, ch, 2 * by + 1, 2 * bx + 1) = (s - v - hz + dg) / 2.0;
        }
  return x;
}

Tensor reduce_high(const Tensor& lh, const Tensor& hl, const Tensor& hh, const Tensor& w,
                   const Tensor& b) {
  Tensor cat = concat({lh, hl, hh}, 1);
  return bias_add_channels(conv2d(cat, w, {}), b);
}

ReduceHighGrads reduce_high_vjp(const Tensor& lh, const Tensor& hl, const Tensor& hh,
                                const Tensor& w, const Tensor& b, const Tensor& gy) {
  Tensor cat = concat({lh, hl, hh}, 1);
  ReduceHighGrads out;
  out.gb = bias_add_channels_vjp(conv2d(cat, w, {}), gy);
  Conv2dGrads cg = conv2d_vjp(cat, w, {}, gy);
  out.gw = std::move(cg.gw);
  auto parts = split(cg.gx, 1, {lh.extent(1), hl.extent(1), hh.extent(1)});
  out.glh = std::move(parts[0]);
  out.ghl = std::move(parts[1]);
  out.ghh = std::move(parts[2]);
  return out;
}

Tensor avg_pool2x(const Tensor& x) {
  if (x.rank() != 4) raise(ErrorCode::Shape, "avg_pool2x expects rank-4");
  const std::int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (h % 2 != 0 || w % 2 != 0) raise(ErrorCode::Shape, "avg_pool2x needs even spatial extents");
  Tensor y({n, c, h / 2, w / 2});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t by = 0; by < h / 2; ++by)
        for (std::int64_t bx = 0; bx < w / 2; ++bx)
          y.at(i, ch, by, bx) =
              (x.at(i, ch, 2 * by, 2 * bx) + x.at(i, ch, 2 * by, 2 * bx + 1) +
               x.at(i, ch, 2 * by + 1, 2 * bx) + x.at(i, ch, 2 * by + 1, 2 * bx + 1)) /
              4.0;
  return y;
}

Tensor avg_pool2x_vjp(const Tensor& x, const Tensor& gy) {
  const std::int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (gy.rank() != 4 || gy.extent(2) != h / 2 || gy.extent(3) != w / 2)
    raise(ErrorCode::Shape, "avg_pool2x cotangent shape mismatch");
  Tensor gx(x.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t by = 0; by < h / 2; ++by)
        for (std::int64_t bx = 0; bx < w / 2; ++bx) {
          const double v = gy.at(i, ch, by, bx) / 4.0;
          gx.at(i, ch, 2 * by, 2 * bx) = v;
          gx.at(i, ch, 2 * by, 2 * bx + 1) = v;
          gx.at(i, ch, 2 * by + 1, 2 * bx) = v;
          gx.at(i, ch, 2 * by + 1, 2 * bx + 1) = v;
        }
  return gx;
}

}  // namespace wdfq
