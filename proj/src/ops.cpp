#include "wdfq/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace wdfq {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMap = Eigen::Map<RowMat>;
using ConstRowMap = Eigen::Map<const RowMat>;

std::int64_t conv_out_extent(std::int64_t in, int pad, int dilation, std::int64_t k,
                             int stride) {
  return (in + 2 * static_cast<std::int64_t>(pad) - static_cast<std::int64_t>(dilation) * (k - 1) - 1) /
             stride +
         1;
}

void check_conv_shapes(const Tensor& x, const Tensor& w, const Conv2dSpec& s,
                       std::int64_t& hp, std::int64_t& wp) {
  if (x.rank() != 4) raise(ErrorCode::Shape, "conv2d input must be rank-4, got " + shape_str(x.shape()));
  if (w.rank() != 4) raise(ErrorCode::Shape, "conv2d weight must be rank-4, got " + shape_str(w.shape()));
  if (s.stride < 1 || s.dilation < 1 || s.groups < 1 || s.pad < 0)
    raise(ErrorCode::Argument, "conv2d stride/dilation/groups must be >= 1 and pad >= 0");
  const std::int64_t cin = x.extent(1);
  if (cin % s.groups != 0)
    raise(ErrorCode::Shape, "conv2d input axis 1 (" + std::to_string(cin) +
                                ") not divisible by groups " + std::to_string(s.groups));
  if (w.extent(0) % s.groups != 0)
    raise(ErrorCode::Shape, "conv2d weight axis 0 (" + std::to_string(w.extent(0)) +
                                ") not divisible by groups " + std::to_string(s.groups));
  if (w.extent(1) * s.groups != cin)
    raise(ErrorCode::Shape, "conv2d weight axis 1 (" + std::to_string(w.extent(1)) +
                                ") times groups != input axis 1 (" + std::to_string(cin) + ")");
  hp = conv_out_extent(x.extent(2), s.pad, s.dilation, w.extent(2), s.stride);
  wp = conv_out_extent(x.extent(3), s.pad, s.dilation, w.extent(3), s.stride);
  if (hp < 1) raise(ErrorCode::Shape, "conv2d kernel does not fit padded input along axis 2");
  if (wp < 1) raise(ErrorCode::Shape, "conv2d kernel does not fit padded input along axis 3");
}

// Patch matrix for one (sample, group): rows (Cin/g * kh * kw), cols (H'*W').
void fill_cols(const Tensor& x, const Conv2dSpec& s, std::int64_t n, std::int64_t cbase,
               std::int64_t cing, std::int64_t kh, std::int64_t kw, std::int64_t hp,
               std::int64_t wp, RowMat& cols) {
  const std::int64_t h = x.extent(2), w = x.extent(3);
  for (std::int64_t ci = 0; ci < cing; ++ci)
    for (std::int64_t ky = 0; ky < kh; ++ky)
      for (std::int64_t kx = 0; kx < kw; ++kx) {
        const std::int64_t r = (ci * kh + ky) * kw + kx;
        for (std::int64_t oy = 0; oy < hp; ++oy) {
          std::int64_t iy = oy * s.stride - s.pad + ky * s.dilation;
          if (s.edge_pad) iy = std::clamp<std::int64_t>(iy, 0, h - 1);
          const bool row_ok = iy >= 0 && iy < h;
          for (std::int64_t ox = 0; ox < wp; ++ox) {
            std::int64_t ix = ox * s.stride - s.pad + kx * s.dilation;
            if (s.edge_pad) ix = std::clamp<std::int64_t>(ix, 0, w - 1);
            cols(r, oy * wp + ox) =
                (row_ok && ix >= 0 && ix < w) ? x.at(n, cbase + ci, iy, ix) : 0.0;
          }
        }
      }
}

struct BatchPlan {
  Shape out_batch;
  std::vector<std::int64_t> div;       // flat index -> per-axis index divisors
  std::vector<std::int64_t> astride;   // in whole-matrix units; 0 where broadcast
  std::vector<std::int64_t> bstride;
  std::int64_t total = 1;
};

BatchPlan plan_batches(const Tensor& a, const Tensor& b) {
  const int nba = a.rank() - 2, nbb = b.rank() - 2, nb = std::max(nba, nbb);
  BatchPlan p;
  p.out_batch.resize(nb);
  for (int i = 0; i < nb; ++i) {
    const int ia = i - (nb - nba), ib = i - (nb - nbb);
    const std::int64_t ea = ia >= 0 ? a.extent(ia) : 1;
    const std::int64_t eb = ib >= 0 ? b.extent(ib) : 1;
    if (ea != eb && ea != 1 && eb != 1)
      raise(ErrorCode::Shape, "matmul batch extents " + shape_str(a.shape()) + " vs " +
                                  shape_str(b.shape()) + " not broadcast-compatible");
    p.out_batch[i] = std::max(ea, eb);
    p.total *= p.out_batch[i];
  }
  p.div.assign(nb, 1);
  for (int i = nb - 2; i >= 0; --i) p.div[i] = p.div[i + 1] * p.out_batch[i + 1];
  p.astride.assign(nb, 0);
  p.bstride.assign(nb, 0);
  std::int64_t sa = 1, sb = 1;
  for (int i = nb - 1; i >= 0; --i) {
    const int ia = i - (nb - nba), ib = i - (nb - nbb);
    const std::int64_t ea = ia >= 0 ? a.extent(ia) : 1;
    const std::int64_t eb = ib >= 0 ? b.extent(ib) : 1;
    p.astride[i] = ea == 1 ? 0 : sa;
    p.bstride[i] = eb == 1 ? 0 : sb;
    sa *= ea;
    sb *= eb;
  }
  return p;
}

void batch_offsets(const BatchPlan& p, std::int64_t t, std::int64_t& ao, std::int64_t& bo) {
  ao = bo = 0;
  for (std::size_t i = 0; i < p.out_batch.size(); ++i) {
    const std::int64_t idx = (t / p.div[i]) % p.out_batch[i];
    ao += idx * p.astride[i];
    bo += idx * p.bstride[i];
  }
}

void check_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2)
    raise(ErrorCode::Shape, "matmul operands must have rank >= 2");
  if (a.extent(a.rank() - 1) != b.extent(b.rank() - 2))
    raise(ErrorCode::Shape, "matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
}

int norm_axis(const Tensor& x, int axis, const char* op) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    raise(ErrorCode::Argument, std::string(op) + " axis out of range for " + shape_str(x.shape()));
  return axis;
}

constexpr double kLnEps = 1e-12;

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Conv2dSpec& s) {
  std::int64_t hp = 0, wp = 0;
  check_conv_shapes(x, w, s, hp, wp);
  const std::int64_t n = x.extent(0), cout = w.extent(0), cing = w.extent(1);
  const std::int64_t kh = w.extent(2), kw = w.extent(3);
  const std::int64_t coutg = cout / s.groups, ckk = cing * kh * kw;
  Tensor y({n, cout, hp, wp});
  ConstRowMap wmat(w.data(), cout, ckk);
  RowMat cols(ckk, hp * wp);
  for (std::int64_t i = 0; i < n; ++i) {
    RowMap ymat(y.data() + i * cout * hp * wp, cout, hp * wp);
    for (int g = 0; g < s.groups; ++g) {
      fill_cols(x, s, i, g * cing, cing, kh, kw, hp, wp, cols);
      ymat.middleRows(g * coutg, coutg).noalias() = wmat.middleRows(g * coutg, coutg) * cols;
    }
  }
  return y;
}

Conv2dGrads conv2d_vjp(const Tensor& x, const Tensor& w, const Conv2dSpec& s,
                       const Tensor& gy) {
  std::int64_t hp = 0, wp = 0;
  check_conv_shapes(x, w, s, hp, wp);
  const std::int64_t n = x.extent(0), cout = w.extent(0), cing = w.extent(1);
  const std::int64_t kh = w.extent(2), kw = w.extent(3);
  const std::int64_t coutg = cout / s.groups, ckk = cing * kh * kw;
  const std::int64_t h = x.extent(2), wd = x.extent(3);
  Conv2dGrads out{Tensor(x.shape()), Tensor(w.shape())};
  ConstRowMap wmat(w.data(), cout, ckk);
  RowMap gwmat(out.gw.data(), cout, ckk);
  RowMat cols(ckk, hp * wp);
  RowMat gcols(ckk, hp * wp);
  for (std::int64_t i = 0; i < n; ++i) {
    ConstRowMap gymat(gy.data() + i * cout * hp * wp, cout, hp * wp);
    for (int g = 0; g < s.groups; ++g) {
      fill_cols(x, s, i, g * cing, cing, kh, kw, hp, wp, cols);
      gwmat.middleRows(g * coutg, coutg).noalias() +=
          gymat.middleRows(g * coutg, coutg) * cols.transpose();
      gcols.noalias() = wmat.middleRows(g * coutg, coutg).transpose() *
                        gymat.middleRows(g * coutg, coutg);
      for (std::int64_t ci = 0; ci < cing; ++ci)
        for (std::int64_t ky = 0; ky < kh; ++ky)
          for (std::int64_t kx = 0; kx < kw; ++kx) {
            const std::int64_t r = (ci * kh + ky) * kw + kx;
            for (std::int64_t oy = 0; oy < hp; ++oy) {
              std::int64_t iy = oy * s.stride - s.pad + ky * s.dilation;
              if (s.edge_pad) iy = std::clamp<std::int64_t>(iy, 0, h - 1);
              if (iy < 0 || iy >= h) continue;
              for (std::int64_t ox = 0; ox < wp; ++ox) {
                std::int64_t ix = ox * s.stride - s.pad + kx * s.dilation;
                if (s.edge_pad) ix = std::clamp<std::int64_t>(ix, 0, wd - 1);
                if (ix < 0 || ix >= wd) continue;
                out.gx.at(i, g * cing + ci, iy, ix) += gcols(r, oy * wp + ox);
              }
            }
          }
    }
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_matmul(a, b);
  const std::int64_t m = a.extent(a.rank() - 2), k = a.extent(a.rank() - 1);
  const std::int64_t p = b.extent(b.rank() - 1);
  BatchPlan plan = plan_batches(a, b);
  Shape oshape = plan.out_batch;
  oshape.push_back(m);
  oshape.push_back(p);
  Tensor y(oshape);
  for (std::int64_t t = 0; t < plan.total; ++t) {
    std::int64_t ao = 0, bo = 0;
    batch_offsets(plan, t, ao, bo);
    ConstRowMap am(a.data() + ao * m * k, m, k);
    ConstRowMap bm(b.data() + bo * k * p, k, p);
    RowMap ym(y.data() + t * m * p, m, p);
    ym.noalias() = am * bm;
  }
  return y;
}

MatmulGrads matmul_vjp(const Tensor& a, const Tensor& b, const Tensor& gy) {
  check_matmul(a, b);
  const std::int64_t m = a.extent(a.rank() - 2), k = a.extent(a.rank() - 1);
  const std::int64_t p = b.extent(b.rank() - 1);
  BatchPlan plan = plan_batches(a, b);
  if (gy.size() != plan.total * m * p)
    raise(ErrorCode::Shape, "matmul cotangent has wrong element count");
  MatmulGrads out{Tensor(a.shape()), Tensor(b.shape())};
  for (std::int64_t t = 0; t < plan.total; ++t) {
    std::int64_t ao = 0, bo = 0;
    batch_offsets(plan, t, ao, bo);
    ConstRowMap am(a.data() + ao * m * k, m, k);
    ConstRowMap bm(b.data() + bo * k * p, k, p);
    ConstRowMap gym(gy.data() + t * m * p, m, p);
    RowMap gam(out.ga.data() + ao * m * k, m, k);
    RowMap gbm(out.gb.data() + bo * k * p, k, p);
    gam.noalias() += gym * bm.transpose();
    gbm.noalias() += am.transpose() * gym;
  }
  return out;
}

Tensor softmax(const Tensor& x, int axis) {
  axis = norm_axis(x, axis, "softmax");
  const std::int64_t len = x.extent(axis);
  std::int64_t inner = 1;
  for (int a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::int64_t outer = x.size() / (len * inner);
  Tensor y(x.shape());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double mx = x[base];
      for (std::int64_t j = 1; j < len; ++j) mx = std::max(mx, x[base + j * inner]);
      double sum = 0.0;
      for (std::int64_t j = 0; j < len; ++j) {
        const double e = std::exp(x[base + j * inner] - mx);
        y[base + j * inner] = e;
        sum += e;
      }
      for (std::int64_t j = 0; j < len; ++j) y[base + j * inner] /= sum;
    }
  return y;
}

Tensor softmax_vjp(const Tensor& x, int axis, const Tensor& gy) {
  require_same_shape(x, gy, "softmax vjp");
  axis = norm_axis(x, axis, "softmax");
  Tensor s = softmax(x, axis);
  const std::int64_t len = x.extent(axis);
  std::int64_t inner = 1;
  for (int a = axis + 1; a < x.rank(); ++a) inner *= x.extent(a);
  const std::int64_t outer = x.size() / (len * inner);
  Tensor gx(x.shape());
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * len * inner + in;
      double dot = 0.0;
      for (std::int64_t j = 0; j < len; ++j)
        dot += gy[base + j * inner] * s[base + j * inner];
      for (std::int64_t j = 0; j < len; ++j)
        gx[base + j * inner] = s[base + j * inner] * (gy[base + j * inner] - dot);
    }
  return gx;
}

namespace {

struct SampleGeom {
  std::int64_t x0, x1, y0, y1;
  double fx, fy;
};

SampleGeom sample_geom(double px, double py, std::int64_t h, std::int64_t w) {
  const double u = px * static_cast<double>(w) - 0.5;
  const double v = py * static_cast<double>(h) - 0.5;
  const double uf = std::floor(u), vf = std::floor(v);
  SampleGeom g;
  g.fx = u - uf;
  g.fy = v - vf;
  g.x0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(uf), 0, w - 1);
  g.x1 = std::clamp<std::int64_t>(static_cast<std::int64_t>(uf) + 1, 0, w - 1);
  g.y0 = std::clamp<std::int64_t>(static_cast<std::int64_t>(vf), 0, h - 1);
  g.y1 = std::clamp<std::int64_t>(static_cast<std::int64_t>(vf) + 1, 0, h - 1);
  return g;
}

void check_sample_shapes(const Tensor& x, const Tensor& points, std::int64_t& npts,
                         std::int64_t& per_n) {
  if (x.rank() != 4)
    raise(ErrorCode::Shape, "bilinear_sample map must be rank-4, got " + shape_str(x.shape()));
  if (points.extent(points.rank() - 1) != 2)
    raise(ErrorCode::Shape, "bilinear_sample points must end in extent 2, got " +
                                shape_str(points.shape()));
  npts = points.size() / 2;
  const std::int64_t n = x.extent(0);
  if (n > 1) {
    if (points.rank() < 2 || points.extent(0) != n)
      raise(ErrorCode::Shape, "bilinear_sample with batched maps needs points leading extent " +
                                  std::to_string(n) + ", got " + shape_str(points.shape()));
    per_n = npts / n;
  } else {
    per_n = npts;
  }
}

}  // namespace

Tensor bilinear_sample(const Tensor& x, const Tensor& points) {
  std::int64_t npts = 0, per_n = 0;
  check_sample_shapes(x, points, npts, per_n);
  const std::int64_t c = x.extent(1), h = x.extent(2), w = x.extent(3);
  Shape oshape = points.shape();
  oshape.back() = c;
  Tensor y(oshape);
  for (std::int64_t p = 0; p < npts; ++p) {
    const std::int64_t n = p / per_n;
    const SampleGeom g = sample_geom(points[2 * p], points[2 * p + 1], h, w);
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double top = (1.0 - g.fx) * x.at(n, ch, g.y0, g.x0) + g.fx * x.at(n, ch, g.y0, g.x1);
      const double bot = (1.0 - g.fx) * x.at(n, ch, g.y1, g.x0) + g.fx * x.at(n, ch, g.y1, g.x1);
      y[p * c + ch] = (1.0 - g.fy) * top + g.fy * bot;
    }
  }
  return y;
}

BilinearGrads bilinear_sample_vjp(const Tensor& x, const Tensor& points, const Tensor& gy) {
  std::int64_t npts = 0, per_n = 0;
  check_sample_shapes(x, points, npts, per_n);
  const std::int64_t c = x.extent(1), h = x.extent(2), w = x.extent(3);
  if (gy.size() != npts * c) raise(ErrorCode::Shape, "bilinear_sample cotangent has wrong count");
  BilinearGrads out{Tensor(x.shape()), Tensor(points.shape())};
  for (std::int64_t p = 0; p < npts; ++p) {
    const std::int64_t n = p / per_n;
    const SampleGeom g = sample_geom(points[2 * p], points[2 * p + 1], h, w);
    double du = 0.0, dv = 0.0;
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double gv = gy[p * c + ch];
      out.gx.at(n, ch, g.y0, g.x0) += gv * (1.0 - g.fy) * (1.0 - g.fx);
      out.gx.at(n, ch, g.y0, g.x1) += gv * (1.0 - g.fy) * g.fx;
      out.gx.at(n, ch, g.y1, g.x0) += gv * g.fy * (1.0 - g.fx);
      out.gx.at(n, ch, g.y1, g.x1) += gv * g.fy * g.fx;
      const double a00 = x.at(n, ch, g.y0, g.x0), a01 = x.at(n, ch, g.y0, g.x1);
      const double a10 = x.at(n, ch, g.y1, g.x0), a11 = x.at(n, ch, g.y1, g.x1);
      du += gv * ((1.0 - g.fy) * (a01 - a00) + g.fy * (a11 - a10));
      dv += gv * ((1.0 - g.fx) * (a10 - a00) + g.fx * (a11 - a01));
    }
    out.gpoints[2 * p] = du * static_cast<double>(w);
    out.gpoints[2 * p + 1] = dv * static_cast<double>(h);
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor y(a.shape());
  y.as_vector() = a.as_vector() + b.as_vector();
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor y(a.shape());
  y.as_vector() = a.as_vector().cwiseProduct(b.as_vector());
  return y;
}

Tensor abs(const Tensor& x) {
  Tensor y(x.shape());
  y.as_vector() = x.as_vector().cwiseAbs();
  return y;
}

Tensor sigmoid(const Tensor& x) {
  Tensor y(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    if (v >= 0.0) {
      y[i] = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      y[i] = e / (1.0 + e);
    }
  }
  return y;
}

Tensor sigmoid_vjp(const Tensor& x, const Tensor& gy) {
  require_same_shape(x, gy, "sigmoid vjp");
  Tensor s = sigmoid(x);
  Tensor gx(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) gx[i] = gy[i] * s[i] * (1.0 - s[i]);
  return gx;
}

Tensor relu(const Tensor& x) {
  Tensor y(x.shape());
  y.as_vector() = x.as_vector().cwiseMax(0.0);
  return y;
}

Tensor relu_vjp(const Tensor& x, const Tensor& gy) {
  require_same_shape(x, gy, "relu vjp");
  Tensor gx(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) gx[i] = x[i] > 0.0 ? gy[i] : 0.0;
  return gx;
}

namespace {

void check_ln_shapes(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const std::int64_t d = x.extent(x.rank() - 1);
  if (gamma.rank() != 1 || gamma.extent(0) != d)
    raise(ErrorCode::Shape, "layer_norm gamma must be rank-1 of " + std::to_string(d));
  if (beta.rank() != 1 || beta.extent(0) != d)
    raise(ErrorCode::Shape, "layer_norm beta must be rank-1 of " + std::to_string(d));
}

}  // namespace

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta) {
  check_ln_shapes(x, gamma, beta);
  const std::int64_t d = x.extent(x.rank() - 1), rows = x.size() / d;
  Tensor y(x.shape());
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += x[base + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = x[base + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    for (std::int64_t j = 0; j < d; ++j)
      y[base + j] = (x[base + j] - mean) * inv * (1.0 + gamma[j]) + beta[j];
  }
  return y;
}

LayerNormGrads layer_norm_vjp(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                              const Tensor& gy) {
  check_ln_shapes(x, gamma, beta);
  require_same_shape(x, gy, "layer_norm vjp");
  const std::int64_t d = x.extent(x.rank() - 1), rows = x.size() / d;
  LayerNormGrads out{Tensor(x.shape()), Tensor(gamma.shape()), Tensor(beta.shape())};
  std::vector<double> xhat(static_cast<std::size_t>(d));
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t base = r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += x[base + j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = x[base + j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLnEps);
    double hmean = 0.0, hxmean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      xhat[static_cast<std::size_t>(j)] = (x[base + j] - mean) * inv;
      const double hj = gy[base + j] * (1.0 + gamma[j]);
      hmean += hj;
      hxmean += hj * xhat[static_cast<std::size_t>(j)];
      out.gbeta[j] += gy[base + j];
      out.ggamma[j] += gy[base + j] * xhat[static_cast<std::size_t>(j)];
    }
    hmean /= static_cast<double>(d);
    hxmean /= static_cast<double>(d);
    for (std::int64_t j = 0; j < d; ++j) {
      const double hj = gy[base + j] * (1.0 + gamma[j]);
      out.gx[base + j] = inv * (hj - hmean - xhat[static_cast<std::size_t>(j)] * hxmean);
    }
  }
  return out;
}

Tensor upsample2x(const Tensor& x) {
  if (x.rank() != 4) raise(ErrorCode::Shape, "upsample2x expects rank-4, got " + shape_str(x.shape()));
  const std::int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  Tensor y({n, c, 2 * h, 2 * w});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t yy = 0; yy < 2 * h; ++yy)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx)
          y.at(i, ch, yy, xx) = x.at(i, ch, yy / 2, xx / 2);
  return y;
}

Tensor upsample2x_vjp(const Tensor& x, const Tensor& gy) {
  if (gy.rank() != 4 || gy.extent(2) != 2 * x.extent(2) || gy.extent(3) != 2 * x.extent(3))
    raise(ErrorCode::Shape, "upsample2x cotangent shape mismatch");
  const std::int64_t n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
  Tensor gx(x.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t yy = 0; yy < 2 * h; ++yy)
        for (std::int64_t xx = 0; xx < 2 * w; ++xx)
          gx.at(i, ch, yy / 2, xx / 2) += gy.at(i, ch, yy, xx);
  return gx;
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4)
    raise(ErrorCode::Shape, "global_avg_pool expects rank-4, got " + shape_str(x.shape()));
  const std::int64_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor y({n, c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double sum = 0.0;
      const double* p = x.data() + (i * c + ch) * hw;
      for (std::int64_t k = 0; k < hw; ++k) sum += p[k];
      y.at(i, ch) = sum / static_cast<double>(hw);
    }
  return y;
}

Tensor global_avg_pool_vjp(const Tensor& x, const Tensor& gy) {
  const std::int64_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  if (gy.rank() != 2 || gy.extent(0) != n || gy.extent(1) != c)
    raise(ErrorCode::Shape, "global_avg_pool cotangent shape mismatch");
  Tensor gx(x.shape());
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double v = gy.at(i, ch) / static_cast<double>(hw);
      double* p = gx.data() + (i * c + ch) * hw;
      for (std::int64_t k = 0; k < hw; ++k) p[k] = v;
    }
  return gx;
}

Tensor transpose_last2(const Tensor& x) {
  if (x.rank() < 2) raise(ErrorCode::Shape, "transpose_last2 needs rank >= 2");
  const std::int64_t r = x.extent(x.rank() - 2), c = x.extent(x.rank() - 1);
  const std::int64_t batches = x.size() / (r * c);
  Shape oshape = x.shape();
  std::swap(oshape[oshape.size() - 2], oshape[oshape.size() - 1]);
  Tensor y(oshape);
  for (std::int64_t b = 0; b < batches; ++b) {
    ConstRowMap xm(x.data() + b * r * c, r, c);
    RowMap ym(y.data() + b * r * c, c, r);
    ym = xm.transpose();
  }
  return y;
}

Tensor nchw_to_tokens(const Tensor& x) {
  if (x.rank() != 4) raise(ErrorCode::Shape, "nchw_to_tokens expects rank-4");
  const std::int64_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor t({n, hw, c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* src = x.data() + (i * c + ch) * hw;
      for (std::int64_t p = 0; p < hw; ++p) t[(i * hw + p) * c + ch] = src[p];
    }
  return t;
}

Tensor tokens_to_nchw(const Tensor& t, std::int64_t h, std::int64_t w) {
  if (t.rank() != 3) raise(ErrorCode::Shape, "tokens_to_nchw expects rank-3");
  if (t.extent(1) != h * w)
    raise(ErrorCode::Shape, "token count " + std::to_string(t.extent(1)) + " != " +
                                std::to_string(h) + "x" + std::to_string(w));
  const std::int64_t n = t.extent(0), c = t.extent(2), hw = h * w;
  Tensor x({n, c, h, w});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double* dst = x.data() + (i * c + ch) * hw;
      for (std::int64_t p = 0; p < hw; ++p) dst[p] = t[(i * hw + p) * c + ch];
    }
  return x;
}

Tensor scale(const Tensor& x, double s) {
  Tensor y(x.shape());
  y.as_vector() = x.as_vector() * s;
  return y;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) raise(ErrorCode::Argument, "concat needs at least one part");
  const int rank = parts[0].rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) raise(ErrorCode::Argument, "concat axis out of range");
  Shape oshape = parts[0].shape();
  oshape[static_cast<std::size_t>(axis)] = 0;
  std::int64_t inner = 1;
  for (int a = axis + 1; a < rank; ++a) inner *= parts[0].extent(a);
  for (const Tensor& p : parts) {
    if (p.rank() != rank) raise(ErrorCode::Shape, "concat parts have differing ranks");
    for (int a = 0; a < rank; ++a)
      if (a != axis && p.extent(a) != parts[0].extent(a))
        raise(ErrorCode::Shape, "concat parts differ on axis " + std::to_string(a));
    oshape[static_cast<std::size_t>(axis)] += p.extent(axis);
  }
  Tensor y(oshape);
  const std::int64_t out_chunk = oshape[static_cast<std::size_t>(axis)] * inner;
  const std::int64_t outer = y.size() / out_chunk;
  std::int64_t dst_base = 0;
  for (const Tensor& p : parts) {
    const std::int64_t chunk = p.extent(axis) * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(p.data() + o * chunk, p.data() + (o + 1) * chunk,
                y.data() + o * out_chunk + dst_base);
    dst_base += chunk;
  }
  return y;
}

std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<std::int64_t>& extents) {
  const int rank = x.rank();
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) raise(ErrorCode::Argument, "split axis out of range");
  std::int64_t total = 0;
  for (std::int64_t e : extents) total += e;
  if (total != x.extent(axis))
    raise(ErrorCode::Shape, "split extents sum to " + std::to_string(total) + ", axis has " +
                                std::to_string(x.extent(axis)));
  std::int64_t inner = 1;
  for (int a = axis + 1; a < rank; ++a) inner *= x.extent(a);
  const std::int64_t in_chunk = x.extent(axis) * inner;
  const std::int64_t outer = x.size() / in_chunk;
  std::vector<Tensor> parts;
  parts.reserve(extents.size());
  std::int64_t src_base = 0;
  for (std::int64_t e : extents) {
    Shape pshape = x.shape();
    pshape[static_cast<std::size_t>(axis)] = e;
    Tensor p(pshape);
    const std::int64_t chunk = e * inner;
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(x.data() + o * in_chunk + src_base, x.data() + o * in_chunk + src_base + chunk,
                p.data() + o * chunk);
    src_base += chunk;
    parts.push_back(std::move(p));
  }
  return parts;
}

Tensor bias_add_channels(const Tensor& x, const Tensor& b) {
  if (x.rank() != 4) raise(ErrorCode::Shape, "bias_add_channels expects rank-4");
  if (b.rank() != 1 || b.extent(0) != x.extent(1))
    raise(ErrorCode::Shape, "bias must be rank-1 of " + std::to_string(x.extent(1)));
  Tensor y = x;
  const std::int64_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      double* p = y.data() + (i * c + ch) * hw;
      for (std::int64_t k = 0; k < hw; ++k) p[k] += b[ch];
    }
  return y;
}

Tensor bias_add_channels_vjp(const Tensor& x, const Tensor& gy) {
  require_same_shape(x, gy, "bias_add_channels vjp");
  const std::int64_t n = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
  Tensor gb({c});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t ch = 0; ch < c; ++ch) {
      const double* p = gy.data() + (i * c + ch) * hw;
      double sum = 0.0;
      for (std::int64_t k = 0; k < hw; ++k) sum += p[k];
      gb[ch] += sum;
    }
  return gb;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) raise(ErrorCode::Shape, "linear weight must be rank-2");
  const std::int64_t in = w.extent(1), outd = w.extent(0);
  if (x.extent(x.rank() - 1) != in)
    raise(ErrorCode::Shape, "linear input last extent " + std::to_string(x.extent(x.rank() - 1)) +
                                " != weight in extent " + std::to_string(in));
  if (!b.empty() && (b.rank() != 1 || b.extent(0) != outd))
    raise(ErrorCode::Shape, "linear bias must be rank-1 of " + std::to_string(outd));
  const std::int64_t rows = x.size() / in;
  Shape oshape = x.shape();
  oshape.back() = outd;
  Tensor y(oshape);
  ConstRowMap xm(x.data(), rows, in);
  ConstRowMap wm(w.data(), outd, in);
  RowMap ym(y.data(), rows, outd);
  ym.noalias() = xm * wm.transpose();
  if (!b.empty())
    ym.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b.data(), outd);
  return y;
}

LinearGrads linear_vjp(const Tensor& x, const Tensor& w, const Tensor& b, const Tensor& gy) {
  const std::int64_t in = w.extent(1), outd = w.extent(0);
  const std::int64_t rows = x.size() / in;
  if (gy.size() != rows * outd) raise(ErrorCode::Shape, "linear cotangent has wrong count");
  LinearGrads out{Tensor(x.shape()), Tensor(w.shape()),
                  b.empty() ? Tensor() : Tensor(b.shape())};
  ConstRowMap xm(x.data(), rows, in);
  ConstRowMap wm(w.data(), outd, in);
  ConstRowMap gym(gy.data(), rows, outd);
  RowMap gxm(out.gx.data(), rows, in);
  RowMap gwm(out.gw.data(), outd, in);
  gxm.noalias() = gym * wm;
  gwm.noalias() = gym.transpose() * xm;
  if (!b.empty())
    Eigen::Map<Eigen::RowVectorXd>(out.gb.data(), outd) = gym.colwise().sum();
  return out;
}

const std::vector<std::string>& registered_ops() {
  static const std::vector<std::string> ids = {
      "conv2d", "matmul",     "softmax", "bilinear_sample", "add",     "mul",
      "abs",    "sigmoid",    "layer_norm", "upsample",     "pooling"};
  return ids;
}

bool op_registered(const std::string& op) {
  const auto& ids = registered_ops();
  return std::find(ids.begin(), ids.end(), op) != ids.end();
}

namespace {

void need(const std::vector<Tensor>& inputs, std::size_t n, const std::string& op) {
  if (inputs.size() != n)
    raise(ErrorCode::Argument, op + " takes " + std::to_string(n) + " inputs, got " +
                                   std::to_string(inputs.size()));
}

}  // namespace

Tensor op_forward(const std::string& op, const std::vector<Tensor>& inputs,
                  const OpAttrs& attrs) {
  if (op == "conv2d") {
    need(inputs, 2, op);
    return conv2d(inputs[0], inputs[1], attrs.conv);
  }
  if (op == "matmul") {
    need(inputs, 2, op);
    return matmul(inputs[0], inputs[1]);
  }
  if (op == "softmax") {
    need(inputs, 1, op);
    return softmax(inputs[0], attrs.axis);
  }
  if (op == "bilinear_sample") {
    need(inputs, 2, op);
    return bilinear_sample(inputs[0], inputs[1]);
  }
  if (op == "add") {
    need(inputs, 2, op);
    return add(inputs[0], inputs[1]);
  }
  if (op == "mul") {
    need(inputs, 2, op);
    return mul(inputs[0], inputs[1]);
  }
  if (op == "abs") {
    need(inputs, 1, op);
    return abs(inputs[0]);
  }
  if (op == "sigmoid") {
    need(inputs, 1, op);
    return sigmoid(inputs[0]);
  }
  if (op == "layer_norm") {
    need(inputs, 3, op);
    return layer_norm(inputs[0], inputs[1], inputs[2]);
  }
  if (op == "upsample") {
    need(inputs, 1, op);
    return upsample2x(inputs[0]);
  }
  if (op == "pooling") {
    need(inputs, 1, op);
    return global_avg_pool(inputs[0]);
  }
  raise(ErrorCode::UnsupportedOp, "no registered op '" + op + "'");
}

std::vector<Tensor> op_vjp(const std::string& op, const std::vector<Tensor>& inputs,
                           const Tensor& cotangent, const OpAttrs& attrs) {
  if (op == "conv2d") {
    need(inputs, 2, op);
    Conv2dGrads g = conv2d_vjp(inputs[0], inputs[1], attrs.conv, cotangent);
    return {std::move(g.gx), std::move(g.gw)};
  }
  if (op == "matmul") {
    need(inputs, 2, op);
    MatmulGrads g = matmul_vjp(inputs[0], inputs[1], cotangent);
    return {std::move(g.ga), std::move(g.gb)};
  }
  if (op == "softmax") {
    need(inputs, 1, op);
    return {softmax_vjp(inputs[0], attrs.axis, cotangent)};
  }
  if (op == "bilinear_sample") {
    need(inputs, 2, op);
    BilinearGrads g = bilinear_sample_vjp(inputs[0], inputs[1], cotangent);
    return {std::move(g.gx), std::move(g.gpoints)};
  }
  if (op == "add") {
    need(inputs, 2, op);
    require_same_shape(inputs[0], cotangent, "add vjp");
    return {cotangent, cotangent};
  }
  if (op == "mul") {
    need(inputs, 2, op);
    return {mul(cotangent, inputs[1]), mul(cotangent, inputs[0])};
  }
  if (op == "abs") {
    need(inputs, 1, op);
    require_same_shape(inputs[0], cotangent, "abs vjp");
    Tensor gx(inputs[0].shape());
    for (std::int64_t i = 0; i < gx.size(); ++i) {
      const double v = inputs[0][i];
      gx[i] = v > 0.0 ? cotangent[i] : (v < 0.0 ? -cotangent[i] : 0.0);
    }
    return {std::move(gx)};
  }
  if (op == "sigmoid") {
    need(inputs, 1, op);
    return {sigmoid_vjp(inputs[0], cotangent)};
  }
  if (op == "layer_norm") {
    need(inputs, 3, op);
    LayerNormGrads g = layer_norm_vjp(inputs[0], inputs[1], inputs[2], cotangent);
    return {std::move(g.gx), std::move(g.ggamma), std::move(g.gbeta)};
  }
  if (op == "upsample") {
    need(inputs, 1, op);
    return {upsample2x_vjp(inputs[0], cotangent)};
  }
  if (op == "pooling") {
    need(inputs, 1, op);
    return {global_avg_pool_vjp(inputs[0], cotangent)};
  }
  raise(ErrorCode::UnsupportedOp, "no registered op '" + op + "'");
}

}  // namespace wdfq
