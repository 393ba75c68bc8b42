#include "wdfq/gradcheck.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "wdfq/backbone.hpp"
#include "wdfq/config.hpp"
#include "wdfq/detect.hpp"
#include "wdfq/errors.hpp"
#include "wdfq/fqs.hpp"
#include "wdfq/hfe.hpp"
#include "wdfq/hfsr.hpp"
#include "wdfq/lfha.hpp"
#include "wdfq/ops.hpp"
#include "wdfq/pipeline.hpp"
#include "wdfq/rng.hpp"
#include "wdfq/wavelet.hpp"

namespace wdfq {

namespace {

// Non-overlapping search window per instance: factories resample kink-guarded
// draws by stepping the seed, and 1009 > the largest search budget below.
std::uint64_t case_seed(std::uint64_t seed, int index) {
  return seed + static_cast<std::uint64_t>(index) * 1009ull;
}

Tensor rnd(Shape shape, std::uint64_t seed, const std::string& name, double bound = 1.0) {
  Tensor t(std::move(shape));
  CounterRng rng(seed, "gradcheck." + name);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.uniform_signed(i, bound);
  return t;
}

double min_abs(const Tensor& t) { return t.as_vector().cwiseAbs().minCoeff(); }

void randomize(ParamStore& ps, const std::string& name, std::uint64_t seed, double bound) {
  Tensor& t = ps.get(name);
  t = rnd(t.shape(), seed, name, bound);
}

// Zero-initialized biases leave whole relu windows sitting exactly on the
// hinge (a saturated patch feeds the next conv a hard 0 + 0 bias), so the
// deep composite cases draw every bias and norm gain from a small range.
void randomize_zero_init(ParamStore& ps, std::uint64_t seed) {
  for (auto& [name, t] : ps.all()) {
    const std::string tail = name.substr(name.rfind('.') + 1);
    if (tail == "b" || tail == "b1" || tail == "b2" || tail == "g")
      t = rnd(t.shape(), seed, name, 0.1);
  }
}

// Runs `attempt` with s0, s0+1, ... until it accepts a draw. A draw sitting
// on a kink (relu zero, L1 tie, selection tie, bilinear lattice line) would
// turn the central difference into a one-sided slope, so those are skipped.
std::uint64_t search(std::uint64_t s0, const char* what,
                     const std::function<bool(std::uint64_t)>& attempt, int budget = 500) {
  for (int a = 0; a < budget; ++a)
    if (attempt(s0 + static_cast<std::uint64_t>(a))) return s0 + static_cast<std::uint64_t>(a);
  raise(ErrorCode::Numeric,
        std::string("gradcheck ") + what + ": no kink-free draw in " + std::to_string(budget) +
            " attempts");
}

Tensor flat_pair(const Tensor& a, const Tensor& b) {
  Tensor f({a.size() + b.size()});
  for (std::int64_t i = 0; i < a.size(); ++i) f[i] = a[i];
  for (std::int64_t i = 0; i < b.size(); ++i) f[a.size() + i] = b[i];
  return f;
}

Tensor flat_triple(const Tensor& a, const Tensor& b, const Tensor& c) {
  return flat_pair(flat_pair(a, b), c);
}

// --- kink-distance helpers -------------------------------------------------

double min_topk_gap(const Tensor& scores, std::int64_t k) {
  double gap = 1e300;
  const std::int64_t n = scores.extent(0), t = scores.extent(1);
  for (std::int64_t b = 0; b < n; ++b) {
    std::vector<double> row(static_cast<std::size_t>(t));
    for (std::int64_t i = 0; i < t; ++i) row[static_cast<std::size_t>(i)] = scores.at(b, i);
    std::sort(row.begin(), row.end(), std::greater<double>());
    const std::int64_t stop = std::min(k, t - 1);
    for (std::int64_t i = 0; i < stop; ++i)
      gap = std::min(gap, row[static_cast<std::size_t>(i)] - row[static_cast<std::size_t>(i + 1)]);
  }
  return gap;
}

// Distance of every sampling coordinate from the bilinear lattice kinks.
double min_frac_margin(const FacaCtx& c) {
  double m = 1e300;
  for (std::size_t mi = 0; mi < 6; ++mi) {
    const double w = static_cast<double>(c.maps[mi].extent(3));
    const double h = static_cast<double>(c.maps[mi].extent(2));
    const Tensor& pt = c.pts[mi];
    for (std::int64_t r = 0; r < pt.size(); r += 2) {
      const double u = pt[r] * w - 0.5, v = pt[r + 1] * h - 0.5;
      m = std::min(m, std::abs(u - std::round(u)));
      m = std::min(m, std::abs(v - std::round(v)));
    }
  }
  return m;
}

double clamp_margin(const Tensor& pre, double bound) {
  double m = 1e300;
  for (std::int64_t i = 0; i < pre.size(); ++i)
    m = std::min(m, std::abs(std::abs(pre[i]) - bound));
  return m;
}

double decode_guard_margin(const DecodeCtx& c) {
  double m = 1e300;
  for (const DecodeLayerCtx& l : c.layers) {
    m = std::min(m, min_abs(l.pos.pre1));
    m = std::min(m, min_abs(l.ffn_pre1));
    m = std::min(m, min_frac_margin(l.cross));
    m = std::min(m, clamp_margin(l.logits_sum, 8.0));
  }
  return m;
}

double fusion_pre_margin(const FusionCtx& f) {
  double m = 1e300;
  for (const Tensor& pre : f.pre) m = std::min(m, min_abs(pre));
  return m;
}

double hfe_guard_margin(const HfeStreamCtx& c) {
  double m = 1e300;
  for (const FusionCtx* f : {&c.fpn.fus4, &c.fpn.fus3, &c.pan.fus4, &c.pan.fus5})
    m = std::min(m, fusion_pre_margin(*f));
  return m;
}

double backbone_pre_margin(const BackboneCtx& c) {
  double m = min_abs(c.stem.pre);
  for (const StageCtx* s : {&c.s2, &c.s3, &c.s4, &c.s5}) {
    m = std::min(m, min_abs(s->down.pre));
    for (const auto& b : s->blocks) m = std::min(m, min_abs(b.pre));
  }
  return m;
}

// Smallest |fh - G_k(target)| over both targets and all bank scales; the L1
// consistency terms kink where a residual crosses zero.
double consistency_residual_margin(const Tensor& fh, const Tensor& fh_r, const Tensor& fh_i) {
  double m = 1e300;
  for (int k = 1; k <= 3; ++k)
    for (const Tensor* t : {&fh_r, &fh_i}) {
      Tensor gk = grad_bank(*t, k);
      for (std::int64_t i = 0; i < fh.size(); ++i)
        m = std::min(m, std::fabs(fh[i] - gk[i]));
    }
  return m;
}

// Smallest |sobel| response over both axes and all bank scales; the bank
// magnitudes kink where a response crosses zero. Meaningless for single-pixel
// maps, whose responses are identically zero for any value.
double min_sobel_response(const Tensor& t) {
  double m = 1e300;
  for (int k = 1; k <= 3; ++k)
    m = std::min({m, min_abs(sobel_dx(t, k)), min_abs(sobel_dy(t, k))});
  return m;
}

// --- detection-loss kink helpers --------------------------------------------

std::array<double, 4> corners(const Box& b) {
  return {b.cx - 0.5 * b.w, b.cy - 0.5 * b.h, b.cx + 0.5 * b.w, b.cy + 0.5 * b.h};
}

// Distance from the min/max corner ties and the empty-intersection boundary.
double giou_kink_margin(const Box& a, const Box& b) {
  const auto ca = corners(a), cb = corners(b);
  double m = 1e300;
  for (int i = 0; i < 4; ++i) m = std::min(m, std::abs(ca[i] - cb[i]));
  const double iw = std::min(ca[2], cb[2]) - std::max(ca[0], cb[0]);
  const double ih = std::min(ca[3], cb[3]) - std::max(ca[1], cb[1]);
  return std::min({m, std::abs(iw), std::abs(ih)});
}

Box row_box(const Tensor& boxes, std::int64_t q) {
  return Box{boxes.at(q, 0), boxes.at(q, 1), boxes.at(q, 2), boxes.at(q, 3)};
}

double sig(double v) { return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

// Matching cost replicated from the head: cls + l1 + giou terms per
// (query, gt) pair.
Tensor match_cost(const Tensor& logits, const Tensor& boxes, const std::vector<GtItem>& gts,
                  const MatchWeights& w) {
  const std::int64_t k = logits.extent(0), g = static_cast<std::int64_t>(gts.size());
  Tensor cost({k, g});
  for (std::int64_t q = 0; q < k; ++q)
    for (std::int64_t j = 0; j < g; ++j) {
      const Box bq = row_box(boxes, q);
      const Box& bg = gts[static_cast<std::size_t>(j)].box;
      double l1 = std::fabs(bq.cx - bg.cx) + std::fabs(bq.cy - bg.cy) +
                  std::fabs(bq.w - bg.w) + std::fabs(bq.h - bg.h);
      const double p = sig(logits.at(q, gts[static_cast<std::size_t>(j)].class_id));
      cost.at(q, j) = w.cls * (1.0 - p) + w.l1 * l1 + w.giou * (1.0 - giou(bq, bg));
    }
  return cost;
}

void assignment_totals(const Tensor& cost, std::int64_t g, std::uint64_t used, double acc,
                       std::vector<double>& totals) {
  const std::int64_t nq = cost.extent(0), ng = cost.extent(1);
  if (g == ng) {
    totals.push_back(acc);
    return;
  }
  for (std::int64_t q = 0; q < nq; ++q) {
    if (used & (1ull << q)) continue;
    assignment_totals(cost, g + 1, used | (1ull << q), acc + cost.at(q, g), totals);
  }
}

// Gap between the optimal assignment total and the best strictly different
// one; a perturbation smaller than the gap cannot flip the matching.
double match_gap(const Tensor& cost) {
  std::vector<double> totals;
  assignment_totals(cost, 0, 0, 0.0, totals);
  std::sort(totals.begin(), totals.end());
  for (const double t : totals)
    if (t > totals.front() + 1e-12) return t - totals.front();
  return 0.0;
}

double matched_pair_margin(const Tensor& boxes, const std::vector<GtItem>& gts,
                           const std::vector<std::int64_t>& assignment) {
  double m = 1e300;
  for (std::size_t j = 0; j < gts.size(); ++j) {
    const Box bq = row_box(boxes, assignment[j]);
    const Box& bg = gts[j].box;
    m = std::min(m, giou_kink_margin(bq, bg));
    for (const double d : {bq.cx - bg.cx, bq.cy - bg.cy, bq.w - bg.w, bq.h - bg.h})
      m = std::min(m, std::fabs(d));
  }
  return m;
}

// --- registered-kernel cases -------------------------------------------------

FdCase op_case(const std::string& op, std::vector<Tensor> inputs, const OpAttrs& attrs,
               std::uint64_t cot_seed, std::vector<std::int64_t> strides = {}) {
  FdCase fd;
  Tensor y = op_forward(op, inputs, attrs);
  fd.cotangent = rnd(y.shape(), cot_seed, op + ".cot");
  fd.analytic = op_vjp(op, inputs, fd.cotangent, attrs);
  fd.inputs = std::move(inputs);
  fd.probe_stride = std::move(strides);
  fd.forward = [op, attrs](const std::vector<Tensor>& in) { return op_forward(op, in, attrs); };
  return fd;
}

FdCase conv2d_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  OpAttrs attrs;
  Tensor x, w;
  switch (index % 4) {
    case 0:
      attrs.conv = Conv2dSpec{1, 1, 1, 1, false};
      x = rnd({1, 3, 5, 5}, s, "conv.x");
      w = rnd({2, 3, 3, 3}, s, "conv.w");
      break;
    case 1:
      attrs.conv = Conv2dSpec{2, 1, 1, 1, false};
      x = rnd({2, 2, 5, 6}, s, "conv.x");
      w = rnd({3, 2, 3, 3}, s, "conv.w");
      break;
    case 2:
      attrs.conv = Conv2dSpec{1, 1, 1, 4, false};
      x = rnd({1, 4, 4, 4}, s, "conv.x");
      w = rnd({4, 1, 3, 3}, s, "conv.w");
      break;
    default:
      attrs.conv = Conv2dSpec{1, 2, 2, 1, true};
      x = rnd({1, 2, 5, 5}, s, "conv.x");
      w = rnd({2, 2, 3, 3}, s, "conv.w");
      break;
  }
  return op_case("conv2d", {std::move(x), std::move(w)}, attrs, s + 7, {2, 1});
}

FdCase matmul_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor a, b;
  switch (index % 3) {
    case 0:
      a = rnd({2, 3, 4}, s, "mm.a");
      b = rnd({2, 4, 5}, s, "mm.b");
      break;
    case 1:
      a = rnd({2, 3, 4}, s, "mm.a");
      b = rnd({1, 4, 5}, s, "mm.b");
      break;
    default:
      a = rnd({3, 4}, s, "mm.a");
      b = rnd({4, 5}, s, "mm.b");
      break;
  }
  return op_case("matmul", {std::move(a), std::move(b)}, OpAttrs{}, s + 7);
}

FdCase softmax_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  OpAttrs attrs;
  attrs.axis = index % 2 == 0 ? 2 : 1;
  return op_case("softmax", {rnd({2, 3, 5}, s, "sm.x", 2.0)}, attrs, s + 7);
}

FdCase bilinear_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  Tensor x, pts;
  search(s0, "bilinear_sample", [&](std::uint64_t s) {
    x = rnd({1, 2, 5, 6}, s, "bl.x");
    pts = rnd({1, 7, 2}, s, "bl.p", 0.4);
    for (std::int64_t i = 0; i < pts.size(); ++i) pts[i] += 0.5;
    double m = 1e300;
    for (std::int64_t r = 0; r < pts.size(); r += 2) {
      const double u = pts[r] * 6.0 - 0.5, v = pts[r + 1] * 5.0 - 0.5;
      m = std::min(m, std::abs(u - std::round(u)));
      m = std::min(m, std::abs(v - std::round(v)));
    }
    return m > 1e-3;
  });
  return op_case("bilinear_sample", {std::move(x), std::move(pts)}, OpAttrs{}, s0 + 7);
}

FdCase add_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  return op_case("add", {rnd({2, 3, 4}, s, "add.a"), rnd({2, 3, 4}, s, "add.b")}, OpAttrs{},
                 s + 7);
}

FdCase mul_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  return op_case("mul", {rnd({2, 3, 4}, s, "mul.a"), rnd({2, 3, 4}, s, "mul.b")}, OpAttrs{},
                 s + 7);
}

FdCase abs_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  Tensor x;
  search(s0, "abs", [&](std::uint64_t s) {
    x = rnd({2, 3, 4}, s, "abs.x");
    return min_abs(x) > 1e-3;
  });
  return op_case("abs", {std::move(x)}, OpAttrs{}, s0 + 7);
}

FdCase sigmoid_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  return op_case("sigmoid", {rnd({2, 3, 4}, s, "sig.x", 3.0)}, OpAttrs{}, s + 7);
}

FdCase layer_norm_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  return op_case("layer_norm",
                 {rnd({2, 3, 6}, s, "ln.x"), rnd({6}, s, "ln.g", 0.5), rnd({6}, s, "ln.b", 0.5)},
                 OpAttrs{}, s + 7);
}

FdCase upsample_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  return op_case("upsample", {rnd({1, 2, 3, 4}, s, "up.x")}, OpAttrs{}, s + 7);
}

FdCase pooling_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  return op_case("pooling", {rnd({2, 3, 4, 5}, s, "gap.x")}, OpAttrs{}, s + 7);
}

// --- non-dispatch kernels ----------------------------------------------------

FdCase relu_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  Tensor x;
  search(s0, "relu", [&](std::uint64_t s) {
    x = rnd({2, 3, 4}, s, "relu.x");
    return min_abs(x) > 1e-3;
  });
  FdCase fd;
  fd.cotangent = rnd(x.shape(), s0 + 7, "relu.cot");
  fd.analytic = {relu_vjp(x, fd.cotangent)};
  fd.inputs = {std::move(x)};
  fd.forward = [](const std::vector<Tensor>& in) { return relu(in[0]); };
  return fd;
}

FdCase linear_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor x = rnd({2, 3, 5}, s, "lin.x");
  Tensor w = rnd({4, 5}, s, "lin.w");
  Tensor b = rnd({4}, s, "lin.b");
  FdCase fd;
  fd.cotangent = rnd({2, 3, 4}, s + 7, "lin.cot");
  LinearGrads g = linear_vjp(x, w, b, fd.cotangent);
  fd.analytic = {g.gx, g.gw, g.gb};
  fd.inputs = {std::move(x), std::move(w), std::move(b)};
  fd.forward = [](const std::vector<Tensor>& in) { return linear(in[0], in[1], in[2]); };
  return fd;
}

FdCase bias_add_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor x = rnd({2, 3, 4, 5}, s, "bias.x");
  Tensor b = rnd({3}, s, "bias.b");
  FdCase fd;
  fd.cotangent = rnd(x.shape(), s + 7, "bias.cot");
  fd.analytic = {fd.cotangent, bias_add_channels_vjp(x, fd.cotangent)};
  fd.inputs = {std::move(x), std::move(b)};
  fd.probe_stride = {3, 1};
  fd.forward = [](const std::vector<Tensor>& in) { return bias_add_channels(in[0], in[1]); };
  return fd;
}

FdCase avg_pool_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor x = rnd({1, 3, 4, 6}, s, "avg.x");
  FdCase fd;
  fd.cotangent = rnd({1, 3, 2, 3}, s + 7, "avg.cot");
  fd.analytic = {avg_pool2x_vjp(x, fd.cotangent)};
  fd.inputs = {std::move(x)};
  fd.forward = [](const std::vector<Tensor>& in) { return avg_pool2x(in[0]); };
  return fd;
}

FdCase reduce_high_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor lh = rnd({1, 2, 4, 4}, s, "rh.lh");
  Tensor hl = rnd({1, 2, 4, 4}, s, "rh.hl");
  Tensor hh = rnd({1, 2, 4, 4}, s, "rh.hh");
  Tensor w = rnd({2, 6, 1, 1}, s, "rh.w");
  Tensor b = rnd({2}, s, "rh.b");
  FdCase fd;
  fd.cotangent = rnd({1, 2, 4, 4}, s + 7, "rh.cot");
  ReduceHighGrads g = reduce_high_vjp(lh, hl, hh, w, b, fd.cotangent);
  fd.analytic = {g.glh, g.ghl, g.ghh, g.gw, g.gb};
  fd.inputs = {std::move(lh), std::move(hl), std::move(hh), std::move(w), std::move(b)};
  fd.probe_stride = {2, 2, 2, 1, 1};
  fd.forward = [](const std::vector<Tensor>& in) {
    return reduce_high(in[0], in[1], in[2], in[3], in[4]);
  };
  return fd;
}

// --- alignment stage ----------------------------------------------------------

FdCase eca_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor x = rnd({2, 4, 2, 3}, s, "eca.x");
  Tensor k = rnd({3}, s, "eca.k");
  EcaCtx ctx;
  Tensor y = eca(x, k, &ctx);
  FdCase fd;
  fd.cotangent = rnd(y.shape(), s + 7, "eca.cot");
  EcaGrads g = eca_vjp(ctx, k, fd.cotangent);
  fd.analytic = {g.gx, g.gkernel};
  fd.inputs = {std::move(x), std::move(k)};
  fd.forward = [](const std::vector<Tensor>& in) { return eca(in[0], in[1]); };
  return fd;
}

FdCase cross_modal_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor fq = rnd({1, 3, 2, 2}, s, "cma.q");
  Tensor fkv = rnd({1, 3, 2, 2}, s, "cma.kv");
  Tensor wf = rnd({3, 3}, s, "cma.wf");
  Tensor wg = rnd({3, 3}, s, "cma.wg");
  Tensor wh = rnd({3, 3}, s, "cma.wh");
  Tensor wproj = rnd({3, 3}, s, "cma.wp");
  Tensor bproj = rnd({3}, s, "cma.bp");
  CrossModalParams p{&wf, &wg, &wh, &wproj, &bproj};
  CrossModalCtx ctx;
  Tensor y = cross_modal_align(fq, fkv, p, &ctx);
  FdCase fd;
  fd.cotangent = rnd(y.shape(), s + 7, "cma.cot");
  CrossModalGrads g = cross_modal_align_vjp(ctx, p, fd.cotangent);
  fd.analytic = {g.gfl_q, g.gfl_kv, g.gwf, g.gwg, g.gwh, g.gwproj, g.gbproj};
  fd.inputs = {std::move(fq), std::move(fkv), std::move(wf), std::move(wg),
               std::move(wh), std::move(wproj), std::move(bproj)};
  fd.forward = [](const std::vector<Tensor>& in) {
    CrossModalParams q{&in[2], &in[3], &in[4], &in[5], &in[6]};
    return cross_modal_align(in[0], in[1], q);
  };
  return fd;
}

FdCase lfha_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  ParamStore ps(s);
  lfha_register_shared(ps);
  lfha_register(ps, 3, 4);
  Tensor ll_ir = rnd({1, 4, 2, 2}, s, "lfha.ir");
  Tensor ll_rgb = rnd({1, 4, 2, 2}, s, "lfha.rgb");
  LfhaCtx ctx;
  lfha_apply(ll_ir, ll_rgb, ps, 3, &ctx);
  FdCase fd;
  fd.cotangent = rnd({1, 4, 2, 2}, s + 7, "lfha.cot");
  GradStore gs;
  LfhaGrads g = lfha_backward(ctx, ps, 3, fd.cotangent, gs);
  const std::vector<std::string> probed = {"lfha.l3.g.w", "lfha.eca.ir.k"};
  fd.inputs = {ll_ir, ll_rgb};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {g.gll_ir, g.gll_rgb};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.forward = [ps, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[2 + i];
    return lfha_apply(in[0], in[1], local, 3);
  };
  return fd;
}

// --- retention stage ------------------------------------------------------------

FdCase multiscale_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor x = rnd({1, 2, 4, 4}, s, "ms.x");
  Tensor w1 = rnd({2, 2, 1, 1}, s, "ms.w1");
  Tensor w3 = rnd({2, 2, 3, 3}, s, "ms.w3");
  Tensor w5 = rnd({2, 2, 5, 5}, s, "ms.w5");
  MultiscaleParams p{&w1, &w3, &w5};
  MultiscaleCtx ctx;
  Tensor y = multiscale_conv(x, p, &ctx);
  FdCase fd;
  fd.cotangent = rnd(y.shape(), s + 7, "ms.cot");
  MultiscaleGrads g = multiscale_conv_vjp(ctx, p, fd.cotangent);
  fd.analytic = {g.gx, g.gw1, g.gw3, g.gw5};
  fd.inputs = {std::move(x), std::move(w1), std::move(w3), std::move(w5)};
  fd.probe_stride = {1, 1, 2, 5};
  fd.forward = [](const std::vector<Tensor>& in) {
    MultiscaleParams q{&in[1], &in[2], &in[3]};
    return multiscale_conv(in[0], q);
  };
  return fd;
}

FdCase hog_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  Tensor x;
  search(s0, "hog_enhance", [&](std::uint64_t s) {
    x = rnd({1, 2, 5, 5}, s, "hog.x", 2.0);
    return grad_bank(x, 1).as_vector().minCoeff() > 0.5;
  });
  HogCtx ctx;
  hog_enhance(x, &ctx);
  FdCase fd;
  fd.cotangent = rnd(x.shape(), s0 + 7, "hog.cot");
  fd.analytic = {hog_enhance_vjp(ctx, fd.cotangent)};
  fd.inputs = {std::move(x)};
  fd.forward = [](const std::vector<Tensor>& in) { return hog_enhance(in[0]); };
  return fd;
}

FdCase fuse_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  Tensor a = rnd({1, 2, 3, 4}, s, "fuse.a");
  Tensor b = rnd({1, 2, 3, 4}, s, "fuse.b");
  Tensor dw = rnd({4, 1, 3, 3}, s, "fuse.dw");
  Tensor pw = rnd({2, 4, 1, 1}, s, "fuse.pw");
  FuseParams p{&dw, &pw};
  FuseCtx ctx;
  Tensor y = fuse_specific(a, b, p, &ctx);
  FdCase fd;
  fd.cotangent = rnd(y.shape(), s + 7, "fuse.cot");
  FuseGrads g = fuse_specific_vjp(ctx, p, fd.cotangent);
  fd.analytic = {g.ga, g.gb, g.gdw, g.gpw};
  fd.inputs = {std::move(a), std::move(b), std::move(dw), std::move(pw)};
  fd.forward = [](const std::vector<Tensor>& in) {
    FuseParams q{&in[2], &in[3]};
    return fuse_specific(in[0], in[1], q);
  };
  return fd;
}

FdCase grad_consistency_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  Tensor fh, fr, fi;
  search(s0, "grad_consistency_loss", [&](std::uint64_t s) {
    fh = rnd({1, 2, 4, 4}, s, "gcl.fh", 4.0);
    fr = rnd({1, 2, 4, 4}, s, "gcl.fr");
    fi = rnd({1, 2, 4, 4}, s, "gcl.fi");
    if (consistency_residual_margin(fh, fr, fi) < 1e-3) return false;
    return std::min(min_sobel_response(fr), min_sobel_response(fi)) > 1e-3;
  });
  Tensor gfh, gfr, gfi;
  grad_consistency_loss(fh, fr, fi, &gfh, &gfr, &gfi);
  FdCase fd;
  fd.cotangent = Tensor::full({1}, 1.0);
  fd.analytic = {std::move(gfh), std::move(gfr), std::move(gfi)};
  fd.inputs = {std::move(fh), std::move(fr), std::move(fi)};
  fd.forward = [](const std::vector<Tensor>& in) {
    Tensor out(Shape{1});
    out[0] = grad_consistency_loss(in[0], in[1], in[2]);
    return out;
  };
  return fd;
}

FdCase hfsr_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  ParamStore ps(s0);
  hfsr_register(ps, 4, 2);
  MultiscaleParams mp{&ps.get("hfsr.l4.ms1.w"), &ps.get("hfsr.l4.ms3.w"),
                      &ps.get("hfsr.l4.ms5.w")};
  Tensor fh_r, fh_i;
  search(s0, "hfsr", [&](std::uint64_t s) {
    fh_r = rnd({1, 2, 4, 4}, s, "hfsr.r", 3.0);
    fh_i = rnd({1, 2, 4, 4}, s, "hfsr.i", 3.0);
    const double mr = grad_bank(multiscale_conv(fh_r, mp), 1).as_vector().minCoeff();
    const double mi = grad_bank(multiscale_conv(fh_i, mp), 1).as_vector().minCoeff();
    return std::min(mr, mi) > 0.5;
  });
  HfsrCtx ctx;
  hfsr_apply(fh_r, fh_i, ps, 4, &ctx);
  FdCase fd;
  fd.cotangent = rnd(fh_r.shape(), s0 + 7, "hfsr.cot");
  GradStore gs;
  HfsrGrads g = hfsr_backward(ctx, ps, 4, fd.cotangent, gs);
  const std::vector<std::string> probed = {"hfsr.l4.ms3.w", "hfsr.l4.dw.w", "hfsr.l4.pw.w"};
  fd.inputs = {fh_r, fh_i};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {g.gfh_r, g.gfh_i};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {2, 2, 3, 2, 1};
  fd.forward = [ps, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[2 + i];
    return hfsr_apply(in[0], in[1], local, 4);
  };
  return fd;
}

// --- enhancement stage -----------------------------------------------------------

HfeConfig tiny_hfe() {
  HfeConfig cfg;
  cfg.c3 = 2;
  cfg.c4 = 3;
  cfg.c5 = 4;
  cfg.ce = 3;
  cfg.heads = 2;
  cfg.rep_blocks = 1;
  return cfg;
}

struct HfePyramids {
  Pyramid freq, spatial;
};

HfePyramids hfe_pyramids(const HfeConfig& cfg, std::uint64_t s, std::int64_t h3) {
  HfePyramids p;
  p.freq.l3 = rnd({1, cfg.c3, h3, h3}, s, "hfe.f3");
  p.freq.l4 = rnd({1, cfg.c4, h3 / 2, h3 / 2}, s, "hfe.f4");
  p.freq.l5 = rnd({1, cfg.c5, h3 / 4, h3 / 4}, s, "hfe.f5");
  p.spatial.l3 = rnd({1, cfg.c3, h3, h3}, s, "hfe.s3");
  p.spatial.l4 = rnd({1, cfg.c4, h3 / 2, h3 / 2}, s, "hfe.s4");
  p.spatial.l5 = rnd({1, cfg.c5, h3 / 4, h3 / 4}, s, "hfe.s5");
  return p;
}

FdCase attention_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  HfeConfig cfg = tiny_hfe();
  ParamStore ps(s);
  hfe_register(ps, "low", cfg);
  Tensor f5 = rnd({2, 4, 3, 3}, s, "att.x");
  MhsaCtx ctx;
  level5_self_attention(f5, ps, "low", cfg, &ctx);
  FdCase fd;
  fd.cotangent = rnd(f5.shape(), s + 7, "att.cot");
  GradStore gs;
  Tensor gf5 = level5_self_attention_vjp(ctx, ps, "low", cfg, fd.cotangent, gs);
  const std::vector<std::string> probed = {"hfe.low.att.wq", "hfe.low.att.wv"};
  fd.inputs = {f5};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {gf5};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {2, 1, 1};
  fd.forward = [ps, cfg, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[1 + i];
    return level5_self_attention(in[0], local, "low", cfg);
  };
  return fd;
}

FdCase fpn_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  HfeConfig cfg = tiny_hfe();
  ParamStore ps(s0);
  hfe_register(ps, "low", cfg);
  Tensor f5s, f4f, f4s, f3f, f3s;
  FpnCtx ctx;
  search(s0, "fpn", [&](std::uint64_t s) {
    f5s = rnd({1, cfg.c5, 1, 1}, s, "fpn.f5s");
    f4f = rnd({1, cfg.c4, 2, 2}, s, "fpn.f4f");
    f4s = rnd({1, cfg.c4, 2, 2}, s, "fpn.f4s");
    f3f = rnd({1, cfg.c3, 4, 4}, s, "fpn.f3f");
    f3s = rnd({1, cfg.c3, 4, 4}, s, "fpn.f3s");
    ctx = FpnCtx{};
    fpn_topdown(f5s, f4f, f4s, f3f, f3s, ps, "low", cfg, &ctx);
    return std::min(fusion_pre_margin(ctx.fus4), fusion_pre_margin(ctx.fus3)) > 1e-3;
  });
  FpnOutputs out = fpn_topdown(f5s, f4f, f4s, f3f, f3s, ps, "low", cfg, &ctx);
  Tensor gp4 = rnd(out.p4.shape(), s0 + 7, "fpn.gp4");
  Tensor gp3 = rnd(out.p3.shape(), s0 + 8, "fpn.gp3");
  GradStore gs;
  FpnGrads g = fpn_backward(ctx, ps, "low", cfg, gp4, gp3, gs);
  FdCase fd;
  fd.cotangent = flat_pair(gp4, gp3);
  fd.analytic = {g.gf5s, g.gf4_freq, g.gf4_spatial, g.gf3_freq, g.gf3_spatial};
  fd.inputs = {f5s, f4f, f4s, f3f, f3s};
  fd.probe_stride = {1, 2, 2, 3, 3};
  fd.forward = [ps, cfg](const std::vector<Tensor>& in) {
    FpnOutputs o = fpn_topdown(in[0], in[1], in[2], in[3], in[4], ps, "low", cfg);
    return flat_pair(o.p4, o.p3);
  };
  return fd;
}

FdCase pan_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  HfeConfig cfg = tiny_hfe();
  ParamStore ps(s0);
  hfe_register(ps, "low", cfg);
  Tensor p3, p4, f5s, f4s, f5sp;
  PanCtx ctx;
  search(s0, "pan", [&](std::uint64_t s) {
    p3 = rnd({1, cfg.ce, 4, 4}, s, "pan.p3");
    p4 = rnd({1, cfg.ce, 2, 2}, s, "pan.p4");
    f5s = rnd({1, cfg.c5, 1, 1}, s, "pan.f5s");
    f4s = rnd({1, cfg.c4, 2, 2}, s, "pan.f4s");
    f5sp = rnd({1, cfg.c5, 1, 1}, s, "pan.f5sp");
    ctx = PanCtx{};
    pan_bottomup(p3, p4, f5s, f4s, f5sp, ps, "low", cfg, &ctx);
    return std::min(fusion_pre_margin(ctx.fus4), fusion_pre_margin(ctx.fus5)) > 1e-3;
  });
  PanOutputs out = pan_bottomup(p3, p4, f5s, f4s, f5sp, ps, "low", cfg, &ctx);
  Tensor gn4 = rnd(out.n4.shape(), s0 + 7, "pan.gn4");
  Tensor gn5 = rnd(out.n5.shape(), s0 + 8, "pan.gn5");
  GradStore gs;
  PanGrads g = pan_backward(ctx, ps, "low", cfg, gn4, gn5, gs);
  FdCase fd;
  fd.cotangent = flat_pair(gn4, gn5);
  fd.analytic = {g.gp3, g.gp4, g.gf5s, g.gf4_spatial, g.gf5_spatial};
  fd.inputs = {p3, p4, f5s, f4s, f5sp};
  fd.probe_stride = {3, 2, 1, 2, 1};
  fd.forward = [ps, cfg](const std::vector<Tensor>& in) {
    PanOutputs o = pan_bottomup(in[0], in[1], in[2], in[3], in[4], ps, "low", cfg);
    return flat_pair(o.n4, o.n5);
  };
  return fd;
}

FdCase hfe_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  HfeConfig cfg = tiny_hfe();
  ParamStore ps(s0);
  hfe_register(ps, "low", cfg);
  HfePyramids pyr;
  HfeStreamCtx ctx;
  search(s0, "hfe", [&](std::uint64_t s) {
    pyr = hfe_pyramids(cfg, s, 4);
    ctx = HfeStreamCtx{};
    run_hfe(pyr.freq, pyr.spatial, ps, "low", cfg, &ctx);
    return hfe_guard_margin(ctx) > 1e-3;
  });
  HfeOutputs out = run_hfe(pyr.freq, pyr.spatial, ps, "low", cfg, &ctx);
  Tensor cot = rnd({out.p3.size() + out.n4.size() + out.n5.size()}, s0 + 7, "hfe.cot");
  Tensor gp3(out.p3.shape()), gn4(out.n4.shape()), gn5(out.n5.shape());
  for (std::int64_t i = 0; i < gp3.size(); ++i) gp3[i] = cot[i];
  for (std::int64_t i = 0; i < gn4.size(); ++i) gn4[i] = cot[gp3.size() + i];
  for (std::int64_t i = 0; i < gn5.size(); ++i) gn5[i] = cot[gp3.size() + gn4.size() + i];
  GradStore gs;
  HfeGrads g = hfe_backward(ctx, ps, "low", cfg, gp3, gn4, gn5, gs);
  const std::vector<std::string> probed = {"hfe.low.att.wv", "hfe.low.u3.w",
                                           "hfe.low.p3.proj1.w", "hfe.low.n5.rep0.w",
                                           "hfe.low.lat4.w"};
  FdCase fd;
  fd.cotangent = cot;
  fd.inputs = {pyr.freq.l3, pyr.freq.l4, pyr.freq.l5, pyr.spatial.l3, pyr.spatial.l4,
               pyr.spatial.l5};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {g.gfreq.l3, g.gfreq.l4, g.gfreq.l5, g.gspatial.l3, g.gspatial.l4,
                 g.gspatial.l5};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {5, 3, 1, 5, 3, 1, 3, 2, 2, 5, 2};
  fd.forward = [ps, cfg, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[6 + i];
    Pyramid fr{in[0], in[1], in[2]}, sp{in[3], in[4], in[5]};
    HfeOutputs o = run_hfe(fr, sp, local, "low", cfg);
    return flat_triple(o.p3.reshaped({o.p3.size()}), o.n4.reshaped({o.n4.size()}),
                       o.n5.reshaped({o.n5.size()}));
  };
  return fd;
}

// --- query selection and decoding ----------------------------------------------

FqsConfig tiny_fqs() {
  FqsConfig cfg;
  cfg.d = 8;
  cfg.ce = 3;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.layers = 2;
  cfg.queries = 4;
  return cfg;
}

struct TwoStreams {
  Pyramid low, high;
};

TwoStreams fqs_streams(const FqsConfig& cfg, std::uint64_t s, std::int64_t h3 = 4) {
  TwoStreams st;
  st.low.l3 = rnd({1, cfg.ce, h3, h3}, s, "fqs.low3");
  st.low.l4 = rnd({1, cfg.ce, h3 / 2, h3 / 2}, s, "fqs.low4");
  st.low.l5 = rnd({1, cfg.ce, h3 / 4, h3 / 4}, s, "fqs.low5");
  st.high.l3 = rnd({1, cfg.ce, h3, h3}, s, "fqs.high3");
  st.high.l4 = rnd({1, cfg.ce, h3 / 2, h3 / 2}, s, "fqs.high4");
  st.high.l5 = rnd({1, cfg.ce, h3 / 4, h3 / 4}, s, "fqs.high5");
  return st;
}

FdCase stream_gate_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  FqsConfig cfg = tiny_fqs();
  ParamStore ps(s0);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.gate.high.b1", s0 + 3, 0.3);
  Tensor tok;
  StreamGateCtx ctx;
  search(s0, "stream_gate", [&](std::uint64_t s) {
    tok = rnd({1, 5, cfg.d}, s, "sg.tok");
    ctx = StreamGateCtx{};
    stream_gate(tok, ps, "high", &ctx);
    return min_abs(ctx.pre1) > 1e-3;
  });
  FdCase fd;
  fd.cotangent = rnd({1, 1}, s0 + 7, "sg.cot");
  GradStore gs;
  fd.analytic = {stream_gate_vjp(ctx, ps, "high", fd.cotangent, gs)};
  fd.inputs = {std::move(tok)};
  fd.forward = [ps](const std::vector<Tensor>& in) { return stream_gate(in[0], ps, "high"); };
  return fd;
}

FdCase gate_streams_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  FqsConfig cfg = tiny_fqs();
  ParamStore ps(s0);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.gate.high.b1", s0 + 3, 0.3);
  randomize(ps, "fqs.gate.low.b1", s0 + 4, 0.3);
  Tensor th, tl;
  GateStreamsCtx ctx;
  search(s0, "gate_streams", [&](std::uint64_t s) {
    th = rnd({1, 5, cfg.d}, s, "gs.th");
    tl = rnd({1, 4, cfg.d}, s, "gs.tl");
    ctx = GateStreamsCtx{};
    gate_streams(th, tl, ps, &ctx);
    return std::min(min_abs(ctx.high.pre1), min_abs(ctx.low.pre1)) > 1e-3;
  });
  Tensor gy_high = rnd(th.shape(), s0 + 7, "gs.gyh");
  Tensor gy_low = rnd(tl.shape(), s0 + 8, "gs.gyl");
  GradStore gs;
  GateStreamsGrads g = gate_streams_vjp(ctx, ps, gy_high, gy_low, Tensor(), Tensor(), gs);
  const std::vector<std::string> probed = {"fqs.gate.high.w1", "fqs.gate.high.b1",
                                           "fqs.gate.high.w2", "fqs.gate.low.w2"};
  FdCase fd;
  fd.cotangent = flat_pair(gy_high, gy_low);
  fd.inputs = {th, tl};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {g.gtok_high, g.gtok_low};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {3, 3, 5, 1, 1, 1};
  fd.forward = [ps, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[2 + i];
    GatedStreams o = gate_streams(in[0], in[1], local);
    return flat_pair(o.high, o.low);
  };
  return fd;
}

FdCase select_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  FqsConfig cfg = tiny_fqs();
  ParamStore ps(s0);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.box.b", s0 + 3, 0.5);
  const std::int64_t k = cfg.queries;
  Tensor th, tl;
  SelectCtx ctx;
  search(s0, "select_queries", [&](std::uint64_t s) {
    th = rnd({1, 6, cfg.d}, s, "sel.th");
    tl = rnd({1, 5, cfg.d}, s, "sel.tl");
    ctx = SelectCtx{};
    select_queries(th, tl, ps, k, &ctx);
    return min_topk_gap(ctx.scores, k) > 1e-3 && clamp_margin(ctx.box_pre, 8.0) > 1e-3;
  });
  Tensor gz = rnd({1, k, cfg.d}, s0 + 7, "sel.gz");
  Tensor glogits = rnd({1, k, 4}, s0 + 8, "sel.gl");
  GradStore gs;
  SelectGrads g = select_queries_vjp(ctx, ps, gz, glogits, gs);
  const std::vector<std::string> probed = {"fqs.box.w", "fqs.box.b", "fqs.score.w"};
  FdCase fd;
  fd.cotangent = flat_pair(gz, glogits);
  fd.inputs = {th, tl};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  // Selection is discrete: the score weights get exactly zero gradient.
  fd.analytic = {g.gtok_high, g.gtok_low, *gs.find("fqs.box.w"), *gs.find("fqs.box.b"),
                 Tensor(ps.get("fqs.score.w").shape())};
  fd.probe_stride = {5, 5, 3, 1, 1};
  fd.forward = [ps, probed, k](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[2 + i];
    SelectedQueries o = select_queries(in[0], in[1], local, k);
    return flat_pair(o.z, o.anchor_logits);
  };
  return fd;
}

FdCase positional_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  FqsConfig cfg = tiny_fqs();
  ParamStore ps(s0);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.pos.b1", s0 + 3, 0.3);
  Tensor anchors;
  PosCtx ctx;
  search(s0, "positional_query", [&](std::uint64_t s) {
    anchors = rnd({1, 4, 4}, s, "pos.a", 0.45);
    for (std::int64_t i = 0; i < anchors.size(); ++i) anchors[i] += 0.5;
    ctx = PosCtx{};
    positional_query(anchors, ps, &ctx);
    return min_abs(ctx.pre1) > 1e-3;
  });
  FdCase fd;
  fd.cotangent = rnd({1, 4, cfg.d}, s0 + 7, "pos.cot");
  GradStore gs;
  Tensor ganchors = positional_query_vjp(ctx, ps, fd.cotangent, gs);
  const std::vector<std::string> probed = {"fqs.pos.w1", "fqs.pos.b2"};
  fd.inputs = {anchors};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {ganchors};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {1, 2, 1};
  fd.forward = [ps, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[1 + i];
    return positional_query(in[0], local);
  };
  return fd;
}

FdCase self_attention_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  FqsConfig cfg = tiny_fqs();
  ParamStore ps(s);
  fqs_register(ps, cfg);
  Tensor z = rnd({1, 4, cfg.d}, s, "sa.z");
  Tensor p = rnd({1, 4, cfg.d}, s + 1, "sa.p");
  SelfAttnCtx ctx;
  decoder_self_attention(z, p, ps, "fqs.dec0.sa.", cfg, &ctx);
  FdCase fd;
  fd.cotangent = rnd(z.shape(), s + 7, "sa.cot");
  GradStore gs;
  Tensor gp;
  Tensor gz = decoder_self_attention_vjp(ctx, ps, "fqs.dec0.sa.", cfg, fd.cotangent, gs, &gp);
  const std::vector<std::string> probed = {"fqs.dec0.sa.wq", "fqs.dec0.sa.wo"};
  fd.inputs = {z, p};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {gz, gp};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {1, 1, 3, 3};
  fd.forward = [ps, cfg, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[2 + i];
    return decoder_self_attention(in[0], in[1], local, "fqs.dec0.sa.", cfg);
  };
  return fd;
}

FdCase faca_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  FqsConfig cfg = tiny_fqs();
  ParamStore ps(s0);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.dec0.faca.off.b", s0 + 3, 0.5);
  randomize(ps, "fqs.dec0.faca.att.b", s0 + 4, 0.5);
  TwoStreams st;
  Tensor z, centers;
  FacaCtx ctx;
  search(s0, "faca", [&](std::uint64_t s) {
    st = fqs_streams(cfg, s);
    z = rnd({1, 4, cfg.d}, s, "faca.z");
    centers = rnd({1, 4, 2}, s + 7, "faca.ctr", 0.25);
    for (std::int64_t i = 0; i < centers.size(); ++i) centers[i] += 0.5;
    ctx = FacaCtx{};
    faca(z, centers, st.low, st.high, ps, "fqs.dec0.faca.", cfg, &ctx);
    return min_frac_margin(ctx) > 1e-3;
  });
  FdCase fd;
  fd.cotangent = rnd({1, 4, cfg.d}, s0 + 8, "faca.cot");
  GradStore gs;
  FacaGrads g = faca_vjp(ctx, ps, "fqs.dec0.faca.", cfg, fd.cotangent, gs);
  const std::vector<std::string> probed = {"fqs.dec0.faca.off.w", "fqs.dec0.faca.att.w",
                                           "fqs.dec0.faca.val.w", "fqs.dec0.faca.out.w"};
  fd.inputs = {z, centers, st.low.l3, st.low.l4, st.low.l5, st.high.l3, st.high.l4, st.high.l5};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {g.gz,       g.gcenters, g.glow.l3,  g.glow.l4, g.glow.l5,
                 g.ghigh.l3, g.ghigh.l4, g.ghigh.l5};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {5, 1, 7, 3, 1, 7, 3, 1, 29, 19, 5, 13};
  fd.forward = [ps, cfg, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[8 + i];
    Pyramid low{in[2], in[3], in[4]}, high{in[5], in[6], in[7]};
    return faca(in[0], in[1], low, high, local, "fqs.dec0.faca.", cfg);
  };
  return fd;
}

FdCase decode_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  FqsConfig cfg = tiny_fqs();
  ParamStore ps(s0);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.pos.b1", s0 + 3, 0.3);
  randomize(ps, "fqs.dec0.ffn.b1", s0 + 4, 0.3);
  randomize(ps, "fqs.dec1.ffn.b1", s0 + 5, 0.3);
  randomize(ps, "fqs.dec0.faca.off.b", s0 + 6, 0.5);
  randomize(ps, "fqs.dec1.faca.off.b", s0 + 7, 0.5);
  TwoStreams st;
  Tensor z0, logits0;
  DecodeCtx ctx;
  search(s0, "decode", [&](std::uint64_t s) {
    st = fqs_streams(cfg, s);
    z0 = rnd({1, 4, cfg.d}, s, "dec.z0");
    logits0 = rnd({1, 4, 4}, s, "dec.lg", 2.0);
    ctx = DecodeCtx{};
    decode(z0, logits0, st.low, st.high, ps, cfg, &ctx);
    return decode_guard_margin(ctx) > 1e-3;
  });
  Tensor gz = rnd({1, 4, cfg.d}, s0 + 8, "dec.gz");
  Tensor glogits = rnd({1, 4, 4}, s0 + 9, "dec.gl");
  GradStore gs;
  DecodeGrads g = decode_backward(ctx, ps, cfg, gz, glogits, gs);
  const std::vector<std::string> probed = {"fqs.pos.w1", "fqs.dec0.sa.wv",
                                           "fqs.dec1.faca.val.w", "fqs.dec0.ffn.w1",
                                           "fqs.dec1.ref.w"};
  FdCase fd;
  fd.cotangent = flat_pair(gz, glogits);
  fd.inputs = {z0, logits0, st.low.l3, st.low.l4, st.low.l5, st.high.l3, st.high.l4,
               st.high.l5};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {g.gz0,      g.glogits0, g.glow.l3,  g.glow.l4, g.glow.l5,
                 g.ghigh.l3, g.ghigh.l4, g.ghigh.l5};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {3, 1, 7, 3, 1, 7, 3, 1, 7, 13, 5, 17, 7};
  fd.forward = [ps, cfg, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[8 + i];
    Pyramid low{in[2], in[3], in[4]}, high{in[5], in[6], in[7]};
    DecodeOutputs o = decode(in[0], in[1], low, high, local, cfg);
    return flat_pair(o.z, o.anchor_logits);
  };
  return fd;
}

FdCase fqs_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  FqsConfig cfg = tiny_fqs();
  ParamStore ps(s0);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.gate.high.b1", s0 + 3, 0.3);
  randomize(ps, "fqs.gate.low.b1", s0 + 4, 0.3);
  randomize(ps, "fqs.pos.b1", s0 + 5, 0.3);
  randomize(ps, "fqs.box.b", s0 + 6, 0.3);
  randomize(ps, "fqs.dec0.ffn.b1", s0 + 7, 0.3);
  randomize(ps, "fqs.dec1.ffn.b1", s0 + 8, 0.3);
  randomize(ps, "fqs.dec0.faca.off.b", s0 + 9, 0.5);
  randomize(ps, "fqs.dec1.faca.off.b", s0 + 10, 0.5);
  TwoStreams st;
  FqsCtx ctx;
  search(s0, "fqs", [&](std::uint64_t s) {
    st = fqs_streams(cfg, s);
    ctx = FqsCtx{};
    fqs_run(st.high, st.low, ps, cfg, &ctx);
    return min_topk_gap(ctx.sel.scores, cfg.queries) > 1e-3 &&
           min_abs(ctx.gate.high.pre1) > 1e-3 && min_abs(ctx.gate.low.pre1) > 1e-3 &&
           clamp_margin(ctx.sel.box_pre, 8.0) > 1e-3 && decode_guard_margin(ctx.dec) > 1e-3;
  });
  FqsOutputs out = fqs_run(st.high, st.low, ps, cfg, &ctx);
  Tensor gz = rnd(out.z.shape(), s0 + 11, "fqs.gz");
  Tensor glogits = rnd(out.anchor_logits.shape(), s0 + 12, "fqs.gl");
  GradStore gs;
  FqsGrads g = fqs_backward(ctx, ps, cfg, gz, glogits, gs);
  const std::vector<std::string> probed = {"fqs.tok.high.w", "fqs.gate.low.w2", "fqs.box.w",
                                           "fqs.dec0.sa.wq", "fqs.dec1.faca.att.w",
                                           "fqs.dec1.ref.w"};
  FdCase fd;
  fd.cotangent = flat_pair(gz, glogits);
  fd.inputs = {st.high.l3, st.high.l4, st.high.l5, st.low.l3, st.low.l4, st.low.l5};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {g.ghigh.l3, g.ghigh.l4, g.ghigh.l5, g.glow.l3, g.glow.l4, g.glow.l5};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {7, 3, 1, 7, 3, 1, 5, 3, 7, 7, 23, 7};
  fd.forward = [ps, cfg, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[6 + i];
    Pyramid high{in[0], in[1], in[2]}, low{in[3], in[4], in[5]};
    FqsOutputs o = fqs_run(high, low, local, cfg);
    return flat_pair(o.z, o.anchor_logits);
  };
  return fd;
}

// --- detection head -------------------------------------------------------------

FdCase class_logits_case(std::uint64_t seed, int index) {
  const std::uint64_t s = case_seed(seed, index);
  DetectConfig cfg;
  cfg.d = 8;
  cfg.classes = 3;
  ParamStore ps(s);
  detect_register(ps, cfg);
  Tensor z = rnd({1, 4, cfg.d}, s, "cls.z");
  FdCase fd;
  fd.cotangent = rnd({1, 4, cfg.classes}, s + 7, "cls.cot");
  GradStore gs;
  Tensor gz = class_logits_vjp(z, ps, fd.cotangent, gs);
  const std::vector<std::string> probed = {"det.cls.w", "det.cls.b"};
  fd.inputs = {z};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {gz};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.forward = [ps, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[1 + i];
    return class_logits(in[0], local);
  };
  return fd;
}

Box draw_box(std::uint64_t s, const std::string& name) {
  Tensor u = rnd({4}, s, name, 1.0);
  return Box{0.5 + 0.3 * u[0], 0.5 + 0.3 * u[1], 0.3 + 0.2 * std::fabs(u[2]),
             0.3 + 0.2 * std::fabs(u[3])};
}

FdCase giou_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  Box a, b;
  search(s0, "giou", [&](std::uint64_t s) {
    a = draw_box(s, "giou.a");
    b = draw_box(s, "giou.b");
    return giou_kink_margin(a, b) > 1e-3;
  });
  Tensor ta({4}), tb({4});
  ta[0] = a.cx; ta[1] = a.cy; ta[2] = a.w; ta[3] = a.h;
  tb[0] = b.cx; tb[1] = b.cy; tb[2] = b.w; tb[3] = b.h;
  FdCase fd;
  fd.cotangent = rnd({1}, s0 + 7, "giou.cot");
  std::array<double, 4> ga{}, gb{};
  giou(a, b, &ga, &gb, fd.cotangent[0]);
  Tensor tga({4}), tgb({4});
  for (int i = 0; i < 4; ++i) {
    tga[i] = ga[static_cast<std::size_t>(i)];
    tgb[i] = gb[static_cast<std::size_t>(i)];
  }
  fd.analytic = {tga, tgb};
  fd.inputs = {std::move(ta), std::move(tb)};
  fd.forward = [](const std::vector<Tensor>& in) {
    Tensor out(Shape{1});
    out[0] = giou(Box{in[0][0], in[0][1], in[0][2], in[0][3]},
                  Box{in[1][0], in[1][1], in[1][2], in[1][3]});
    return out;
  };
  return fd;
}

FdCase detection_loss_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  const std::int64_t k = 5, c = 3;
  MatchWeights w;
  Tensor logits, boxes;
  std::vector<GtItem> gts;
  DetectionLoss loss;
  search(s0, "detection_loss", [&](std::uint64_t s) {
    logits = rnd({k, c}, s, "dl.logits", 2.0);
    boxes = Tensor({k, 4});
    for (std::int64_t q = 0; q < k; ++q) {
      const Box bq = draw_box(s + 11 * static_cast<std::uint64_t>(q) + 1, "dl.box");
      boxes.at(q, 0) = bq.cx;
      boxes.at(q, 1) = bq.cy;
      boxes.at(q, 2) = bq.w;
      boxes.at(q, 3) = bq.h;
    }
    gts.clear();
    CounterRng cls_rng(s, "dl.cls");
    for (int j = 0; j < 2; ++j)
      gts.push_back(GtItem{static_cast<std::int64_t>(cls_rng.bits(j) % c),
                           draw_box(s + 101 * static_cast<std::uint64_t>(j) + 7, "dl.gt")});
    const Tensor cost = match_cost(logits, boxes, gts, w);
    if (match_gap(cost) < 5e-3) return false;
    loss = detection_loss(logits, boxes, gts, w);
    return matched_pair_margin(boxes, gts, loss.assignment) > 1e-3;
  });
  FdCase fd;
  fd.cotangent = rnd({2}, s0 + 7, "dl.cot");
  DetectionLossGrads g =
      detection_loss_vjp(logits, boxes, gts, loss.assignment, w, fd.cotangent[0],
                         fd.cotangent[1]);
  fd.analytic = {g.glogits, g.gboxes};
  fd.inputs = {logits, boxes};
  fd.forward = [gts, w](const std::vector<Tensor>& in) {
    DetectionLoss l = detection_loss(in[0], in[1], gts, w);
    Tensor out(Shape{2});
    out[0] = l.box;
    out[1] = l.cls;
    return out;
  };
  return fd;
}

// --- full stacks ------------------------------------------------------------------

FdCase backbone_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  BackboneConfig cfg;
  cfg.c0 = 2;
  cfg.c3 = 2;
  cfg.c4 = 3;
  cfg.c5 = 4;
  cfg.blocks = 1;
  Tensor img;
  ParamStore ps(s0);
  BackboneCtx ctx;
  // Thousands of pre-activations make a 1e-3 margin unreachable; 1e-4 still
  // exceeds the reach of an h=1e-5 probe and relu is piecewise linear.
  search(s0, "backbone", [&](std::uint64_t s) {
    ParamStore fresh(s);
    backbone_register(fresh, cfg);
    randomize_zero_init(fresh, s);
    ps = fresh;
    img = rnd({1, 3, 64, 64}, s, "bb.img");
    ctx = BackboneCtx{};
    backbone_forward(img, ps, cfg, &ctx);
    return backbone_pre_margin(ctx) > 1e-4;
  });
  Pyramid p = backbone_forward(img, ps, cfg, &ctx);
  Tensor g3 = rnd(p.l3.shape(), s0 + 7, "bb.g3");
  Tensor g4 = rnd(p.l4.shape(), s0 + 8, "bb.g4");
  Tensor g5 = rnd(p.l5.shape(), s0 + 9, "bb.g5");
  GradStore gs;
  Tensor gimg;
  backbone_backward(ctx, ps, cfg, g3, g4, g5, gs, &gimg);
  const std::vector<std::string> probed = {"bb.stem.w", "bb.s4.blk0.w", "bb.s5.down.b"};
  FdCase fd;
  fd.cotangent = flat_triple(g3.reshaped({g3.size()}), g4.reshaped({g4.size()}),
                             g5.reshaped({g5.size()}));
  fd.inputs = {img};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.analytic = {gimg};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {1283, 5, 7, 1};
  fd.forward = [ps, cfg, probed](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[1 + i];
    Pyramid q = backbone_forward(in[0], local, cfg);
    return flat_triple(q.l3.reshaped({q.l3.size()}), q.l4.reshaped({q.l4.size()}),
                       q.l5.reshaped({q.l5.size()}));
  };
  return fd;
}

PipelineConfig tiny_pipeline() {
  PipelineConfig cfg;
  cfg.backbone = BackboneConfig{2, 2, 4, 6, 1};
  cfg.ce = 4;
  cfg.d = 8;
  cfg.heads = 2;
  cfg.layers = 1;
  cfg.queries = 4;
  cfg.points = 2;
  cfg.rep_blocks = 1;
  cfg.classes = 2;
  cfg.validate();
  return cfg;
}

// Every kink surface the composite loss crosses. Pre-activation margins only
// need to exceed the reach of one finite-difference step, so they use a
// looser bound than the direct-probe cases above.
bool pipeline_guards_ok(const ForwardCtx& ctx, const ForwardOutputs& fwd,
                        const std::vector<GtItem>& gts, const SampleLosses& losses,
                        const ParamStore& ps, const PipelineConfig& cfg) {
  for (const BackboneCtx* b : {&ctx.bb_ir, &ctx.bb_rgb})
    if (backbone_pre_margin(*b) < 1e-4) return false;
  for (const HfeStreamCtx* h : {&ctx.hfe_low, &ctx.hfe_high})
    if (hfe_guard_margin(*h) < 1e-4) return false;
  const int levels[3] = {3, 4, 5};
  for (int i = 0; i < 3; ++i) {
    const LevelCtx& lvl = ctx.level[static_cast<std::size_t>(i)];
    const std::string p = "hfsr.l" + std::to_string(levels[i]) + ".";
    MultiscaleParams mp{&ps.get(p + "ms1.w"), &ps.get(p + "ms3.w"), &ps.get(p + "ms5.w")};
    for (const Tensor* band : {&lvl.high_rgb, &lvl.high_ir}) {
      // Sobel of a 1x1 map is identically zero, so hog and the consistency
      // targets are inert there.
      if (band->extent(2) * band->extent(3) == 1) continue;
      if (grad_bank(multiscale_conv(*band, mp), 1).as_vector().minCoeff() < 1e-2) return false;
      if (min_sobel_response(*band) < 1e-4) return false;
    }
    if (consistency_residual_margin(lvl.fh, lvl.high_rgb, lvl.high_ir) < 1e-3) return false;
  }
  const FqsCtx& f = ctx.fqs;
  if (min_topk_gap(f.sel.scores, cfg.queries) < 1e-3) return false;
  if (std::min(min_abs(f.gate.high.pre1), min_abs(f.gate.low.pre1)) < 1e-4) return false;
  if (clamp_margin(f.sel.box_pre, 8.0) < 1e-3) return false;
  if (decode_guard_margin(f.dec) < 5e-4) return false;
  const Tensor logits2 = fwd.logits.reshaped({fwd.logits.extent(1), fwd.logits.extent(2)});
  const Tensor boxes2 = fwd.boxes.reshaped({fwd.boxes.extent(1), fwd.boxes.extent(2)});
  if (match_gap(match_cost(logits2, boxes2, gts, cfg.loss_weights)) < 5e-3) return false;
  return matched_pair_margin(boxes2, gts, losses.assignment) > 1e-3;
}

FdCase pipeline_case(std::uint64_t seed, int index) {
  const std::uint64_t s0 = case_seed(seed, index);
  PipelineConfig cfg = tiny_pipeline();
  ParamStore ps(s0);
  Tensor rgb, ir;
  std::vector<GtItem> gts;
  ForwardCtx ctx;
  ForwardOutputs fwd;
  SampleLosses losses;
  search(
      s0, "pipeline",
      [&](std::uint64_t s) {
        ParamStore fresh(s);
        pipeline_register(fresh, cfg);
        randomize_zero_init(fresh, s);
        ps = fresh;
        rgb = rnd({1, 3, 64, 64}, s, "pl.rgb", 0.5);
        ir = rnd({1, 3, 64, 64}, s, "pl.ir", 0.5);
        for (std::int64_t i = 0; i < rgb.size(); ++i) rgb[i] += 0.5;
        for (std::int64_t i = 0; i < ir.size(); ++i) ir[i] += 0.5;
        gts = {GtItem{static_cast<std::int64_t>(s % 2), draw_box(s + 5, "pl.gt")}};
        ctx = ForwardCtx{};
        fwd = pipeline_forward(rgb, ir, ps, cfg, &ctx);
        losses = pipeline_loss(fwd, gts, cfg);
        return pipeline_guards_ok(ctx, fwd, gts, losses, ps, cfg);
      },
      200);
  GradStore gs;
  pipeline_backward(ctx, fwd, gts, losses.assignment, ps, cfg, gs);
  const std::vector<std::string> probed = {"bb.stem.w",          "wav.l3.w",
                                           "lfha.l4.g.w",        "hfsr.l4.pw.w",
                                           "hfe.low.lat4.w",     "hfe.high.u3.w",
                                           "fqs.dec0.faca.att.w", "fqs.box.w",
                                           "det.cls.w",          "det.cls.b"};
  FdCase fd;
  fd.cotangent = Tensor::full({1}, 1.0);
  for (const std::string& name : probed) {
    fd.inputs.push_back(ps.get(name));
    fd.analytic.push_back(*gs.find(name));
  }
  fd.probe_stride = {17, 5, 5, 3, 5, 5, 13, 11, 5, 1};
  fd.forward = [ps, cfg, probed, rgb, ir, gts](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[i];
    ForwardOutputs f = pipeline_forward(rgb, ir, local, cfg);
    SampleLosses l = pipeline_loss(f, gts, cfg);
    Tensor out(Shape{1});
    out[0] = l.total;
    return out;
  };
  return fd;
}

}  // namespace

const std::map<std::string, FdCaseFactory>& gradcheck_registry() {
  static const std::map<std::string, FdCaseFactory> registry = {
      {"conv2d", conv2d_case},
      {"matmul", matmul_case},
      {"softmax", softmax_case},
      {"bilinear_sample", bilinear_case},
      {"add", add_case},
      {"mul", mul_case},
      {"abs", abs_case},
      {"sigmoid", sigmoid_case},
      {"layer_norm", layer_norm_case},
      {"upsample", upsample_case},
      {"pooling", pooling_case},
      {"relu", relu_case},
      {"linear", linear_case},
      {"bias_add_channels", bias_add_case},
      {"avg_pool2x", avg_pool_case},
      {"reduce_high", reduce_high_case},
      {"eca", eca_case},
      {"cross_modal_align", cross_modal_case},
      {"lfha", lfha_case},
      {"multiscale_conv", multiscale_case},
      {"hog_enhance", hog_case},
      {"fuse_specific", fuse_case},
      {"grad_consistency_loss", grad_consistency_case},
      {"hfsr", hfsr_case},
      {"level5_self_attention", attention_case},
      {"fpn", fpn_case},
      {"pan", pan_case},
      {"hfe", hfe_case},
      {"stream_gate", stream_gate_case},
      {"gate_streams", gate_streams_case},
      {"select_queries", select_case},
      {"positional_query", positional_case},
      {"decoder_self_attention", self_attention_case},
      {"faca", faca_case},
      {"decode", decode_case},
      {"fqs", fqs_case},
      {"class_logits", class_logits_case},
      {"giou", giou_case},
      {"detection_loss", detection_loss_case},
      {"backbone", backbone_case},
      {"pipeline", pipeline_case},
  };
  return registry;
}

}  // namespace wdfq
