#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracles.hpp"
#include "test_utils.hpp"
#include "wdfq/fqs.hpp"
#include "wdfq/gradcheck.hpp"
#include "wdfq/ops.hpp"

using namespace wdfq;
using testutil::max_abs_diff;
using testutil::random_tensor;

namespace {

FqsConfig tiny_cfg() {
  FqsConfig cfg;
  cfg.d = 8;
  cfg.ce = 3;
  cfg.heads = 2;
  cfg.points = 2;
  cfg.layers = 2;
  cfg.queries = 4;
  return cfg;
}

void zero_param(ParamStore& ps, const std::string& name) {
  Tensor& t = ps.get(name);
  for (std::int64_t i = 0; i < t.size(); ++i) t[i] = 0.0;
}

void randomize(ParamStore& ps, const std::string& name, std::uint64_t seed, double bound = 1.0) {
  Tensor& t = ps.get(name);
  t = random_tensor(t.shape(), seed, name, bound);
}

struct TwoStreams {
  Pyramid low, high;
};

TwoStreams make_streams(const FqsConfig& cfg, std::uint64_t seed, std::int64_t n = 1,
                        std::int64_t h3 = 4, double bound = 1.0) {
  TwoStreams s;
  s.low.l3 = random_tensor({n, cfg.ce, h3, h3}, seed, "fqs.low3", bound);
  s.low.l4 = random_tensor({n, cfg.ce, h3 / 2, h3 / 2}, seed, "fqs.low4", bound);
  s.low.l5 = random_tensor({n, cfg.ce, h3 / 4, h3 / 4}, seed, "fqs.low5", bound);
  s.high.l3 = random_tensor({n, cfg.ce, h3, h3}, seed, "fqs.high3", bound);
  s.high.l4 = random_tensor({n, cfg.ce, h3 / 2, h3 / 2}, seed, "fqs.high4", bound);
  s.high.l5 = random_tensor({n, cfg.ce, h3 / 4, h3 / 4}, seed, "fqs.high5", bound);
  return s;
}

Tensor make_centers(std::int64_t n, std::int64_t q, std::uint64_t seed) {
  Tensor c = random_tensor({n, q, 2}, seed, "fqs.ctr", 0.25);
  for (std::int64_t i = 0; i < c.size(); ++i) c[i] += 0.5;
  return c;
}

bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (std::bit_cast<std::uint64_t>(a[i]) != std::bit_cast<std::uint64_t>(b[i])) return false;
  return true;
}

Tensor flat_pair(const Tensor& a, const Tensor& b) {
  Tensor f({a.size() + b.size()});
  for (std::int64_t i = 0; i < a.size(); ++i) f[i] = a[i];
  for (std::int64_t i = 0; i < b.size(); ++i) f[a.size() + i] = b[i];
  return f;
}

double min_abs(const Tensor& t) { return t.as_vector().cwiseAbs().minCoeff(); }

// Smallest gap between adjacent sorted scores among the first k+1 ranks; a
// finite-difference step must not be able to reorder the selection.
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

}  // namespace

TEST_CASE("stream gates sit at one half with a zero gate mlp") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(7);
  fqs_register(ps, cfg);
  zero_param(ps, "fqs.gate.high.w1");
  zero_param(ps, "fqs.gate.high.w2");
  Tensor tok = random_tensor({2, 5, cfg.d}, 3, "fqs.tok");
  Tensor gate = stream_gate(tok, ps, "high");
  REQUIRE(gate.extent(0) == 2);
  CHECK(gate.at(0, 0) == 0.5);
  CHECK(gate.at(1, 0) == 0.5);
}

TEST_CASE("saturated gates pass a stream through or erase it bitwise") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(11);
  fqs_register(ps, cfg);
  ps.get("fqs.gate.high.b2")[0] = 800.0;
  ps.get("fqs.gate.low.b2")[0] = -800.0;
  Tensor tok_high = random_tensor({1, 6, cfg.d}, 5, "fqs.th");
  Tensor tok_low = random_tensor({1, 4, cfg.d}, 6, "fqs.tl");
  GatedStreams g = gate_streams(tok_high, tok_low, ps);
  CHECK(g.gate_high.at(0, 0) == 1.0);
  CHECK(g.gate_low.at(0, 0) == 0.0);
  CHECK(same_bits(g.high, tok_high));
  for (std::int64_t i = 0; i < g.low.size(); ++i) {
    CHECK(g.low[i] == 0.0);
    CHECK(!std::signbit(g.low[i]));
  }
}

TEST_CASE("stream gates match the scalar oracle") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(23);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.gate.high.b1", 101, 0.5);
  randomize(ps, "fqs.gate.high.b2", 102, 0.5);
  Tensor tok = random_tensor({2, 7, cfg.d}, 103, "fqs.tok");
  Tensor gate = stream_gate(tok, ps, "high");
  std::vector<double> want = oracle::naive_stream_gate(
      tok, ps.get("fqs.gate.high.w1"), ps.get("fqs.gate.high.b1"), ps.get("fqs.gate.high.w2"),
      ps.get("fqs.gate.high.b2"));
  for (std::int64_t b = 0; b < 2; ++b) {
    CHECK(std::abs(gate.at(b, 0) - want[static_cast<std::size_t>(b)]) < 1e-12);
    CHECK(gate.at(b, 0) > 0.0);
    CHECK(gate.at(b, 0) < 1.0);
  }
  GatedStreams g = gate_streams(tok, tok, ps);
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < 7; ++i)
      for (std::int64_t j = 0; j < cfg.d; ++j)
        CHECK(g.high.at(b, i, j) ==
              doctest::Approx(want[static_cast<std::size_t>(b)] * tok.at(b, i, j))
                  .epsilon(1e-12));
}

TEST_CASE("stream gating backward matches finite differences") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(13);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.gate.high.b1", 201, 0.3);
  randomize(ps, "fqs.gate.low.b1", 202, 0.3);
  Tensor tok_high, tok_low;
  GateStreamsCtx ctx;
  for (std::uint64_t seed = 0;; ++seed) {
    tok_high = random_tensor({1, 5, cfg.d}, seed, "fqs.th");
    tok_low = random_tensor({1, 4, cfg.d}, seed, "fqs.tl");
    gate_streams(tok_high, tok_low, ps, &ctx);
    if (std::min(min_abs(ctx.high.pre1), min_abs(ctx.low.pre1)) > 1e-3) break;
    REQUIRE(seed < 200);
  }
  Tensor gy_high = random_tensor(tok_high.shape(), 7, "fqs.gyh");
  Tensor gy_low = random_tensor(tok_low.shape(), 8, "fqs.gyl");
  GradStore gs;
  GateStreamsGrads g = gate_streams_vjp(ctx, ps, gy_high, gy_low, Tensor(), Tensor(), gs);

  const std::vector<std::string> probed = {"fqs.gate.high.w1", "fqs.gate.high.b1",
                                           "fqs.gate.high.w2", "fqs.gate.high.b2",
                                           "fqs.gate.low.w2"};
  FdCase fd;
  fd.inputs = {tok_high, tok_low};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.forward = [&](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[2 + i];
    GatedStreams o = gate_streams(in[0], in[1], local);
    return flat_pair(o.high, o.low);
  };
  fd.cotangent = flat_pair(gy_high, gy_low);
  fd.analytic = {g.gtok_high, g.gtok_low};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {3, 3, 5, 1, 1, 1, 1};
  FdReport rep = fd_check(fd);
  CHECK(rep.elements > 40);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("query selection keeps the best scores in order with index ties") {
  FqsConfig cfg;
  cfg.d = 1;
  cfg.ce = 1;
  cfg.heads = 1;
  cfg.points = 1;
  cfg.layers = 1;
  cfg.queries = 2;
  ParamStore ps(5);
  fqs_register(ps, cfg);
  ps.get("fqs.score.w") = Tensor::full({1, 1}, 1.0);
  Tensor th({1, 2, 1});
  th[0] = 0.1;
  th[1] = 0.9;
  Tensor tl({1, 1, 1});
  tl[0] = 0.5;
  SelectedQueries sel = select_queries(th, tl, ps, 2);
  REQUIRE(sel.picked.size() == 2);
  CHECK(sel.picked[0] == 1);
  CHECK(sel.picked[1] == 2);
  CHECK(sel.z.at(0, 0, 0) == 0.9);
  CHECK(sel.z.at(0, 1, 0) == 0.5);

  Tensor te_h = Tensor::full({1, 2, 1}, 0.7);
  Tensor te_l = Tensor::full({1, 1, 1}, 0.7);
  SelectedQueries tie = select_queries(te_h, te_l, ps, 2);
  CHECK(tie.picked[0] == 0);
  CHECK(tie.picked[1] == 1);
}

TEST_CASE("query selection rejects more queries than tokens") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(9);
  fqs_register(ps, cfg);
  Tensor th = random_tensor({1, 2, cfg.d}, 1, "fqs.th");
  Tensor tl = random_tensor({1, 1, cfg.d}, 2, "fqs.tl");
  CHECK_THROWS_WITH_AS(select_queries(th, tl, ps, 4), doctest::Contains("WDFQ_E_CONFIG"), Error);
  CHECK_THROWS_WITH_AS(select_queries(th, tl, ps, 0), doctest::Contains("WDFQ_E_CONFIG"), Error);
}

TEST_CASE("query selection matches the repeated-argmax oracle") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(17);
  fqs_register(ps, cfg);
  const std::int64_t k = 5;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor th = random_tensor({2, 9, cfg.d}, seed, "fqs.th");
    Tensor tl = random_tensor({2, 6, cfg.d}, seed + 1000, "fqs.tl");
    SelectCtx ctx;
    SelectedQueries sel = select_queries(th, tl, ps, k, &ctx);
    for (std::int64_t b = 0; b < 2; ++b) {
      std::vector<double> row(15);
      for (std::int64_t t = 0; t < 15; ++t) row[static_cast<std::size_t>(t)] = ctx.scores.at(b, t);
      std::vector<std::int64_t> want = oracle::naive_topk(row, k);
      double worst_sel = 1e300;
      for (std::int64_t q = 0; q < k; ++q) {
        const std::int64_t pick = sel.picked[static_cast<std::size_t>(b * k + q)];
        CHECK(pick == want[static_cast<std::size_t>(q)]);
        worst_sel = std::min(worst_sel, row[static_cast<std::size_t>(pick)]);
        for (std::int64_t j = 0; j < cfg.d; ++j)
          CHECK(sel.z.at(b, q, j) == ctx.cat.at(b, pick, j));
      }
      for (std::int64_t t = 0; t < 15; ++t) {
        bool taken = false;
        for (std::int64_t q = 0; q < k; ++q)
          taken = taken || sel.picked[static_cast<std::size_t>(b * k + q)] == t;
        if (!taken) CHECK(row[static_cast<std::size_t>(t)] <= worst_sel);
      }
    }
  }
}

TEST_CASE("query selection clamps the initial anchor logits") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(19);
  fqs_register(ps, cfg);
  zero_param(ps, "fqs.box.w");
  Tensor th = random_tensor({1, 4, cfg.d}, 1, "fqs.th");
  Tensor tl = random_tensor({1, 3, cfg.d}, 2, "fqs.tl");
  SelectedQueries sel = select_queries(th, tl, ps, 4);
  for (std::int64_t i = 0; i < sel.anchor_logits.size(); ++i) CHECK(sel.anchor_logits[i] == 0.0);

  Tensor& bb = ps.get("fqs.box.b");
  bb[0] = 20.0;
  bb[1] = -20.0;
  bb[2] = 3.0;
  bb[3] = 0.25;
  SelectedQueries wide = select_queries(th, tl, ps, 4);
  for (std::int64_t q = 0; q < 4; ++q) {
    CHECK(wide.anchor_logits.at(0, q, 0) == 8.0);
    CHECK(wide.anchor_logits.at(0, q, 1) == -8.0);
    CHECK(wide.anchor_logits.at(0, q, 2) == 3.0);
    CHECK(wide.anchor_logits.at(0, q, 3) == 0.25);
  }
}

TEST_CASE("query selection backward matches finite differences") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(29);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.box.b", 301, 0.5);
  const std::int64_t k = cfg.queries;
  Tensor th, tl;
  SelectCtx ctx;
  for (std::uint64_t seed = 0;; ++seed) {
    th = random_tensor({1, 6, cfg.d}, seed, "fqs.th");
    tl = random_tensor({1, 5, cfg.d}, seed, "fqs.tl");
    select_queries(th, tl, ps, k, &ctx);
    if (min_topk_gap(ctx.scores, k) > 1e-3 && clamp_margin(ctx.box_pre, 8.0) > 1e-3) break;
    REQUIRE(seed < 200);
  }
  Tensor gz = random_tensor({1, k, cfg.d}, 11, "fqs.gz");
  Tensor glogits = random_tensor({1, k, 4}, 12, "fqs.gl");
  GradStore gs;
  SelectGrads g = select_queries_vjp(ctx, ps, gz, glogits, gs);

  const std::vector<std::string> probed = {"fqs.box.w", "fqs.box.b", "fqs.score.w"};
  FdCase fd;
  fd.inputs = {th, tl};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.forward = [&](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[2 + i];
    SelectedQueries o = select_queries(in[0], in[1], local, k);
    return flat_pair(o.z, o.anchor_logits);
  };
  fd.cotangent = flat_pair(gz, glogits);
  // Selection is discrete: the score map gets no gradient, and a small
  // perturbation of its weights must leave the output untouched.
  fd.analytic = {g.gtok_high, g.gtok_low, *gs.find("fqs.box.w"), *gs.find("fqs.box.b"),
                 Tensor(ps.get("fqs.score.w").shape())};
  fd.probe_stride = {5, 5, 3, 1, 1};
  FdReport rep = fd_check(fd);
  CHECK(rep.elements > 40);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("positional queries collapse to the second bias with zero weights") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(31);
  fqs_register(ps, cfg);
  zero_param(ps, "fqs.pos.w1");
  zero_param(ps, "fqs.pos.w2");
  randomize(ps, "fqs.pos.b1", 401, 0.5);
  randomize(ps, "fqs.pos.b2", 402, 0.5);
  Tensor anchors = random_tensor({1, 5, 4}, 403, "fqs.anc", 0.5);
  for (std::int64_t i = 0; i < anchors.size(); ++i) anchors[i] += 0.5;
  Tensor p = positional_query(anchors, ps);
  const Tensor& b2 = ps.get("fqs.pos.b2");
  for (std::int64_t q = 0; q < 5; ++q)
    for (std::int64_t j = 0; j < cfg.d; ++j) CHECK(p.at(0, q, j) == b2[j]);
}

TEST_CASE("equal anchors produce equal positional rows") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(37);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.pos.b1", 404, 0.5);
  randomize(ps, "fqs.pos.b2", 405, 0.5);
  Tensor anchors = random_tensor({1, 3, 4}, 406, "fqs.anc", 0.5);
  for (std::int64_t i = 0; i < anchors.size(); ++i) anchors[i] += 0.5;
  for (std::int64_t j = 0; j < 4; ++j) anchors.at(0, 2, j) = anchors.at(0, 0, j);
  Tensor p = positional_query(anchors, ps);
  for (std::int64_t j = 0; j < cfg.d; ++j) CHECK(p.at(0, 2, j) == p.at(0, 0, j));
}

TEST_CASE("positional queries match a scalar mlp") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(41);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.pos.b1", 407, 0.5);
  randomize(ps, "fqs.pos.b2", 408, 0.5);
  Tensor anchors = random_tensor({2, 3, 4}, 29, "fqs.anc", 0.5);
  for (std::int64_t i = 0; i < anchors.size(); ++i) anchors[i] += 0.5;
  Tensor p = positional_query(anchors, ps);
  const Tensor& w1 = ps.get("fqs.pos.w1");
  const Tensor& b1 = ps.get("fqs.pos.b1");
  const Tensor& w2 = ps.get("fqs.pos.w2");
  const Tensor& b2 = ps.get("fqs.pos.b2");
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t q = 0; q < 3; ++q) {
      std::vector<double> hidden(static_cast<std::size_t>(cfg.d));
      for (std::int64_t j = 0; j < cfg.d; ++j) {
        double acc = b1[j];
        for (std::int64_t i = 0; i < 4; ++i) acc += w1.at(j, i) * anchors.at(b, q, i);
        hidden[static_cast<std::size_t>(j)] = acc > 0.0 ? acc : 0.0;
      }
      for (std::int64_t j = 0; j < cfg.d; ++j) {
        double acc = b2[j];
        for (std::int64_t i = 0; i < cfg.d; ++i)
          acc += w2.at(j, i) * hidden[static_cast<std::size_t>(i)];
        CHECK(std::abs(p.at(b, q, j) - acc) < 1e-12);
      }
    }
}

TEST_CASE("single-query decoder attention is a normed value path") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(43);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.dec0.sa.ln.g", 501, 0.3);
  randomize(ps, "fqs.dec0.sa.ln.b", 502, 0.3);
  Tensor z = random_tensor({1, 1, cfg.d}, 503, "fqs.z");
  Tensor p = random_tensor({1, 1, cfg.d}, 504, "fqs.p");
  Tensor y = decoder_self_attention(z, p, ps, "fqs.dec0.sa.", cfg);
  Tensor path = linear(linear(z, ps.get("fqs.dec0.sa.wv"), Tensor()),
                       ps.get("fqs.dec0.sa.wo"), Tensor());
  Tensor want = layer_norm(add(z, path), ps.get("fqs.dec0.sa.ln.g"), ps.get("fqs.dec0.sa.ln.b"));
  CHECK(max_abs_diff(y, want) == 0.0);
}

TEST_CASE("identical queries attend identically") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(47);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.dec0.sa.ln.g", 505, 0.3);
  Tensor z = random_tensor({1, 3, cfg.d}, 506, "fqs.z");
  Tensor p = random_tensor({1, 3, cfg.d}, 507, "fqs.p");
  for (std::int64_t j = 0; j < cfg.d; ++j) {
    z.at(0, 2, j) = z.at(0, 0, j);
    p.at(0, 2, j) = p.at(0, 0, j);
  }
  Tensor y = decoder_self_attention(z, p, ps, "fqs.dec0.sa.", cfg);
  for (std::int64_t j = 0; j < cfg.d; ++j) CHECK(y.at(0, 2, j) == y.at(0, 0, j));
}

TEST_CASE("decoder attention matches the per-head oracle") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(53);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.dec0.sa.ln.g", 508, 0.3);
  randomize(ps, "fqs.dec0.sa.ln.b", 509, 0.3);
  Tensor z = random_tensor({2, 4, cfg.d}, 31, "fqs.z");
  Tensor p = random_tensor({2, 4, cfg.d}, 32, "fqs.p");
  Tensor y = decoder_self_attention(z, p, ps, "fqs.dec0.sa.", cfg);
  Tensor want = oracle::naive_decoder_self_attn(
      z, p, ps.get("fqs.dec0.sa.wq"), ps.get("fqs.dec0.sa.wk"), ps.get("fqs.dec0.sa.wv"),
      ps.get("fqs.dec0.sa.wo"), ps.get("fqs.dec0.sa.ln.g"), ps.get("fqs.dec0.sa.ln.b"),
      cfg.heads);
  CHECK(max_abs_diff(y, want) < 1e-12);
}

TEST_CASE("fqs configs reject widths not divisible by head count") {
  FqsConfig bad = tiny_cfg();
  bad.d = 6;
  bad.heads = 4;
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("WDFQ_E_CONFIG"), Error);
}

TEST_CASE("decoder attention backward matches finite differences") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(59);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.dec0.sa.ln.g", 510, 0.3);
  randomize(ps, "fqs.dec0.sa.ln.b", 511, 0.3);
  Tensor z = random_tensor({1, 4, cfg.d}, 512, "fqs.z");
  Tensor p = random_tensor({1, 4, cfg.d}, 513, "fqs.p");
  SelfAttnCtx ctx;
  Tensor y = decoder_self_attention(z, p, ps, "fqs.dec0.sa.", cfg, &ctx);
  Tensor cot = random_tensor(y.shape(), 514, "fqs.cot");
  GradStore gs;
  Tensor gp;
  Tensor gz = decoder_self_attention_vjp(ctx, ps, "fqs.dec0.sa.", cfg, cot, gs, &gp);

  const std::vector<std::string> probed = {"fqs.dec0.sa.wq", "fqs.dec0.sa.wk", "fqs.dec0.sa.wv",
                                           "fqs.dec0.sa.wo", "fqs.dec0.sa.ln.g",
                                           "fqs.dec0.sa.ln.b"};
  FdCase fd;
  fd.inputs = {z, p};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.forward = [&](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[2 + i];
    return decoder_self_attention(in[0], in[1], local, "fqs.dec0.sa.", cfg);
  };
  fd.cotangent = cot;
  fd.analytic = {gz, gp};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {3, 3, 13, 13, 13, 13, 1, 1};
  FdReport rep = fd_check(fd);
  CHECK(rep.elements > 50);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("uniform cross-attention averages the sampled features") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(61);
  fqs_register(ps, cfg);
  zero_param(ps, "fqs.dec0.faca.off.w");
  zero_param(ps, "fqs.dec0.faca.att.w");
  TwoStreams s = make_streams(cfg, 5);
  Tensor z = random_tensor({1, 4, cfg.d}, 601, "fqs.z");
  Tensor centers = make_centers(1, 4, 602);
  FacaCtx ctx;
  Tensor y = faca(z, centers, s.low, s.high, ps, "fqs.dec0.faca.", cfg, &ctx);

  const double unif = 1.0 / static_cast<double>(2 * kFqsLevels * cfg.points);
  for (std::int64_t i = 0; i < ctx.attn.size(); ++i) CHECK(std::abs(ctx.attn[i] - unif) < 1e-15);

  const Tensor* maps[6] = {&s.low.l3, &s.low.l4, &s.low.l5, &s.high.l3, &s.high.l4, &s.high.l5};
  Tensor mean({1, 4, cfg.ce});
  for (const Tensor* map : maps) {
    Tensor f = bilinear_sample(*map, centers);
    for (std::int64_t i = 0; i < mean.size(); ++i) mean[i] += f[i];
  }
  mean = scale(mean, 1.0 / 6.0);
  Tensor want = linear(linear(mean, ps.get("fqs.dec0.faca.val.w"), Tensor()),
                       ps.get("fqs.dec0.faca.out.w"), Tensor());
  CHECK(max_abs_diff(y, want) < 1e-12);
}

TEST_CASE("cross-attention on constant pyramids ignores offsets") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(67);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.dec0.faca.off.b", 603, 0.5);
  randomize(ps, "fqs.dec0.faca.att.b", 604, 0.5);
  const double c = 0.37;
  TwoStreams s;
  s.low.l3 = Tensor::full({1, cfg.ce, 4, 4}, c);
  s.low.l4 = Tensor::full({1, cfg.ce, 2, 2}, c);
  s.low.l5 = Tensor::full({1, cfg.ce, 1, 1}, c);
  s.high.l3 = Tensor::full({1, cfg.ce, 4, 4}, c);
  s.high.l4 = Tensor::full({1, cfg.ce, 2, 2}, c);
  s.high.l5 = Tensor::full({1, cfg.ce, 1, 1}, c);
  Tensor z = random_tensor({1, 4, cfg.d}, 605, "fqs.z");
  Tensor centers = make_centers(1, 4, 606);
  Tensor y1 = faca(z, centers, s.low, s.high, ps, "fqs.dec0.faca.", cfg);
  randomize(ps, "fqs.dec0.faca.off.b", 607, 0.8);
  Tensor y2 = faca(z, centers, s.low, s.high, ps, "fqs.dec0.faca.", cfg);
  CHECK(max_abs_diff(y1, y2) < 1e-12);

  Tensor cvec = Tensor::full({1, 1, cfg.ce}, c);
  Tensor want = linear(linear(cvec, ps.get("fqs.dec0.faca.val.w"), Tensor()),
                       ps.get("fqs.dec0.faca.out.w"), Tensor());
  for (std::int64_t q = 0; q < 4; ++q)
    for (std::int64_t j = 0; j < cfg.d; ++j)
      CHECK(std::abs(y1.at(0, q, j) - want.at(0, 0, j)) < 1e-12);
}

TEST_CASE("cross-attention matches the fully-unrolled oracle") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(71);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.dec0.faca.off.b", 608, 0.5);
  randomize(ps, "fqs.dec0.faca.att.b", 609, 0.5);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    TwoStreams s;
    s.low.l3 = random_tensor({1, cfg.ce, 5, 4}, seed, "fqs.fl3");
    s.low.l4 = random_tensor({1, cfg.ce, 3, 2}, seed, "fqs.fl4");
    s.low.l5 = random_tensor({1, cfg.ce, 2, 2}, seed, "fqs.fl5");
    s.high.l3 = random_tensor({1, cfg.ce, 4, 4}, seed, "fqs.fh3");
    s.high.l4 = random_tensor({1, cfg.ce, 2, 3}, seed, "fqs.fh4");
    s.high.l5 = random_tensor({1, cfg.ce, 1, 2}, seed, "fqs.fh5");
    Tensor z = random_tensor({1, 4, cfg.d}, seed + 50, "fqs.z");
    Tensor centers = make_centers(1, 4, seed + 90);
    FacaCtx ctx;
    Tensor y = faca(z, centers, s.low, s.high, ps, "fqs.dec0.faca.", cfg, &ctx);

    const std::int64_t slots = 2 * kFqsLevels * cfg.points;
    for (std::int64_t q = 0; q < 4; ++q)
      for (int m = 0; m < cfg.heads; ++m) {
        double sum = 0.0;
        for (std::int64_t g = 0; g < slots; ++g) sum += ctx.attn.at(0, q, m, g);
        CHECK(std::abs(sum - 1.0) < 1e-12);
      }

    Tensor want = oracle::naive_faca(
        z, centers, {&s.low.l3, &s.low.l4, &s.low.l5, &s.high.l3, &s.high.l4, &s.high.l5},
        ps.get("fqs.dec0.faca.off.w"), ps.get("fqs.dec0.faca.off.b"),
        ps.get("fqs.dec0.faca.att.w"), ps.get("fqs.dec0.faca.att.b"),
        ps.get("fqs.dec0.faca.val.w"), ps.get("fqs.dec0.faca.out.w"), cfg.heads, cfg.points);
    CHECK(max_abs_diff(y, want) < 1e-12);
  }
}

TEST_CASE("cross-attention backward matches finite differences") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(73);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.dec0.faca.off.b", 610, 0.5);
  randomize(ps, "fqs.dec0.faca.att.b", 611, 0.5);
  TwoStreams s;
  Tensor z, centers;
  FacaCtx ctx;
  for (std::uint64_t seed = 0;; ++seed) {
    s = make_streams(cfg, seed);
    z = random_tensor({1, 4, cfg.d}, seed, "fqs.z");
    centers = make_centers(1, 4, seed + 7);
    faca(z, centers, s.low, s.high, ps, "fqs.dec0.faca.", cfg, &ctx);
    if (min_frac_margin(ctx) > 1e-3) break;
    REQUIRE(seed < 500);
  }
  Tensor cot = random_tensor({1, 4, cfg.d}, 612, "fqs.cot");
  GradStore gs;
  FacaGrads g = faca_vjp(ctx, ps, "fqs.dec0.faca.", cfg, cot, gs);

  const std::vector<std::string> probed = {"fqs.dec0.faca.off.w", "fqs.dec0.faca.off.b",
                                           "fqs.dec0.faca.att.w", "fqs.dec0.faca.att.b",
                                           "fqs.dec0.faca.val.w", "fqs.dec0.faca.out.w"};
  FdCase fd;
  fd.inputs = {z, centers, s.low.l3, s.low.l4, s.low.l5, s.high.l3, s.high.l4, s.high.l5};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.forward = [&](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[8 + i];
    Pyramid low{in[2], in[3], in[4]}, high{in[5], in[6], in[7]};
    return faca(in[0], in[1], low, high, local, "fqs.dec0.faca.", cfg);
  };
  fd.cotangent = cot;
  fd.analytic = {g.gz,      g.gcenters, g.glow.l3,  g.glow.l4, g.glow.l5,
                 g.ghigh.l3, g.ghigh.l4, g.ghigh.l5};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {5, 1, 7, 3, 1, 7, 3, 1, 29, 7, 19, 5, 5, 13};
  FdReport rep = fd_check(fd);
  CHECK(rep.elements > 80);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("zero refinement keeps anchor logits fixed through the decoder") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(79);
  fqs_register(ps, cfg);
  zero_param(ps, "fqs.dec0.ref.w");
  zero_param(ps, "fqs.dec1.ref.w");
  TwoStreams s = make_streams(cfg, 3);
  Tensor z0 = random_tensor({1, 4, cfg.d}, 701, "fqs.z0");
  Tensor logits0 = random_tensor({1, 4, 4}, 702, "fqs.lg", 3.0);
  DecodeOutputs out = decode(z0, logits0, s.low, s.high, ps, cfg);
  CHECK(same_bits(out.anchor_logits, logits0));
}

TEST_CASE("a one-layer decode equals the hand-composed sequence") {
  FqsConfig cfg = tiny_cfg();
  cfg.layers = 1;
  ParamStore ps(83);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.pos.b1", 703, 0.3);
  randomize(ps, "fqs.dec0.sa.ln.g", 704, 0.3);
  randomize(ps, "fqs.dec0.faca.off.b", 705, 0.5);
  randomize(ps, "fqs.dec0.faca.att.b", 706, 0.5);
  randomize(ps, "fqs.dec0.ffn.b1", 707, 0.3);
  randomize(ps, "fqs.dec0.ref.b", 708, 0.5);
  TwoStreams s = make_streams(cfg, 9);
  Tensor z0 = random_tensor({1, 4, cfg.d}, 709, "fqs.z0");
  Tensor logits0 = random_tensor({1, 4, 4}, 710, "fqs.lg", 2.0);
  DecodeOutputs out = decode(z0, logits0, s.low, s.high, ps, cfg);

  Tensor anchors = sigmoid(logits0);
  Tensor p = positional_query(anchors, ps);
  Tensor z_sa = decoder_self_attention(z0, p, ps, "fqs.dec0.sa.", cfg);
  Tensor centers({1, 4, 2});
  for (std::int64_t q = 0; q < 4; ++q) {
    centers.at(0, q, 0) = anchors.at(0, q, 0);
    centers.at(0, q, 1) = anchors.at(0, q, 1);
  }
  Tensor f = faca(z_sa, centers, s.low, s.high, ps, "fqs.dec0.faca.", cfg);
  Tensor z_cross =
      layer_norm(add(z_sa, f), ps.get("fqs.dec0.faca.ln.g"), ps.get("fqs.dec0.faca.ln.b"));
  Tensor hidden = relu(linear(z_cross, ps.get("fqs.dec0.ffn.w1"), ps.get("fqs.dec0.ffn.b1")));
  Tensor z_out = layer_norm(
      add(z_cross, linear(hidden, ps.get("fqs.dec0.ffn.w2"), ps.get("fqs.dec0.ffn.b2"))),
      ps.get("fqs.dec0.ffn.ln.g"), ps.get("fqs.dec0.ffn.ln.b"));
  Tensor delta = linear(z_out, ps.get("fqs.dec0.ref.w"), ps.get("fqs.dec0.ref.b"));
  Tensor logits = add(logits0, delta);
  for (std::int64_t i = 0; i < logits.size(); ++i)
    logits[i] = std::clamp(logits[i], -8.0, 8.0);

  CHECK(max_abs_diff(out.z, z_out) == 0.0);
  CHECK(max_abs_diff(out.anchor_logits, logits) == 0.0);
}

TEST_CASE("decoded anchors stay inside the unit box") {
  FqsConfig cfg = tiny_cfg();
  cfg.layers = 6;
  ParamStore ps(89);
  fqs_register(ps, cfg);
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    TwoStreams s = make_streams(cfg, seed);
    Tensor z0 = random_tensor({1, 4, cfg.d}, seed, "fqs.z0");
    Tensor logits0 = random_tensor({1, 4, 4}, seed, "fqs.lg", 6.0);
    DecodeOutputs out = decode(z0, logits0, s.low, s.high, ps, cfg);
    Tensor box = sigmoid(out.anchor_logits);
    for (std::int64_t i = 0; i < box.size(); ++i) {
      CHECK(std::abs(out.anchor_logits[i]) <= 8.0);
      CHECK(box[i] >= 0.0);
      CHECK(box[i] <= 1.0);
    }
    if (seed == 0) {
      DecodeOutputs again = decode(z0, logits0, s.low, s.high, ps, cfg);
      CHECK(same_bits(again.z, out.z));
      CHECK(same_bits(again.anchor_logits, out.anchor_logits));
    }
  }
}

TEST_CASE("decoder backward matches finite differences") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(97);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.pos.b1", 801, 0.3);
  randomize(ps, "fqs.dec0.ffn.b1", 802, 0.3);
  randomize(ps, "fqs.dec1.ffn.b1", 803, 0.3);
  randomize(ps, "fqs.dec0.faca.off.b", 804, 0.5);
  randomize(ps, "fqs.dec1.faca.off.b", 805, 0.5);
  TwoStreams s;
  Tensor z0, logits0;
  DecodeCtx ctx;
  for (std::uint64_t seed = 0;; ++seed) {
    s = make_streams(cfg, seed);
    z0 = random_tensor({1, 4, cfg.d}, seed, "fqs.z0");
    logits0 = random_tensor({1, 4, 4}, seed, "fqs.lg", 2.0);
    decode(z0, logits0, s.low, s.high, ps, cfg, &ctx);
    if (decode_guard_margin(ctx) > 1e-3) break;
    REQUIRE(seed < 500);
  }
  Tensor gz = random_tensor({1, 4, cfg.d}, 806, "fqs.gz");
  Tensor glogits = random_tensor({1, 4, 4}, 807, "fqs.gl");
  GradStore gs;
  DecodeGrads g = decode_backward(ctx, ps, cfg, gz, glogits, gs);

  const std::vector<std::string> probed = {"fqs.pos.w1", "fqs.dec0.sa.wv",
                                           "fqs.dec1.faca.val.w", "fqs.dec0.ffn.w1",
                                           "fqs.dec1.ref.w"};
  FdCase fd;
  fd.inputs = {z0, logits0, s.low.l3, s.low.l4, s.low.l5, s.high.l3, s.high.l4, s.high.l5};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.forward = [&](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[8 + i];
    Pyramid low{in[2], in[3], in[4]}, high{in[5], in[6], in[7]};
    DecodeOutputs o = decode(in[0], in[1], low, high, local, cfg);
    return flat_pair(o.z, o.anchor_logits);
  };
  fd.cotangent = flat_pair(gz, glogits);
  fd.analytic = {g.gz0,      g.glogits0, g.glow.l3,  g.glow.l4, g.glow.l5,
                 g.ghigh.l3, g.ghigh.l4, g.ghigh.l5};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {3, 1, 7, 3, 1, 7, 3, 1, 7, 13, 5, 17, 7};
  FdReport rep = fd_check(fd);
  CHECK(rep.elements > 80);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("decoder backward demands a populated context") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(101);
  fqs_register(ps, cfg);
  DecodeCtx empty;
  GradStore gs;
  Tensor gz({1, 4, cfg.d}), glogits({1, 4, 4});
  CHECK_THROWS_WITH_AS(decode_backward(empty, ps, cfg, gz, glogits, gs),
                       doctest::Contains("WDFQ_E_ARG"), Error);
}

TEST_CASE("a closed gate makes its stream inert bitwise") {
  FqsConfig cfg = tiny_cfg();

  // High stream forced shut: rewriting its pyramid must not move a single bit.
  ParamStore ps(103);
  fqs_register(ps, cfg);
  ps.get("fqs.gate.high.b2")[0] = -800.0;
  TwoStreams s1 = make_streams(cfg, 3);
  FqsOutputs a = fqs_run(s1.high, s1.low, ps, cfg);
  CHECK(a.gate_high.at(0, 0) == 0.0);
  TwoStreams s2 = s1;
  s2.high.l3 = random_tensor(s1.high.l3.shape(), 904, "fqs.n3", 5.0);
  s2.high.l4 = random_tensor(s1.high.l4.shape(), 905, "fqs.n4", 5.0);
  s2.high.l5 = random_tensor(s1.high.l5.shape(), 906, "fqs.n5", 5.0);
  FqsOutputs b = fqs_run(s2.high, s2.low, ps, cfg);
  CHECK(same_bits(a.z, b.z));
  CHECK(same_bits(a.anchor_logits, b.anchor_logits));
  CHECK(same_bits(a.gate_low, b.gate_low));

  // Same story with the low stream shut.
  ParamStore ps2(107);
  fqs_register(ps2, cfg);
  ps2.get("fqs.gate.low.b2")[0] = -800.0;
  FqsOutputs c = fqs_run(s1.high, s1.low, ps2, cfg);
  CHECK(c.gate_low.at(0, 0) == 0.0);
  TwoStreams s3 = s1;
  s3.low.l3 = random_tensor(s1.low.l3.shape(), 907, "fqs.m3", 5.0);
  s3.low.l4 = random_tensor(s1.low.l4.shape(), 908, "fqs.m4", 5.0);
  s3.low.l5 = random_tensor(s1.low.l5.shape(), 909, "fqs.m5", 5.0);
  FqsOutputs d = fqs_run(s3.high, s3.low, ps2, cfg);
  CHECK(same_bits(c.z, d.z));
  CHECK(same_bits(c.anchor_logits, d.anchor_logits));
  CHECK(same_bits(c.gate_high, d.gate_high));
}

TEST_CASE("fqs forward is deterministic and emits the configured queries") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(109);
  fqs_register(ps, cfg);
  TwoStreams s = make_streams(cfg, 9, 2);
  FqsCtx ctx;
  FqsOutputs a = fqs_run(s.high, s.low, ps, cfg, &ctx);
  FqsOutputs b = fqs_run(s.high, s.low, ps, cfg);
  CHECK(same_bits(a.z, b.z));
  CHECK(same_bits(a.anchor_logits, b.anchor_logits));
  REQUIRE(a.z.rank() == 3);
  CHECK(a.z.extent(0) == 2);
  CHECK(a.z.extent(1) == cfg.queries);
  CHECK(a.z.extent(2) == cfg.d);
  CHECK(a.anchor_logits.extent(2) == 4);
  CHECK(ctx.sel.picked.size() == static_cast<std::size_t>(2 * cfg.queries));
  for (std::int64_t i = 0; i < a.anchor_logits.size(); ++i)
    CHECK(std::abs(a.anchor_logits[i]) <= 8.0);
  for (std::int64_t b2 = 0; b2 < 2; ++b2) {
    CHECK(a.gate_high.at(b2, 0) > 0.0);
    CHECK(a.gate_high.at(b2, 0) < 1.0);
    CHECK(a.gate_low.at(b2, 0) > 0.0);
    CHECK(a.gate_low.at(b2, 0) < 1.0);
  }
}

TEST_CASE("fqs backward matches finite differences") {
  FqsConfig cfg = tiny_cfg();
  ParamStore ps(113);
  fqs_register(ps, cfg);
  randomize(ps, "fqs.gate.high.b1", 951, 0.3);
  randomize(ps, "fqs.gate.low.b1", 952, 0.3);
  randomize(ps, "fqs.pos.b1", 953, 0.3);
  randomize(ps, "fqs.box.b", 954, 0.3);
  randomize(ps, "fqs.dec0.ffn.b1", 955, 0.3);
  randomize(ps, "fqs.dec1.ffn.b1", 956, 0.3);
  randomize(ps, "fqs.dec0.faca.off.b", 957, 0.5);
  randomize(ps, "fqs.dec1.faca.off.b", 958, 0.5);
  TwoStreams s;
  FqsCtx ctx;
  for (std::uint64_t seed = 0;; ++seed) {
    s = make_streams(cfg, seed);
    fqs_run(s.high, s.low, ps, cfg, &ctx);
    const bool ok = min_topk_gap(ctx.sel.scores, cfg.queries) > 1e-3 &&
                    min_abs(ctx.gate.high.pre1) > 1e-3 && min_abs(ctx.gate.low.pre1) > 1e-3 &&
                    clamp_margin(ctx.sel.box_pre, 8.0) > 1e-3 && decode_guard_margin(ctx.dec) > 1e-3;
    if (ok) break;
    REQUIRE(seed < 500);
  }
  FqsOutputs out = fqs_run(s.high, s.low, ps, cfg, &ctx);
  Tensor gz = random_tensor(out.z.shape(), 960, "fqs.gz");
  Tensor glogits = random_tensor(out.anchor_logits.shape(), 961, "fqs.gl");
  GradStore gs;
  FqsGrads g = fqs_backward(ctx, ps, cfg, gz, glogits, gs);

  const std::vector<std::string> probed = {
      "fqs.tok.high.w",      "fqs.tok.low.w",      "fqs.gate.high.w1", "fqs.gate.low.w2",
      "fqs.box.w",           "fqs.pos.w1",         "fqs.dec0.sa.wq",   "fqs.dec0.faca.off.w",
      "fqs.dec1.faca.att.w", "fqs.dec1.ffn.w1",    "fqs.dec1.ref.w"};
  FdCase fd;
  fd.inputs = {s.high.l3, s.high.l4, s.high.l5, s.low.l3, s.low.l4, s.low.l5};
  for (const std::string& name : probed) fd.inputs.push_back(ps.get(name));
  fd.forward = [&](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    for (std::size_t i = 0; i < probed.size(); ++i) local.get(probed[i]) = in[6 + i];
    Pyramid high{in[0], in[1], in[2]}, low{in[3], in[4], in[5]};
    FqsOutputs o = fqs_run(high, low, local, cfg);
    return flat_pair(o.z, o.anchor_logits);
  };
  fd.cotangent = flat_pair(gz, glogits);
  fd.analytic = {g.ghigh.l3, g.ghigh.l4, g.ghigh.l5, g.glow.l3, g.glow.l4, g.glow.l5};
  for (const std::string& name : probed) fd.analytic.push_back(*gs.find(name));
  fd.probe_stride = {7, 3, 1, 7, 3, 1, 5, 5, 13, 3, 7, 7, 13, 41, 23, 17, 7};
  FdReport rep = fd_check(fd);
  CHECK(rep.elements > 80);
  CHECK(rep.max_rel_err < 1e-5);
}
