#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "test_utils.hpp"
#include "wdfq/gradcheck.hpp"
#include "wdfq/lfha.hpp"

using namespace wdfq;
using testutil::max_abs_diff;
using testutil::random_tensor;

TEST_CASE("channel_swap trades the first half of channels") {
  Tensor a = Tensor::full({1, 2, 2, 2}, 1.0);
  Tensor b({1, 2, 2, 2});
  auto [ap, bp] = channel_swap(a, b);
  for (std::int64_t p = 0; p < 4; ++p) {
    CHECK(ap[p] == 0.0);       // channel 0 came from b
    CHECK(ap[4 + p] == 1.0);   // channel 1 stayed
    CHECK(bp[p] == 1.0);
    CHECK(bp[4 + p] == 0.0);
  }
}

TEST_CASE("channel_swap fixed point and involution") {
  Tensor a = random_tensor({2, 4, 3, 3}, 13, "cs.a");
  Tensor b = random_tensor({2, 4, 3, 3}, 13, "cs.b");
  auto [sa, sb] = channel_swap(a, a);
  CHECK(max_abs_diff(sa, a) == 0.0);
  CHECK(max_abs_diff(sb, a) == 0.0);
  auto [ap, bp] = channel_swap(a, b);
  auto [a2, b2] = channel_swap(ap, bp);
  CHECK(max_abs_diff(a2, a) == 0.0);
  CHECK(max_abs_diff(b2, b) == 0.0);
  CHECK_THROWS_WITH_AS(channel_swap(Tensor({1, 3, 2, 2}), Tensor({1, 3, 2, 2})),
                       doctest::Contains("WDFQ_E_CONFIG"), Error);
}

TEST_CASE("eca gates") {
  Tensor x = random_tensor({1, 5, 3, 3}, 21, "eca.x");
  Tensor zero_kernel(Shape{3});
  Tensor y = eca(x, zero_kernel);
  for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y[i] == 0.5 * x[i]);

  Tensor zx({1, 5, 3, 3});
  Tensor k = random_tensor({3}, 9, "eca.k");
  CHECK(eca(zx, k).as_vector().cwiseAbs().maxCoeff() == 0.0);

  Tensor y2 = eca(x, k);
  Tensor want = oracle::naive_eca(x, k);
  CHECK(max_abs_diff(y2, want) < 1e-14);

  // gate in (0,1): per-channel output magnitude strictly below input
  for (std::int64_t ch = 0; ch < 5; ++ch)
    for (std::int64_t p = 0; p < 9; ++p) {
      const double xi = x[ch * 9 + p], yi = y2[ch * 9 + p];
      if (xi != 0.0) CHECK(std::fabs(yi) < std::fabs(xi));
    }
}

TEST_CASE("eca vjp matches finite differences") {
  Tensor x = random_tensor({2, 4, 2, 3}, 22, "eca.fd.x");
  Tensor k = random_tensor({3}, 22, "eca.fd.k");
  EcaCtx ctx;
  Tensor y = eca(x, k, &ctx);
  Tensor cot = random_tensor(y.shape(), 22, "eca.fd.cot");
  EcaGrads g = eca_vjp(ctx, k, cot);
  FdCase fd;
  fd.inputs = {x, k};
  fd.forward = [](const std::vector<Tensor>& in) { return eca(in[0], in[1]); };
  fd.cotangent = cot;
  fd.analytic = {g.gx, g.gkernel};
  CHECK(fd_check(fd).max_rel_err < 1e-7);
}

namespace {

struct CmaFixture {
  Tensor wf, wg, wh, wproj, bproj;
  CrossModalParams params() const { return {&wf, &wg, &wh, &wproj, &bproj}; }
  CmaFixture(std::int64_t c, std::int64_t da, std::uint64_t seed, bool zero_f = false) {
    wf = zero_f ? Tensor({da, c}) : random_tensor({da, c}, seed, "cma.wf");
    wg = random_tensor({da, c}, seed, "cma.wg");
    wh = random_tensor({da, c}, seed, "cma.wh");
    wproj = random_tensor({c, da}, seed, "cma.wproj");
    bproj = random_tensor({c}, seed, "cma.bproj");
  }
};

}  // namespace

TEST_CASE("cross_modal_align matches the scalar loop oracle") {
  CmaFixture fx(4, 4, 3);
  Tensor fq = random_tensor({1, 4, 2, 2}, 3, "cma.q");
  Tensor fkv = random_tensor({1, 4, 2, 2}, 3, "cma.kv");
  Tensor got = cross_modal_align(fq, fkv, fx.params());
  Tensor want = oracle::naive_cross_modal_align(fq, fkv, fx.wf, fx.wg, fx.wh, fx.wproj, fx.bproj);
  CHECK(max_abs_diff(got, want) < 1e-12);
}

TEST_CASE("single-token attention is the identity mix") {
  CmaFixture fx(3, 3, 7);
  Tensor fq = random_tensor({1, 3, 1, 1}, 7, "cma1.q");
  Tensor fkv = random_tensor({1, 3, 1, 1}, 7, "cma1.kv");
  Tensor got = cross_modal_align(fq, fkv, fx.params());
  // proj(h(kv)) + bias, since the single attention weight is 1
  for (std::int64_t d0 = 0; d0 < 3; ++d0) {
    double want = fx.bproj[d0];
    for (std::int64_t d = 0; d < 3; ++d) {
      double hv = 0.0;
      for (std::int64_t ch = 0; ch < 3; ++ch) hv += fx.wh.at(d, ch) * fkv[ch];
      want += fx.wproj.at(d0, d) * hv;
    }
    CHECK(got[d0] == doctest::Approx(want).epsilon(1e-13));
  }
}

TEST_CASE("zero query map gives uniform attention over kv tokens") {
  CmaFixture fx(4, 4, 11, /*zero_f=*/true);
  Tensor fq = random_tensor({1, 4, 2, 3}, 11, "cmau.q");
  Tensor fkv = random_tensor({1, 4, 2, 3}, 11, "cmau.kv");
  CrossModalCtx ctx;
  Tensor got = cross_modal_align(fq, fkv, fx.params(), &ctx);

  // every output token equals proj(h(mean kv token)) + bias
  for (std::int64_t t0 = 0; t0 < 6; ++t0)
    for (std::int64_t ch = 0; ch < 4; ++ch)
      CHECK(got.at(0, ch, t0 / 3, t0 % 3) ==
            doctest::Approx(got.at(0, ch, 0, 0)).epsilon(1e-12));

  // permuting kv tokens leaves the uniform mix unchanged
  Tensor fkv_perm(fkv.shape());
  const std::int64_t perm[6] = {4, 2, 0, 5, 1, 3};
  for (std::int64_t ch = 0; ch < 4; ++ch)
    for (std::int64_t t0 = 0; t0 < 6; ++t0)
      fkv_perm.at(0, ch, t0 / 3, t0 % 3) = fkv.at(0, ch, perm[t0] / 3, perm[t0] % 3);
  Tensor got_perm = cross_modal_align(fq, fkv_perm, fx.params());
  CHECK(max_abs_diff(got, got_perm) < 1e-12);
}

TEST_CASE("attention rows sum to one") {
  CmaFixture fx(4, 4, 15);
  Tensor fq = random_tensor({2, 4, 2, 2}, 15, "cmar.q", 3.0);
  Tensor fkv = random_tensor({2, 4, 2, 2}, 15, "cmar.kv", 3.0);
  CrossModalCtx ctx;
  cross_modal_align(fq, fkv, fx.params(), &ctx);
  const std::int64_t t = 4;
  for (std::int64_t b = 0; b < 2; ++b)
    for (std::int64_t i = 0; i < t; ++i) {
      double sum = 0.0;
      for (std::int64_t j = 0; j < t; ++j) sum += ctx.attn[(b * t + i) * t + j];
      CHECK(std::fabs(sum - 1.0) <= 1e-12);
    }
}

TEST_CASE("cross_modal_align vjp matches finite differences") {
  CmaFixture fx(3, 3, 31);
  Tensor fq = random_tensor({1, 3, 2, 2}, 31, "cmafd.q");
  Tensor fkv = random_tensor({1, 3, 2, 2}, 31, "cmafd.kv");
  CrossModalCtx ctx;
  Tensor y = cross_modal_align(fq, fkv, fx.params(), &ctx);
  Tensor cot = random_tensor(y.shape(), 31, "cmafd.cot");
  CrossModalGrads g = cross_modal_align_vjp(ctx, fx.params(), cot);

  FdCase fd;
  fd.inputs = {fq, fkv, fx.wf, fx.wg, fx.wh, fx.wproj, fx.bproj};
  fd.forward = [&](const std::vector<Tensor>& in) {
    CrossModalParams p{&in[2], &in[3], &in[4], &in[5], &in[6]};
    return cross_modal_align(in[0], in[1], p);
  };
  fd.cotangent = cot;
  fd.analytic = {g.gfl_q, g.gfl_kv, g.gwf, g.gwg, g.gwh, g.gwproj, g.gbproj};
  CHECK(fd_check(fd).max_rel_err < 1e-6);
}

TEST_CASE("full lfha stage runs and backpropagates") {
  ParamStore ps(41);
  lfha_register_shared(ps);
  lfha_register(ps, 3, 4);
  Tensor ll_ir = random_tensor({1, 4, 2, 2}, 41, "lfha.ir");
  Tensor ll_rgb = random_tensor({1, 4, 2, 2}, 41, "lfha.rgb");
  LfhaCtx ctx;
  Tensor y = lfha_apply(ll_ir, ll_rgb, ps, 3, &ctx);
  REQUIRE(y.shape() == ll_ir.shape());

  Tensor cot = random_tensor(y.shape(), 41, "lfha.cot");
  GradStore gs;
  LfhaGrads g = lfha_backward(ctx, ps, 3, cot, gs);

  FdCase fd;
  fd.inputs = {ll_ir, ll_rgb, ps.get("lfha.l3.g.w"), ps.get("lfha.eca.ir.k")};
  fd.forward = [&](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    local.get("lfha.l3.g.w") = in[2];
    local.get("lfha.eca.ir.k") = in[3];
    return lfha_apply(in[0], in[1], local, 3);
  };
  fd.cotangent = cot;
  fd.analytic = {g.gll_ir, g.gll_rgb, *gs.find("lfha.l3.g.w"), *gs.find("lfha.eca.ir.k")};
  CHECK(fd_check(fd).max_rel_err < 1e-6);
}
