#include <cmath>

#include "doctest.h"
#include "test_utils.hpp"
#include "wdfq/backbone.hpp"
#include "wdfq/gradcheck.hpp"

using namespace wdfq;
using testutil::max_abs_diff;
using testutil::random_tensor;

TEST_CASE("backbone emits strides 8/16/32 with configured channels") {
  BackboneConfig cfg;
  cfg.c0 = 16;
  cfg.c3 = 32;
  cfg.c4 = 64;
  cfg.c5 = 128;
  cfg.blocks = 1;
  ParamStore ps(3);
  backbone_register(ps, cfg);
  Tensor img = random_tensor({1, 3, 64, 64}, 3, "bb.img");
  Pyramid p = backbone_forward(img, ps, cfg);
  CHECK(p.l3.shape() == Shape{1, 32, 8, 8});
  CHECK(p.l4.shape() == Shape{1, 64, 4, 4});
  CHECK(p.l5.shape() == Shape{1, 128, 2, 2});

  Tensor wide = random_tensor({1, 3, 64, 128}, 3, "bb.img.wide");
  Pyramid pw = backbone_forward(wide, ps, cfg);
  CHECK(pw.l5.shape() == Shape{1, 128, 2, 4});
}

TEST_CASE("backbone rejects indivisible extents and bad channel order") {
  BackboneConfig cfg;
  ParamStore ps(3);
  backbone_register(ps, cfg);
  CHECK_THROWS_WITH_AS(backbone_forward(Tensor({1, 3, 32, 64}), ps, cfg),
                       doctest::Contains("WDFQ_E_DIVISIBLE"), Error);
  BackboneConfig bad;
  bad.c4 = bad.c3;
  CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("one parameter set serves both modalities") {
  BackboneConfig cfg;
  ParamStore ps(9);
  backbone_register(ps, cfg);
  Tensor a = random_tensor({1, 3, 64, 64}, 5, "bb.mod");
  Pyramid pa = backbone_forward(a, ps, cfg);
  Pyramid pb = backbone_forward(a, ps, cfg);
  CHECK(max_abs_diff(pa.l3, pb.l3) == 0.0);
  CHECK(max_abs_diff(pa.l5, pb.l5) == 0.0);
}

TEST_CASE("zero image with zero biases gives zero pyramids") {
  BackboneConfig cfg;
  ParamStore ps(4);
  backbone_register(ps, cfg);  // biases start at zero
  Pyramid p = backbone_forward(Tensor({1, 3, 64, 64}), ps, cfg);
  CHECK(p.l3.as_vector().cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.l4.as_vector().cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.l5.as_vector().cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("backbone backward matches finite differences") {
  BackboneConfig cfg;
  cfg.c0 = 2;
  cfg.c3 = 2;
  cfg.c4 = 3;
  cfg.c5 = 4;
  cfg.blocks = 1;

  // keep all pre-activations away from the max(0,.) kink so central
  // differences stay on one side
  std::uint64_t seed = 100;
  ParamStore ps(seed);
  backbone_register(ps, cfg);
  Tensor img;
  BackboneCtx ctx;
  Pyramid p;
  for (;; ++seed) {
    ParamStore fresh(seed);
    backbone_register(fresh, cfg);
    ps = fresh;
    img = random_tensor({1, 3, 64, 64}, seed, "bb.fd.img");
    ctx = BackboneCtx{};
    p = backbone_forward(img, ps, cfg, &ctx);
    double min_pre = 1e9;
    for (const Tensor* t : {&ctx.stem.pre, &ctx.s2.down.pre, &ctx.s3.down.pre,
                            &ctx.s4.down.pre, &ctx.s5.down.pre, &ctx.s2.blocks[0].pre,
                            &ctx.s3.blocks[0].pre, &ctx.s4.blocks[0].pre, &ctx.s5.blocks[0].pre})
      min_pre = std::min(min_pre, t->as_vector().cwiseAbs().minCoeff());
    if (min_pre > 1e-3) break;
  }

  Tensor g3 = random_tensor(p.l3.shape(), seed, "bb.fd.g3");
  Tensor g4 = random_tensor(p.l4.shape(), seed, "bb.fd.g4");
  Tensor g5 = random_tensor(p.l5.shape(), seed, "bb.fd.g5");
  GradStore gs;
  Tensor gimg;
  backbone_backward(ctx, ps, cfg, g3, g4, g5, gs, &gimg);

  FdCase fd;
  fd.inputs = {img, ps.get("bb.stem.w"), ps.get("bb.s4.blk0.w"), ps.get("bb.s5.down.b")};
  fd.forward = [&](const std::vector<Tensor>& in) {
    ParamStore local = ps;
    local.get("bb.stem.w") = in[1];
    local.get("bb.s4.blk0.w") = in[2];
    local.get("bb.s5.down.b") = in[3];
    Pyramid q = backbone_forward(in[0], local, cfg);
    return concat({q.l3.reshaped({q.l3.size()}), q.l4.reshaped({q.l4.size()}),
                   q.l5.reshaped({q.l5.size()})},
                  0);
  };
  fd.cotangent = concat({g3.reshaped({g3.size()}), g4.reshaped({g4.size()}),
                         g5.reshaped({g5.size()})},
                        0);
  fd.analytic = {gimg, *gs.find("bb.stem.w"), *gs.find("bb.s4.blk0.w"),
                 *gs.find("bb.s5.down.b")};
  fd.probe_stride = {641, 3, 2, 1};
  FdReport rep = fd_check(fd);
  CHECK(rep.elements > 50);
  CHECK(rep.max_rel_err < 1e-5);
}
