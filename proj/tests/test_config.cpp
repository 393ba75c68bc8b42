#include <cstdint>
#include <cstdio>

#include "doctest.h"
#include "wdfq/config.hpp"
#include "wdfq/errors.hpp"

using namespace wdfq;

TEST_CASE("default config is the paper profile") {
  PipelineConfig cfg;
  PipelineConfig paper = base_profile("paper");
  CHECK(cfg.backbone.c0 == 64);
  CHECK(cfg.backbone.c3 == 128);
  CHECK(cfg.backbone.c4 == 256);
  CHECK(cfg.backbone.c5 == 512);
  CHECK(cfg.backbone.blocks == 2);
  CHECK(cfg.wavelet);
  CHECK(cfg.ce == 256);
  CHECK(cfg.d == 256);
  CHECK(cfg.heads == 8);
  CHECK(cfg.layers == 6);
  CHECK(cfg.queries == 300);
  CHECK(cfg.points == 4);
  CHECK(cfg.rep_blocks == 3);
  CHECK(cfg.classes == 3);
  CHECK(cfg.loss_weights.cls == 2.0);
  CHECK(cfg.loss_weights.l1 == 5.0);
  CHECK(cfg.loss_weights.giou == 2.0);
  CHECK(cfg.seed == 2026);
  CHECK(cfg.step_size == 0.05);
  CHECK(cfg.steps == 200);
  CHECK(paper.backbone.c5 == cfg.backbone.c5);
  CHECK(paper.d == cfg.d);
  cfg.validate();
}

TEST_CASE("test profile shrinks every extent") {
  PipelineConfig cfg = base_profile("test");
  CHECK(cfg.backbone.c0 == 16);
  CHECK(cfg.backbone.c3 == 32);
  CHECK(cfg.backbone.c4 == 64);
  CHECK(cfg.backbone.c5 == 128);
  CHECK(cfg.backbone.blocks == 1);
  CHECK(cfg.ce == 32);
  CHECK(cfg.d == 32);
  CHECK(cfg.heads == 2);
  CHECK(cfg.layers == 2);
  CHECK(cfg.queries == 10);
  CHECK(cfg.points == 2);
  CHECK(cfg.rep_blocks == 1);
  // the untouched fields keep their full-scale values
  CHECK(cfg.classes == 3);
  CHECK(cfg.seed == 2026);
  CHECK(cfg.steps == 200);
  cfg.validate();

  CHECK_THROWS_WITH_AS(base_profile("huge"), doctest::Contains("WDFQ_E_CONFIG"), Error);
}

TEST_CASE("parse_config_text applies profile first, then overrides") {
  // keys appear before `profile`; the base must still be applied first
  PipelineConfig cfg = parse_config_text(
      "queries = 7   # trailing comment\n"
      "\n"
      "# full-line comment\n"
      "profile = test\n"
      "step_size = 0.125\n"
      "wavelet = false\n"
      "seed = 99\n");
  CHECK(cfg.queries == 7);
  CHECK(cfg.d == 32);  // from the test profile
  CHECK(cfg.step_size == 0.125);
  CHECK_FALSE(cfg.wavelet);
  CHECK(cfg.seed == 99);

  PipelineConfig plain = parse_config_text("");
  CHECK(plain.d == 256);  // no profile key defaults to the paper scale

  CHECK(parse_config_text("wavelet = 1\n").wavelet);
  CHECK_FALSE(parse_config_text("wavelet = 0\n").wavelet);
  CHECK(parse_config_text("lambda_l1 = 3.5\n").loss_weights.l1 == 3.5);
  CHECK(parse_config_text("c4 = 30\nc5 = 16\n").backbone.c4 == 30);
}

TEST_CASE("config errors are config errors") {
  CHECK_THROWS_WITH_AS(parse_config_text("profile = a\nprofile = b\n"),
                       doctest::Contains("more than once"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("profile = giant\n"),
                       doctest::Contains("unknown profile"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("swagger = 3\n"),
                       doctest::Contains("unknown config key"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("queries\n"), doctest::Contains("key=value"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("queries =\n"), doctest::Contains("empty"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("queries = ten\n"),
                       doctest::Contains("wants an integer"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("step_size = fast\n"),
                       doctest::Contains("wants a number"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("wavelet = maybe\n"),
                       doctest::Contains("true/false"), Error);

  // validate() runs on the parsed result
  CHECK_THROWS_WITH_AS(parse_config_text("step_size = 0\n"),
                       doctest::Contains("WDFQ_E_CONFIG"), Error);
  CHECK_THROWS_WITH_AS(parse_config_text("steps = -1\n"), doctest::Contains("WDFQ_E_CONFIG"),
                       Error);
  CHECK_THROWS_WITH_AS(parse_config_text("lambda_cls = -1\n"),
                       doctest::Contains("nonnegative"), Error);
  // d must split evenly across heads
  CHECK_THROWS_WITH_AS(parse_config_text("profile = test\nheads = 3\n"),
                       doctest::Contains("WDFQ_E_CONFIG"), Error);
}

TEST_CASE("derived module configs mirror the bundle") {
  PipelineConfig cfg = base_profile("test");
  HfeConfig hfe = cfg.hfe();
  CHECK(hfe.c3 == cfg.backbone.c3);
  CHECK(hfe.c4 == cfg.backbone.c4);
  CHECK(hfe.c5 == cfg.backbone.c5);
  CHECK(hfe.ce == cfg.ce);
  CHECK(hfe.heads == cfg.heads);
  CHECK(hfe.rep_blocks == cfg.rep_blocks);
  FqsConfig fqs = cfg.fqs();
  CHECK(fqs.d == cfg.d);
  CHECK(fqs.ce == cfg.ce);
  CHECK(fqs.points == cfg.points);
  CHECK(fqs.layers == cfg.layers);
  CHECK(fqs.queries == cfg.queries);
  DetectConfig det = cfg.detect();
  CHECK(det.d == cfg.d);
  CHECK(det.classes == cfg.classes);
}

TEST_CASE("load_config reads files and reports io errors") {
  const std::string path = "wdfq_test_config.cfg";
  {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    REQUIRE(f != nullptr);
    std::fputs("profile = test\nqueries = 4\n", f);
    std::fclose(f);
  }
  PipelineConfig cfg = load_config(path);
  CHECK(cfg.queries == 4);
  CHECK(cfg.ce == 32);
  std::remove(path.c_str());

  CHECK_THROWS_WITH_AS(load_config("no_such_dir/missing.cfg"), doctest::Contains("WDFQ_E_IO"),
                       Error);
}
