#pragma once

#include <cstdint>
#include <string>

#include "wdfq/backbone.hpp"
#include "wdfq/detect.hpp"
#include "wdfq/fqs.hpp"
#include "wdfq/hfe.hpp"

namespace wdfq {

// One flat bundle for the whole pipeline. The field defaults are the
// full-scale profile; base_profile("test") shrinks every extent so a forward
// pass and the toy training loop run in seconds on one CPU core.
struct PipelineConfig {
  BackboneConfig backbone{64, 128, 256, 512, 2};
  bool wavelet = true;           // false: low band = 2x2 mean pool, high = zeros
  std::int64_t ce = 256;         // fused pyramid width
  std::int64_t d = 256;          // decoder embedding width
  int heads = 8;
  int layers = 6;                // decoder layers
  std::int64_t queries = 300;
  int points = 4;                // sampling points per (head, level, stream)
  int rep_blocks = 3;
  std::int64_t classes = 3;
  MatchWeights loss_weights;     // cls/l1/giou = 2/5/2
  std::uint64_t seed = 2026;
  double step_size = 0.05;       // plain gradient descent
  int steps = 200;

  void validate() const;

  HfeConfig hfe() const;
  FqsConfig fqs() const;
  DetectConfig detect() const;
};

// "paper" is the default-constructed config above; "test" is the small
// profile. Anything else raises a config error.
PipelineConfig base_profile(const std::string& name);

// Flat key=value lines, '#' starts a comment, blank lines ignored. An
// optional `profile` key (at most once, applied first regardless of position)
// picks the base; every other key overrides a single field and unknown keys
// are hard errors.
PipelineConfig parse_config_text(const std::string& text);
PipelineConfig load_config(const std::string& path);

}  // namespace wdfq
