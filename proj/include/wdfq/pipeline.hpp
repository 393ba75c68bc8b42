#pragma once

#include <array>
#include <string>
#include <vector>

#include "wdfq/backbone.hpp"
#include "wdfq/config.hpp"
#include "wdfq/detect.hpp"
#include "wdfq/fqs.hpp"
#include "wdfq/hfe.hpp"
#include "wdfq/hfsr.hpp"
#include "wdfq/lfha.hpp"
#include "wdfq/params.hpp"
#include "wdfq/wavelet.hpp"

namespace wdfq {

// Creates every parameter the full pipeline needs: shared backbone, per-level
// high-band reducers, alignment and retention blocks, both enhancement
// streams, the query-selection decoder, and the class head.
void pipeline_register(ParamStore& ps, const PipelineConfig& cfg);

struct LevelCtx {
  WaveletBands ir, rgb;      // populated only when the wavelet stage is on
  Tensor low_ir, low_rgb;    // LL bands, or 2x2 mean pools when it is off
  Tensor high_ir, high_rgb;  // reduced detail bands, or zeros when it is off
  LfhaCtx lfha;
  HfsrCtx hfsr;
  Tensor fl, fh;             // fused low/high features at half resolution
};

struct ForwardCtx {
  BackboneCtx bb_ir, bb_rgb;
  Pyramid spatial_ir, spatial_rgb;
  std::array<LevelCtx, 3> level;  // levels 3, 4, 5
  HfeStreamCtx hfe_low, hfe_high;
  FqsCtx fqs;
};

struct ForwardOutputs {
  FqsOutputs fqs;
  Tensor logits;  // [N,K,C]
  Tensor boxes;   // [N,K,4], sigmoid of the anchor logits
  std::vector<std::vector<Detection>> detections;
  Pyramid low, high;  // fused frequency pyramids lifted to level resolution
  double l_grad = 0.0;  // per-level gradient-consistency means, summed
};

// rgb and ir: [N,3,H,W] with H and W divisible by 64. Pass `ctx` to retain
// everything the backward pass and the diagnostics need.
ForwardOutputs pipeline_forward(const Tensor& rgb, const Tensor& ir, const ParamStore& ps,
                                const PipelineConfig& cfg, ForwardCtx* ctx = nullptr);

struct SampleLosses {
  double box = 0.0, cls = 0.0, grad = 0.0, total = 0.0;
  std::vector<std::int64_t> assignment;
};

// Single-sample (N == 1) detection losses against the forward outputs.
SampleLosses pipeline_loss(const ForwardOutputs& fwd, const std::vector<GtItem>& gts,
                           const PipelineConfig& cfg);

// Accumulates d(L_box + L_cls + L_grad)/d(params) for one sample. The
// matching assignment is the one pipeline_loss produced and is held fixed.
void pipeline_backward(const ForwardCtx& ctx, const ForwardOutputs& fwd,
                       const std::vector<GtItem>& gts,
                       const std::vector<std::int64_t>& assignment, const ParamStore& ps,
                       const PipelineConfig& cfg, GradStore& gs);

struct DatasetItem {
  std::string rgb, ir;  // image paths, resolved against the dataset file
  std::vector<GtItem> gts;
};

// JSON array of {rgb, ir, boxes: [{cls, cx, cy, w, h}]} with normalized
// coordinates; relative image paths are resolved against the JSON directory.
std::vector<DatasetItem> load_dataset(const std::string& path);

struct StepLosses {
  double box = 0.0, cls = 0.0, grad = 0.0, total = 0.0;
};

// Full-batch gradient descent: per-step dataset-mean losses are recorded
// before the update, per-sample gradients are reduced in sample order (so any
// thread count produces identical bits), the global gradient norm is clipped
// at 10, and a non-finite loss aborts with the step index. Returns one entry
// per step.
std::vector<StepLosses> train_toy(ParamStore& ps, const std::vector<DatasetItem>& items,
                                  const PipelineConfig& cfg, int threads = 1);

void write_trace_csv(const std::string& path, const std::vector<StepLosses>& trace);

// {"detections": [{cls, score, cx, cy, w, h}]} sorted by descending score,
// ties kept in query order.
void write_detections_json(const std::string& path, const std::vector<Detection>& dets);

struct LevelDiag {
  int level = 0;
  double mean_gap = 0.0;    // between the two modalities' low-band fits
  double kl_low = 0.0;      // IR low population against RGB low population
  double kl_high = 0.0;     // same for the reduced high bands
  double trace_orth_high = 0.0;
};

// Gaussian-fit comparison of the per-modality frequency populations, one
// entry per pyramid level, computed on the bands lifted to level resolution.
std::vector<LevelDiag> diag_levels(const ForwardCtx& ctx);

void write_diag_json(const std::string& path, const std::vector<LevelDiag>& levels);

// Writes the four-pair 64x64 toy dataset (PPM/PGM images plus dataset.json)
// into `dir`. Content is deterministic.
void write_synthetic_dataset(const std::string& dir);

}  // namespace wdfq
