#include "wdfq/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <thread>

#include "json.hpp"
#include "wdfq/diag.hpp"
#include "wdfq/errors.hpp"
#include "wdfq/image_io.hpp"
#include "wdfq/ops.hpp"
#include "wdfq/rng.hpp"

namespace wdfq {

namespace {

using nlohmann::json;

constexpr std::array<int, 3> kLevels{3, 4, 5};

std::string wav_name(int level, const char* leaf) {
  return "wav.l" + std::to_string(level) + "." + leaf;
}

const Tensor& pick(const Pyramid& p, int i) { return i == 0 ? p.l3 : (i == 1 ? p.l4 : p.l5); }

Tensor& pick(Pyramid& p, int i) { return i == 0 ? p.l3 : (i == 1 ? p.l4 : p.l5); }

void check_pair_shapes(const Tensor& rgb, const Tensor& ir) {
  if (rgb.rank() != 4 || rgb.extent(1) != 3 || ir.rank() != 4 || ir.extent(1) != 3)
    raise(ErrorCode::Shape, "pipeline expects image tensors [N,3,H,W], got " +
                                shape_str(rgb.shape()) + " and " + shape_str(ir.shape()));
  if (rgb.shape() != ir.shape())
    raise(ErrorCode::Pairing, "modalities disagree on shape: " + shape_str(rgb.shape()) +
                                  " vs " + shape_str(ir.shape()));
  if (rgb.extent(2) % 64 != 0 || rgb.extent(3) % 64 != 0)
    raise(ErrorCode::Divisibility, "image extents must be divisible by 64, got " +
                                       shape_str(rgb.shape()));
}

void scale_store(GradStore& gs, double f) {
  for (auto& [name, g] : gs.all()) g.as_vector() *= f;
}

std::string format_row(int step, const StepLosses& l) {
  char line[192];
  std::snprintf(line, sizeof line, "%d,%.17g,%.17g,%.17g,%.17g\n", step, l.box, l.cls, l.grad,
                l.total);
  return line;
}

double json_number(const json& j, const char* key, std::size_t item) {
  if (!j.contains(key) || !j.at(key).is_number())
    raise(ErrorCode::Format, "dataset item " + std::to_string(item) + " box needs numeric '" +
                                 std::string(key) + "'");
  return j.at(key).get<double>();
}

}  // namespace

void pipeline_register(ParamStore& ps, const PipelineConfig& cfg) {
  cfg.validate();
  backbone_register(ps, cfg.backbone);
  const std::array<std::int64_t, 3> widths{cfg.backbone.c3, cfg.backbone.c4, cfg.backbone.c5};
  for (int i = 0; i < 3; ++i) {
    const int level = kLevels[static_cast<std::size_t>(i)];
    const std::int64_t c = widths[static_cast<std::size_t>(i)];
    ps.create(wav_name(level, "w"), {c, 3 * c, 1, 1}, Init::FanScaledUniform);
    ps.create(wav_name(level, "b"), {c}, Init::Zeros);
    lfha_register(ps, level, c);
    hfsr_register(ps, level, c);
  }
  lfha_register_shared(ps);
  hfe_register(ps, "low", cfg.hfe());
  hfe_register(ps, "high", cfg.hfe());
  fqs_register(ps, cfg.fqs());
  detect_register(ps, cfg.detect());
}

ForwardOutputs pipeline_forward(const Tensor& rgb, const Tensor& ir, const ParamStore& ps,
                                const PipelineConfig& cfg, ForwardCtx* ctx) {
  check_pair_shapes(rgb, ir);
  Pyramid sp_ir = backbone_forward(ir, ps, cfg.backbone, ctx ? &ctx->bb_ir : nullptr);
  Pyramid sp_rgb = backbone_forward(rgb, ps, cfg.backbone, ctx ? &ctx->bb_rgb : nullptr);

  ForwardOutputs out;
  double lgrad = 0.0;
  for (int i = 0; i < 3; ++i) {
    const int level = kLevels[static_cast<std::size_t>(i)];
    Tensor low_ir, low_rgb, high_ir, high_rgb;
    WaveletBands bands_ir, bands_rgb;
    if (cfg.wavelet) {
      bands_ir = dwt_haar(pick(sp_ir, i));
      bands_rgb = dwt_haar(pick(sp_rgb, i));
      const Tensor& w = ps.get(wav_name(level, "w"));
      const Tensor& b = ps.get(wav_name(level, "b"));
      low_ir = bands_ir.ll;
      low_rgb = bands_rgb.ll;
      high_ir = reduce_high(bands_ir.lh, bands_ir.hl, bands_ir.hh, w, b);
      high_rgb = reduce_high(bands_rgb.lh, bands_rgb.hl, bands_rgb.hh, w, b);
    } else {
      low_ir = avg_pool2x(pick(sp_ir, i));
      low_rgb = avg_pool2x(pick(sp_rgb, i));
      high_ir = Tensor(low_ir.shape());
      high_rgb = Tensor(low_rgb.shape());
    }

    LevelCtx* lc = ctx ? &ctx->level[static_cast<std::size_t>(i)] : nullptr;
    Tensor fl = lfha_apply(low_ir, low_rgb, ps, level, lc ? &lc->lfha : nullptr);
    Tensor fh = hfsr_apply(high_rgb, high_ir, ps, level, lc ? &lc->hfsr : nullptr);
    lgrad += grad_consistency_loss(fh, high_rgb, high_ir);

    pick(out.low, i) = lift_to_level(fl);
    pick(out.high, i) = lift_to_level(fh);
    if (lc) {
      lc->ir = std::move(bands_ir);
      lc->rgb = std::move(bands_rgb);
      lc->low_ir = std::move(low_ir);
      lc->low_rgb = std::move(low_rgb);
      lc->high_ir = std::move(high_ir);
      lc->high_rgb = std::move(high_rgb);
      lc->fl = std::move(fl);
      lc->fh = std::move(fh);
    }
  }

  // Low frequency rides on IR spatial cues, high frequency on RGB.
  HfeOutputs elow =
      run_hfe(out.low, sp_ir, ps, "low", cfg.hfe(), ctx ? &ctx->hfe_low : nullptr);
  HfeOutputs ehigh =
      run_hfe(out.high, sp_rgb, ps, "high", cfg.hfe(), ctx ? &ctx->hfe_high : nullptr);
  const Pyramid pyr_low{elow.p3, elow.n4, elow.n5};
  const Pyramid pyr_high{ehigh.p3, ehigh.n4, ehigh.n5};
  out.fqs = fqs_run(pyr_high, pyr_low, ps, cfg.fqs(), ctx ? &ctx->fqs : nullptr);

  out.logits = class_logits(out.fqs.z, ps);
  out.boxes = sigmoid(out.fqs.anchor_logits);
  out.detections = predict(out.fqs.z, out.fqs.anchor_logits, ps);
  out.l_grad = lgrad;
  if (ctx) {
    ctx->spatial_ir = std::move(sp_ir);
    ctx->spatial_rgb = std::move(sp_rgb);
  }
  return out;
}

SampleLosses pipeline_loss(const ForwardOutputs& fwd, const std::vector<GtItem>& gts,
                           const PipelineConfig& cfg) {
  if (fwd.logits.extent(0) != 1)
    raise(ErrorCode::Argument, "pipeline_loss works on single samples, got batch " +
                                   std::to_string(fwd.logits.extent(0)));
  const std::int64_t k = fwd.logits.extent(1), c = fwd.logits.extent(2);
  DetectionLoss dl = detection_loss(fwd.logits.reshaped({k, c}), fwd.boxes.reshaped({k, 4}),
                                    gts, cfg.loss_weights);
  SampleLosses out;
  out.box = dl.box;
  out.cls = dl.cls;
  out.grad = fwd.l_grad;
  out.total = total_loss(dl.box, dl.cls, fwd.l_grad);
  out.assignment = std::move(dl.assignment);
  return out;
}

void pipeline_backward(const ForwardCtx& ctx, const ForwardOutputs& fwd,
                       const std::vector<GtItem>& gts,
                       const std::vector<std::int64_t>& assignment, const ParamStore& ps,
                       const PipelineConfig& cfg, GradStore& gs) {
  const std::int64_t k = fwd.logits.extent(1), c = fwd.logits.extent(2);
  DetectionLossGrads dg =
      detection_loss_vjp(fwd.logits.reshaped({k, c}), fwd.boxes.reshaped({k, 4}), gts,
                         assignment, cfg.loss_weights, 1.0, 1.0);
  Tensor gz = class_logits_vjp(fwd.fqs.z, ps, dg.glogits.reshaped({1, k, c}), gs);
  Tensor ganchor = sigmoid_vjp(fwd.fqs.anchor_logits, dg.gboxes.reshaped({1, k, 4}));

  FqsGrads fg = fqs_backward(ctx.fqs, ps, cfg.fqs(), gz, ganchor, gs);
  HfeGrads ghigh = hfe_backward(ctx.hfe_high, ps, "high", cfg.hfe(), fg.ghigh.l3, fg.ghigh.l4,
                                fg.ghigh.l5, gs);
  HfeGrads glow =
      hfe_backward(ctx.hfe_low, ps, "low", cfg.hfe(), fg.glow.l3, fg.glow.l4, fg.glow.l5, gs);

  std::array<Tensor, 3> glevel_ir, glevel_rgb;
  for (int i = 0; i < 3; ++i) {
    const int level = kLevels[static_cast<std::size_t>(i)];
    const LevelCtx& lc = ctx.level[static_cast<std::size_t>(i)];

    Tensor gfl = upsample2x_vjp(lc.fl, pick(glow.gfreq, i));
    LfhaGrads la = lfha_backward(lc.lfha, ps, level, gfl, gs);

    Tensor gfh = upsample2x_vjp(lc.fh, pick(ghigh.gfreq, i));
    Tensor gfh_consistency, gtarget_rgb, gtarget_ir;
    grad_consistency_loss(lc.fh, lc.high_rgb, lc.high_ir, &gfh_consistency, &gtarget_rgb,
                          &gtarget_ir);
    gfh = add(gfh, gfh_consistency);
    HfsrGrads ha = hfsr_backward(lc.hfsr, ps, level, gfh, gs);

    if (cfg.wavelet) {
      const Tensor& w = ps.get(wav_name(level, "w"));
      const Tensor& b = ps.get(wav_name(level, "b"));
      ReduceHighGrads rr = reduce_high_vjp(lc.rgb.lh, lc.rgb.hl, lc.rgb.hh, w, b,
                                           add(ha.gfh_r, gtarget_rgb));
      ReduceHighGrads ri =
          reduce_high_vjp(lc.ir.lh, lc.ir.hl, lc.ir.hh, w, b, add(ha.gfh_i, gtarget_ir));
      gs.accumulate(wav_name(level, "w"), rr.gw);
      gs.accumulate(wav_name(level, "w"), ri.gw);
      gs.accumulate(wav_name(level, "b"), rr.gb);
      gs.accumulate(wav_name(level, "b"), ri.gb);
      // dwt is orthonormal, so its adjoint is the inverse transform.
      glevel_ir[static_cast<std::size_t>(i)] = idwt_haar(la.gll_ir, ri.glh, ri.ghl, ri.ghh);
      glevel_rgb[static_cast<std::size_t>(i)] = idwt_haar(la.gll_rgb, rr.glh, rr.ghl, rr.ghh);
    } else {
      // High inputs are constant zeros; only the pooled low path flows back.
      glevel_ir[static_cast<std::size_t>(i)] =
          avg_pool2x_vjp(pick(ctx.spatial_ir, i), la.gll_ir);
      glevel_rgb[static_cast<std::size_t>(i)] =
          avg_pool2x_vjp(pick(ctx.spatial_rgb, i), la.gll_rgb);
    }
    glevel_ir[static_cast<std::size_t>(i)] =
        add(glevel_ir[static_cast<std::size_t>(i)], pick(glow.gspatial, i));
    glevel_rgb[static_cast<std::size_t>(i)] =
        add(glevel_rgb[static_cast<std::size_t>(i)], pick(ghigh.gspatial, i));
  }
  backbone_backward(ctx.bb_ir, ps, cfg.backbone, glevel_ir[0], glevel_ir[1], glevel_ir[2], gs);
  backbone_backward(ctx.bb_rgb, ps, cfg.backbone, glevel_rgb[0], glevel_rgb[1], glevel_rgb[2],
                    gs);
}

std::vector<DatasetItem> load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::Io, "cannot open dataset '" + path + "'");
  json root;
  try {
    in >> root;
  } catch (const std::exception& e) {
    raise(ErrorCode::Format, "dataset '" + path + "' is not valid JSON: " + e.what());
  }
  if (!root.is_array())
    raise(ErrorCode::Format, "dataset '" + path + "' must be a JSON array of samples");

  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp.string() : (base / fp).string();
  };

  std::vector<DatasetItem> items;
  for (std::size_t i = 0; i < root.size(); ++i) {
    const json& j = root[i];
    if (!j.is_object() || !j.contains("rgb") || !j.at("rgb").is_string() ||
        !j.contains("ir") || !j.at("ir").is_string() || !j.contains("boxes") ||
        !j.at("boxes").is_array())
      raise(ErrorCode::Format, "dataset item " + std::to_string(i) +
                                   " needs string 'rgb'/'ir' and a 'boxes' array");
    DatasetItem item;
    item.rgb = resolve(j.at("rgb").get<std::string>());
    item.ir = resolve(j.at("ir").get<std::string>());
    for (const json& b : j.at("boxes")) {
      if (!b.is_object() || !b.contains("cls") || !b.at("cls").is_number_integer())
        raise(ErrorCode::Format,
              "dataset item " + std::to_string(i) + " box needs integer 'cls'");
      GtItem gt;
      gt.class_id = b.at("cls").get<std::int64_t>();
      gt.box = {json_number(b, "cx", i), json_number(b, "cy", i), json_number(b, "w", i),
                json_number(b, "h", i)};
      item.gts.push_back(gt);
    }
    items.push_back(std::move(item));
  }
  return items;
}

std::vector<StepLosses> train_toy(ParamStore& ps, const std::vector<DatasetItem>& items,
                                  const PipelineConfig& cfg, int threads) {
  if (items.empty()) raise(ErrorCode::Argument, "train_toy needs at least one sample");
  if (threads < 1) raise(ErrorCode::Argument, "thread count must be at least 1");

  std::vector<LoadedPair> pairs;
  pairs.reserve(items.size());
  for (const DatasetItem& item : items) pairs.push_back(load_pair(item.rgb, item.ir));

  const std::int64_t n = static_cast<std::int64_t>(items.size());
  std::vector<StepLosses> trace;
  trace.reserve(static_cast<std::size_t>(cfg.steps));
  for (int step = 0; step < cfg.steps; ++step) {
    std::vector<GradStore> sample_gs(static_cast<std::size_t>(n));
    std::vector<SampleLosses> sample_loss(static_cast<std::size_t>(n));
    auto run_range = [&](std::int64_t lo, std::int64_t hi) {
      for (std::int64_t s = lo; s < hi; ++s) {
        ForwardCtx ctx;
        ForwardOutputs fwd = pipeline_forward(pairs[static_cast<std::size_t>(s)].rgb,
                                              pairs[static_cast<std::size_t>(s)].ir, ps, cfg,
                                              &ctx);
        sample_loss[static_cast<std::size_t>(s)] =
            pipeline_loss(fwd, items[static_cast<std::size_t>(s)].gts, cfg);
        pipeline_backward(ctx, fwd, items[static_cast<std::size_t>(s)].gts,
                          sample_loss[static_cast<std::size_t>(s)].assignment, ps, cfg,
                          sample_gs[static_cast<std::size_t>(s)]);
      }
    };

    const int workers = static_cast<int>(std::min<std::int64_t>(threads, n));
    if (workers <= 1) {
      run_range(0, n);
    } else {
      std::vector<std::thread> pool;
      std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
      for (int t = 0; t < workers; ++t) {
        const std::int64_t lo = n * t / workers, hi = n * (t + 1) / workers;
        pool.emplace_back([&, t, lo, hi] {
          try {
            run_range(lo, hi);
          } catch (...) {
            errors[static_cast<std::size_t>(t)] = std::current_exception();
          }
        });
      }
      for (std::thread& th : pool) th.join();
      for (const std::exception_ptr& e : errors)
        if (e) std::rethrow_exception(e);
    }

    // Sample-ordered reduction keeps every thread count bitwise identical.
    StepLosses mean;
    GradStore total;
    for (std::int64_t s = 0; s < n; ++s) {
      const SampleLosses& l = sample_loss[static_cast<std::size_t>(s)];
      mean.box += l.box;
      mean.cls += l.cls;
      mean.grad += l.grad;
      mean.total += l.total;
      total.add(sample_gs[static_cast<std::size_t>(s)]);
    }
    const double inv = 1.0 / static_cast<double>(n);
    mean.box *= inv;
    mean.cls *= inv;
    mean.grad *= inv;
    mean.total *= inv;
    if (!std::isfinite(mean.total))
      raise(ErrorCode::Divergence, "training diverged at step " + std::to_string(step));
    trace.push_back(mean);

    scale_store(total, inv);
    const double norm = total.global_norm();
    if (norm > 10.0) scale_store(total, 10.0 / norm);
    for (const auto& [name, g] : total.all())
      ps.get(name).as_vector() -= cfg.step_size * g.as_vector();
  }
  return trace;
}

void write_trace_csv(const std::string& path, const std::vector<StepLosses>& trace) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot open trace file '" + path + "'");
  out << "step,l_box,l_cls,l_grad,l_total\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    out << format_row(static_cast<int>(i), trace[i]);
  if (!out) raise(ErrorCode::Io, "short write to '" + path + "'");
}

void write_detections_json(const std::string& path, const std::vector<Detection>& dets) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].confidence > dets[b].confidence;
  });
  json arr = json::array();
  for (const std::size_t q : order) {
    const Detection& d = dets[q];
    arr.push_back({{"cls", d.class_id},
                   {"score", d.confidence},
                   {"cx", d.box.cx},
                   {"cy", d.box.cy},
                   {"w", d.box.w},
                   {"h", d.box.h}});
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot open detections file '" + path + "'");
  out << json{{"detections", arr}}.dump(2) << "\n";
  if (!out) raise(ErrorCode::Io, "short write to '" + path + "'");
}

std::vector<LevelDiag> diag_levels(const ForwardCtx& ctx) {
  std::vector<LevelDiag> out;
  for (int i = 0; i < 3; ++i) {
    const LevelCtx& lc = ctx.level[static_cast<std::size_t>(i)];
    const GaussianFit low_ir = fit_gaussian(lift_to_level(lc.low_ir));
    const GaussianFit low_rgb = fit_gaussian(lift_to_level(lc.low_rgb));
    const GaussianFit high_ir = fit_gaussian(lift_to_level(lc.high_ir));
    const GaussianFit high_rgb = fit_gaussian(lift_to_level(lc.high_rgb));
    LevelDiag d;
    d.level = kLevels[static_cast<std::size_t>(i)];
    d.mean_gap = mean_gap(low_ir, low_rgb);
    d.kl_low = kl_gaussian(low_ir, low_rgb);
    d.kl_high = kl_gaussian(high_ir, high_rgb);
    d.trace_orth_high = trace_orth(high_ir, high_rgb);
    out.push_back(d);
  }
  return out;
}

void write_diag_json(const std::string& path, const std::vector<LevelDiag>& levels) {
  json arr = json::array();
  for (const LevelDiag& d : levels)
    arr.push_back({{"level", d.level},
                   {"mean_gap", d.mean_gap},
                   {"kl_low", d.kl_low},
                   {"kl_high", d.kl_high},
                   {"trace_orth_high", d.trace_orth_high}});
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot open diag file '" + path + "'");
  out << json{{"levels", arr}}.dump(2) << "\n";
  if (!out) raise(ErrorCode::Io, "short write to '" + path + "'");
}

void write_synthetic_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const std::int64_t side = 64;

  struct SynthBox {
    std::int64_t cls;
    double cx, cy, w, h;
  };
  // All coordinates are multiples of 1/64 so the JSON round-trips exactly.
  const std::vector<std::vector<SynthBox>> scenes = {
      {{0, 0.375, 0.375, 0.25, 0.25}},
      {{1, 0.25, 0.5625, 0.375, 0.25}, {0, 0.71875, 0.28125, 0.1875, 0.3125}},
      {{2, 0.5625, 0.625, 0.3125, 0.1875}},
      {{0, 0.3125, 0.3125, 0.1875, 0.1875}, {2, 0.6875, 0.6875, 0.25, 0.25}},
  };

  json dataset = json::array();
  for (std::size_t k = 0; k < scenes.size(); ++k) {
    CounterRng rng(99, "synth.pair" + std::to_string(k));
    Tensor rgb({3, side, side});
    Tensor ir({side, side});
    for (std::int64_t y = 0; y < side; ++y)
      for (std::int64_t x = 0; x < side; ++x) {
        const std::int64_t px = y * side + x;
        const double fy = static_cast<double>(y) / 63.0;
        const double fx = static_cast<double>(x) / 63.0;
        rgb.at(0, y, x) = 0.20 + 0.20 * fy + 0.05 * rng.uniform(px * 4 + 0);
        rgb.at(1, y, x) = 0.25 + 0.15 * fx + 0.05 * rng.uniform(px * 4 + 1);
        rgb.at(2, y, x) = 0.30 + 0.10 * (1.0 - fy) + 0.05 * rng.uniform(px * 4 + 2);
        ir.at(y, x) = 0.15 + 0.10 * fx + 0.05 * rng.uniform(px * 4 + 3);
      }
    for (const SynthBox& b : scenes[k]) {
      const std::int64_t x0 = std::lround((b.cx - 0.5 * b.w) * static_cast<double>(side));
      const std::int64_t x1 = std::lround((b.cx + 0.5 * b.w) * static_cast<double>(side));
      const std::int64_t y0 = std::lround((b.cy - 0.5 * b.h) * static_cast<double>(side));
      const std::int64_t y1 = std::lround((b.cy + 0.5 * b.h) * static_cast<double>(side));
      for (std::int64_t y = y0; y < y1; ++y)
        for (std::int64_t x = x0; x < x1; ++x) {
          const double texture = 0.10 * static_cast<double>((x + y) % 2);
          for (std::int64_t ch = 0; ch < 3; ++ch)
            rgb.at(ch, y, x) = (ch == b.cls ? 0.80 : 0.15) + texture;
          ir.at(y, x) = 0.85 + texture;  // objects read hot in the IR view
        }
    }
    const std::string rgb_name = "pair" + std::to_string(k) + "_rgb.ppm";
    const std::string ir_name = "pair" + std::to_string(k) + "_ir.pgm";
    write_ppm((fs::path(dir) / rgb_name).string(), rgb);
    write_pgm((fs::path(dir) / ir_name).string(), ir);

    json boxes = json::array();
    for (const SynthBox& b : scenes[k])
      boxes.push_back(
          {{"cls", b.cls}, {"cx", b.cx}, {"cy", b.cy}, {"w", b.w}, {"h", b.h}});
    dataset.push_back({{"rgb", rgb_name}, {"ir", ir_name}, {"boxes", boxes}});
  }
  std::ofstream out(fs::path(dir) / "dataset.json", std::ios::binary | std::ios::trunc);
  if (!out) raise(ErrorCode::Io, "cannot open dataset.json under '" + dir + "'");
  out << dataset.dump(2) << "\n";
  if (!out) raise(ErrorCode::Io, "short write to dataset.json under '" + dir + "'");
}

}  // namespace wdfq
