#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "wdfq/config.hpp"
#include "wdfq/errors.hpp"
#include "wdfq/gradcheck.hpp"
#include "wdfq/image_io.hpp"
#include "wdfq/pipeline.hpp"
#include "wdfq/tensor_io.hpp"
#include "wdfq/wavelet.hpp"

namespace {

namespace fs = std::filesystem;

int run_decompose(const std::string& input, const std::string& out_dir) {
  wdfq::Tensor x = wdfq::read_tensor(input);
  if (x.rank() != 4)
    wdfq::raise(wdfq::ErrorCode::Shape,
                "decompose expects a rank-4 tensor, got " + wdfq::shape_str(x.shape()));
  wdfq::WaveletBands bands = wdfq::dwt_haar(x);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  wdfq::write_tensor((dir / "ll.tensor").string(), bands.ll);
  wdfq::write_tensor((dir / "lh.tensor").string(), bands.lh);
  wdfq::write_tensor((dir / "hl.tensor").string(), bands.hl);
  wdfq::write_tensor((dir / "hh.tensor").string(), bands.hh);
  std::printf("wrote ll/lh/hl/hh %s to %s\n", wdfq::shape_str(bands.ll.shape()).c_str(),
              out_dir.c_str());
  return 0;
}

// Forward pass on one registered-parameter model; shared by infer and diag.
struct ForwardRun {
  wdfq::ParamStore ps;
  wdfq::ForwardCtx ctx;
  wdfq::ForwardOutputs out;
};

ForwardRun run_forward(const wdfq::PipelineConfig& cfg, const std::string& rgb_path,
                       const std::string& ir_path) {
  ForwardRun run{wdfq::ParamStore(cfg.seed), {}, {}};
  wdfq::pipeline_register(run.ps, cfg);
  wdfq::LoadedPair pair = wdfq::load_pair(rgb_path, ir_path);
  run.out = wdfq::pipeline_forward(pair.rgb, pair.ir, run.ps, cfg, &run.ctx);
  return run;
}

int run_infer(const std::string& config, const std::string& rgb, const std::string& ir,
              const std::string& json_out, const std::string& heatmap_dir) {
  const wdfq::PipelineConfig cfg = wdfq::load_config(config);
  ForwardRun run = run_forward(cfg, rgb, ir);
  if (!json_out.empty()) wdfq::write_detections_json(json_out, run.out.detections.at(0));
  if (!heatmap_dir.empty()) {
    fs::create_directories(heatmap_dir);
    const fs::path dir(heatmap_dir);
    wdfq::export_heatmap(run.out.low.l3, (dir / "low_l3.pgm").string());
    wdfq::export_heatmap(run.out.low.l4, (dir / "low_l4.pgm").string());
    wdfq::export_heatmap(run.out.low.l5, (dir / "low_l5.pgm").string());
    wdfq::export_heatmap(run.out.high.l3, (dir / "high_l3.pgm").string());
    wdfq::export_heatmap(run.out.high.l4, (dir / "high_l4.pgm").string());
    wdfq::export_heatmap(run.out.high.l5, (dir / "high_l5.pgm").string());
  }
  std::printf("%zu detections, L_grad %.6f\n", run.out.detections.at(0).size(),
              run.out.l_grad);
  return 0;
}

int run_train_toy(const std::string& config, const std::string& dataset,
                  const std::string& trace_out, int threads) {
  const wdfq::PipelineConfig cfg = wdfq::load_config(config);
  std::vector<wdfq::DatasetItem> items = wdfq::load_dataset(dataset);
  wdfq::ParamStore ps(cfg.seed);
  wdfq::pipeline_register(ps, cfg);
  std::vector<wdfq::StepLosses> trace = wdfq::train_toy(ps, items, cfg, threads);
  if (!trace_out.empty()) wdfq::write_trace_csv(trace_out, trace);
  if (!trace.empty())
    std::printf("step 0 total %.6f -> step %zu total %.6f\n", trace.front().total,
                trace.size() - 1, trace.back().total);
  else
    std::printf("no steps requested\n");
  return 0;
}

int run_gradcheck(const std::string& config, const std::string& module, int instances) {
  const wdfq::PipelineConfig cfg = wdfq::load_config(config);
  const auto& registry = wdfq::gradcheck_registry();
  if (!module.empty() && registry.find(module) == registry.end())
    wdfq::raise(wdfq::ErrorCode::Argument, "unknown gradcheck module '" + module + "'");
  int failures = 0;
  for (const auto& [name, factory] : registry) {
    if (!module.empty() && name != module) continue;
    const auto start = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::int64_t elements = 0;
    for (int i = 0; i < instances; ++i) {
      wdfq::FdReport rep = wdfq::fd_check(factory(cfg.seed, i));
      worst = std::max(worst, rep.max_rel_err);
      elements += rep.elements;
    }
    const double ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - start)
                          .count();
    const bool ok = worst < 1e-5;
    failures += ok ? 0 : 1;
    std::printf("%-22s %s  max rel err %.3e  (%lld probes, %.0f ms)\n", name.c_str(),
                ok ? "PASS" : "FAIL", worst, static_cast<long long>(elements), ms);
  }
  return failures == 0 ? 0 : 1;
}

int run_diag(const std::string& config, const std::string& rgb, const std::string& ir,
             const std::string& json_out) {
  const wdfq::PipelineConfig cfg = wdfq::load_config(config);
  ForwardRun run = run_forward(cfg, rgb, ir);
  std::vector<wdfq::LevelDiag> levels = wdfq::diag_levels(run.ctx);
  if (!json_out.empty()) wdfq::write_diag_json(json_out, levels);
  for (const wdfq::LevelDiag& d : levels)
    std::printf("level %d  mean_gap %.6f  kl_low %.6f  kl_high %.6f  trace_orth %.6f\n",
                d.level, d.mean_gap, d.kl_low, d.kl_high, d.trace_orth_high);
  return 0;
}

int run_synth(const std::string& out_dir) {
  wdfq::write_synthetic_dataset(out_dir);
  std::printf("wrote 4 image pairs and dataset.json to %s\n", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frequency-decoupled multispectral detector toolkit"};
  app.require_subcommand(1);

  std::string in_tensor, out_dir = ".";
  CLI::App* decompose = app.add_subcommand("decompose", "Split a tensor file into wavelet bands");
  decompose->add_option("input", in_tensor, "rank-4 tensor file")->required();
  decompose->add_option("--out-dir", out_dir, "output directory");

  std::string config, rgb, ir, json_out, heatmap_dir;
  int threads = 1;
  CLI::App* infer = app.add_subcommand("infer", "Detect on one RGB/IR pair");
  infer->add_option("config", config, "key=value config file")->required();
  infer->add_option("rgb", rgb, "RGB image (PPM or PGM)")->required();
  infer->add_option("ir", ir, "IR image (PPM or PGM)")->required();
  infer->add_option("--json", json_out, "detection JSON output path");
  infer->add_option("--heatmaps", heatmap_dir, "directory for frequency heatmaps");
  infer->add_option("--threads", threads, "worker threads (single-image runs ignore this)");

  std::string dataset, trace_out;
  CLI::App* train = app.add_subcommand("train-toy", "Gradient descent on a tiny dataset");
  train->add_option("config", config, "key=value config file")->required();
  train->add_option("dataset", dataset, "dataset JSON path")->required();
  train->add_option("--trace", trace_out, "per-step loss CSV output path");
  train->add_option("--threads", threads, "worker threads for per-sample gradients");

  std::string module;
  int instances = 5;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient audit");
  gradcheck->add_option("config", config, "key=value config file (seed source)")->required();
  gradcheck->add_option("--module", module, "single registry entry (default: all)");
  gradcheck->add_option("--instances", instances, "random instances per entry");

  CLI::App* diag = app.add_subcommand("diag", "Per-level frequency statistics on one pair");
  diag->add_option("config", config, "key=value config file")->required();
  diag->add_option("rgb", rgb, "RGB image (PPM or PGM)")->required();
  diag->add_option("ir", ir, "IR image (PPM or PGM)")->required();
  diag->add_option("--json", json_out, "statistics JSON output path");

  std::string synth_dir;
  CLI::App* synth = app.add_subcommand("synth", "Write the bundled toy dataset");
  synth->add_option("out-dir", synth_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
    if (decompose->parsed()) return run_decompose(in_tensor, out_dir);
    if (infer->parsed()) return run_infer(config, rgb, ir, json_out, heatmap_dir);
    if (train->parsed()) return run_train_toy(config, dataset, trace_out, threads);
    if (gradcheck->parsed()) return run_gradcheck(config, module, instances);
    if (diag->parsed()) return run_diag(config, rgb, ir, json_out);
    if (synth->parsed()) return run_synth(synth_dir);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const wdfq::Error& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return wdfq::error_exit_status(e.code());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "WDFQ_E_INTERNAL: %s\n", e.what());
    return 1;
  }
  return 0;
}
