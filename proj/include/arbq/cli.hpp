// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Command-line front end. Exit codes: 0 success, 1 usage, 2 data or I/O
// error, 3 numerical failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "arbq/calib.hpp"
#include "arbq/errors.hpp"
#include "arbq/io.hpp"
#include "arbq/partition.hpp"
#include "arbq/pipeline.hpp"

namespace arbq {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

namespace fs = std::filesystem;

/// Layers named by a manifest or found as *.arbt files in a directory.
/// Shape-only manifest entries get synthetic weights; an entry repeated N
/// times expands to name.0 ... name.N-1.
inline std::vector<LayerInput> load_layers(const fs::path& weights, std::uint64_t seed) {
  std::vector<LayerInput> out;
  if (fs::is_directory(weights)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(weights))
      if (e.is_regular_file() && e.path().extension() == ".arbt") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) out.push_back({f.stem().string(), read_tensor(f).matrix()});
    if (out.empty()) throw IoError(IoErrc::kOpenFailed, "no .arbt files in '" + weights.string() + "'");
    return out;
  }
  const Manifest man = read_manifest(weights);
  std::uint64_t stream = 0;
  for (const auto& e : man.layers) {
    for (std::size_t i = 0; i < e.count; ++i, ++stream) {
      const std::string name = e.count > 1 ? e.name + "." + std::to_string(i) : e.name;
      if (!e.file.empty())
        out.push_back({name, read_tensor(e.file).matrix()});
      else
        out.push_back({name, synthetic_weights(e.rows, e.cols, seed, stream)});
    }
  }
  if (out.empty()) throw IoError(IoErrc::kMalformed, "manifest lists no layers");
  return out;
}

/// "synthetic", or a directory holding <layer>.arbt (or default.arbt)
/// activation batches.
inline CalibSource make_calib_source(const std::string& source, const QuantConfig& cfg) {
  if (source == "synthetic") {
    return [cfg](const std::string&, std::size_t, std::size_t dim) { return synthetic_calibration(dim, cfg); };
  }
  const fs::path dir(source);
  if (!fs::is_directory(dir)) throw IoError(IoErrc::kOpenFailed, "calibration directory '" + source + "' not found");
  return [dir](const std::string& name, std::size_t, std::size_t dim) {
    fs::path file = dir / (sanitize_name(name) + ".arbt");
    if (!fs::exists(file)) file = dir / "default.arbt";
    auto batches = read_tensor(file).batches();
    for (const auto& X : batches)
      if (static_cast<std::size_t>(X.cols()) != dim)
        throw ShapeError("calibration in '" + file.string() + "' has width " + std::to_string(X.cols()) +
                         ", layer '" + name + "' needs " + std::to_string(dim));
    return batches;
  };
}

namespace detail {

inline void require_unique_files(const std::vector<LayerInput>& layers) {
  std::set<std::string> seen;
  for (const auto& l : layers)
    if (!seen.insert(sanitize_name(l.name)).second)
      throw ValidationError("two layers map to the file name '" + sanitize_name(l.name) + "'");
}

inline void save_text(const fs::path& path, const std::string& s) {
  write_file(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
}

struct QuantizeArgs {
  std::string weights;
  std::string calib = "synthetic";
  std::string config;
  std::string out;
  std::string method;
  int iterations = -1;
  bool no_cgb = false;
  std::optional<std::uint64_t> seed;
};

inline int run_quantize(const QuantizeArgs& a) {
  QuantConfig cfg = a.config.empty() ? QuantConfig{} : read_config(a.config);
  if (!a.method.empty()) cfg.method = parse_method(a.method);
  if (a.iterations >= 0) cfg.iterations = a.iterations;
  if (a.no_cgb) cfg.cgb = false;
  if (a.seed) cfg.seed = *a.seed;
  cfg.validate();

  const auto layers = load_layers(a.weights, cfg.seed);
  require_unique_files(layers);
  const ModelResult res = quantize_model(layers, make_calib_source(a.calib, cfg), cfg);

  const fs::path out(a.out);
  fs::create_directories(out);
  save_text(out / "config.txt", render_config(cfg));
  CsvWriter report(report_columns());
  CsvWriter profiles({"layer", "column", "profile_weights", "profile_quantized"});
  CsvWriter timing({"layer", "wall_seconds"});
  for (const auto& lr : res.layers) {
    write_quant(out / (sanitize_name(lr.layer.name) + ".arbq"), lr.layer);
    report.row(report_row(lr.report));
    const auto& m = lr.report.metrics;
    for (Eigen::Index c = 0; c < m.profile_w.size(); ++c)
      profiles.row({lr.layer.name, std::to_string(c), fmt_double(m.profile_w(c)), fmt_double(m.profile_q(c))});
    timing.row({lr.layer.name, fmt_double(lr.report.wall_seconds)});
  }
  report.save(out / "report.csv");
  profiles.save(out / "profiles.csv");
  timing.save(out / "timing.csv");

  std::printf("quantized %zu layers (%s) into %s\n", res.layers.size(), to_string(cfg.method).c_str(),
              out.string().c_str());
  std::printf("total %llu bytes, %.4f bits per weight\n", static_cast<unsigned long long>(res.total.total_bytes),
              res.total.avg_weight_bits);
  return kExitOk;
}

struct EvalArgs {
  std::string artifacts;
  std::string weights;
  std::string calib = "synthetic";
  std::string out;
};

inline int run_eval(const EvalArgs& a) {
  const fs::path dir(a.artifacts);
  const QuantConfig cfg = read_config(dir / "config.txt");
  const auto layers = load_layers(a.weights, cfg.seed);
  const CalibSource calib = make_calib_source(a.calib, cfg);

  CsvWriter eval(eval_columns());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& L = layers[i];
    const QuantizedLayer q = read_quant(dir / (sanitize_name(L.name) + ".arbq"));
    require_shape(q.rows == static_cast<std::size_t>(L.weights.rows()) &&
                      q.cols == static_cast<std::size_t>(L.weights.cols()),
                  "stored layer '" + L.name + "' differs in shape from its weights");
    const auto batches = calib(L.name, i, q.cols);
    auto [fit, holdout] = split_calibration(batches);
    const CalibStats stats = accumulate_second_moment(fit);
    eval.row(eval_row(L.name, layer_metrics(L.weights, q.reconstruct(), stats, holdout)));
  }
  const fs::path out = a.out.empty() ? dir / "eval.csv" : fs::path(a.out);
  eval.save(out);
  std::printf("evaluated %zu layers into %s\n", layers.size(), out.string().c_str());
  return kExitOk;
}

struct BenchArgs {
  BenchConfig config;
  std::string out = "bench.csv";
  bool count_only = false;
};

inline int run_bench(const BenchArgs& a) {
  BenchResult r;
  if (a.count_only) {
    r.config = a.config;
    std::tie(r.direct, r.reformulated) = count_l2_paths(a.config);
    r.eta_counted = static_cast<double>(r.direct.multiply_accumulate_count) /
                    static_cast<double>(r.reformulated.multiply_accumulate_count);
    r.eta_formula = speedup_formula(a.config);
  } else {
    r = bench_l2_paths(a.config);
  }
  const auto& c = r.config;
  std::printf("n=%zu m=%zu samples=%zu iterations=%zu block=%zu\n", c.rows, c.cols, c.samples, c.iterations, c.block);
  std::printf("direct:       %llu MACs, %.4f s\n", static_cast<unsigned long long>(r.direct.multiply_accumulate_count),
              r.direct.wall_time);
  std::printf("reformulated: %llu MACs, %.4f s\n",
              static_cast<unsigned long long>(r.reformulated.multiply_accumulate_count), r.reformulated.wall_time);
  std::printf("speedup: counted %.3f, formula %.3f, wall %.3f\n", r.eta_counted, r.eta_formula, r.eta_wall);
  if (!a.out.empty()) {
    CsvWriter csv({"rows", "cols", "samples", "iterations", "block", "direct_macs", "reformulated_macs",
                   "direct_seconds", "reformulated_seconds", "eta_counted", "eta_formula", "eta_wall",
                   "max_rel_diff"});
    csv.row({std::to_string(c.rows), std::to_string(c.cols), std::to_string(c.samples), std::to_string(c.iterations),
             std::to_string(c.block), std::to_string(r.direct.multiply_accumulate_count),
             std::to_string(r.reformulated.multiply_accumulate_count), fmt_double(r.direct.wall_time),
             fmt_double(r.reformulated.wall_time), fmt_double(r.eta_counted), fmt_double(r.eta_formula),
             fmt_double(r.eta_wall), fmt_double(r.max_rel_diff)});
    csv.save(a.out);
  }
  return kExitOk;
}

struct InspectArgs {
  std::string path;
  int scale_bits = 32;
  double salient_fraction = 0.09;
  std::size_t block = 128;
};

inline void print_budget(const char* label, const BitBudget& b) {
  std::printf("%-22s %14llu bytes  %8.4f GB  planes %llu  bitmaps %llu  scales %llu bits  %.4f bits/weight\n", label,
              static_cast<unsigned long long>(b.total_bytes), static_cast<double>(b.total_bytes) / 1e9,
              static_cast<unsigned long long>(b.plane_bits), static_cast<unsigned long long>(b.bitmap_bits),
              static_cast<unsigned long long>(b.scale_bits), b.avg_weight_bits);
}

inline int run_inspect(const InspectArgs& a) {
  const auto bytes = read_file(a.path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "ARBT", 4) == 0) {
    const Tensor t = decode_tensor(bytes);
    std::printf("magic ARBT version %u dtype f32 rank %zu dims ", static_cast<unsigned>(kTensorVersion),
                t.dims.size());
    for (std::size_t i = 0; i < t.dims.size(); ++i)
      std::printf("%s%llu", i ? "x" : "", static_cast<unsigned long long>(t.dims[i]));
    std::printf("\n");
    return kExitOk;
  }
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), "ARBQ", 4) == 0) {
    const QuantizedLayer q = decode_quant(bytes);
    std::printf("magic ARBQ version %u\n", static_cast<unsigned>(kQuantVersion));
    std::printf("layer %s: %zu x %zu, method %s, salient order %d, cgb %s, iterations %d, block %zu\n",
                q.name.c_str(), q.rows, q.cols, to_string(q.method).c_str(), q.salient_order,
                q.cgb ? "on" : "off", q.iterations, q.block);
    std::printf("salient columns %zu, ", q.maps.salient_count());
    print_budget("storage", q.budget);
    return kExitOk;
  }
  const Manifest man = parse_manifest(std::string(bytes.begin(), bytes.end()), fs::path(a.path).parent_path());
  const ModelShapes shapes = man.shapes();
  MemoryOptions opt;
  opt.block = a.block;
  opt.salient_fraction = a.salient_fraction;
  opt.scale_bits = a.scale_bits;
  std::printf("memory estimate: block %zu, salient fraction %g, %d-bit scales\n", a.block, a.salient_fraction,
              a.scale_bits);
  struct Row {
    const char* label;
    ScaleStyle style;
    bool cgb;
  };
  for (const Row& r : {Row{"row-mean", ScaleStyle::kRowMean, false}, Row{"row-mean + cgb", ScaleStyle::kRowMean, true},
                       Row{"row-column", ScaleStyle::kRowColumn, false},
                       Row{"row-column + cgb", ScaleStyle::kRowColumn, true}}) {
    opt.style = r.style;
    opt.cgb = r.cgb;
    print_budget(r.label, memory_estimate(shapes, opt));
  }
  return kExitOk;
}

}  // namespace detail

inline int cli_main(int argc, char** argv) {
  CLI::App app{"Binary post-training quantization of linear layers"};
  app.require_subcommand(1);

  detail::QuantizeArgs qa;
  auto* quant = app.add_subcommand("quantize", "Quantize layers and write artifacts");
  quant->add_option("--weights", qa.weights, "Weight directory (*.arbt) or manifest")->required();
  quant->add_option("--calib", qa.calib, "Calibration directory or 'synthetic'");
  quant->add_option("--config", qa.config, "key=value configuration file");
  quant->add_option("--out", qa.out, "Output directory")->required();
  quant->add_option("--method", qa.method, "baseline, arb, arb-x or arb-rc");
  quant->add_option("--iterations", qa.iterations, "Refinement iterations")->check(CLI::NonNegativeNumber);
  quant->add_flag("--no-cgb", qa.no_cgb, "Disable the combined group bitmap");
  quant->add_option("--seed", qa.seed, "Seed for synthetic weights and calibration");

  detail::EvalArgs ea;
  auto* eval = app.add_subcommand("eval", "Recompute metrics from stored artifacts");
  eval->add_option("--artifacts", ea.artifacts, "Directory written by quantize")->required();
  eval->add_option("--weights", ea.weights, "Weights the artifacts were made from")->required();
  eval->add_option("--calib", ea.calib, "Calibration directory or 'synthetic'");
  eval->add_option("--out", ea.out, "Output CSV (default <artifacts>/eval.csv)");

  detail::BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Compare the direct and reformulated output-error paths");
  bench->add_option("--rows", ba.config.rows)->check(CLI::PositiveNumber);
  bench->add_option("--cols", ba.config.cols)->check(CLI::PositiveNumber);
  bench->add_option("--samples", ba.config.samples)->check(CLI::PositiveNumber);
  bench->add_option("--iterations", ba.config.iterations)->check(CLI::PositiveNumber);
  bench->add_option("--block", ba.config.block)->check(CLI::PositiveNumber);
  bench->add_option("--seed", ba.config.seed);
  bench->add_option("--out", ba.out, "Output CSV (empty to skip)");
  bench->add_flag("--count-only", ba.count_only, "Report operation counts without running");

  detail::InspectArgs ia;
  auto* inspect = app.add_subcommand("inspect", "Describe a tensor, quantized layer or manifest");
  inspect->add_option("path", ia.path)->required();
  inspect->add_option("--scale-bits", ia.scale_bits, "Scale width for manifest estimates")->check(CLI::IsMember({16, 32}));
  inspect->add_option("--salient-fraction", ia.salient_fraction)->check(CLI::Range(0.0, 1.0));
  inspect->add_option("--block", ia.block)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*quant) return detail::run_quantize(qa);
    if (*eval) return detail::run_eval(ea);
    if (*bench) return detail::run_bench(ba);
    if (*inspect) return detail::run_inspect(ia);
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumerical;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    std::cerr << "i/o error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace arbq
