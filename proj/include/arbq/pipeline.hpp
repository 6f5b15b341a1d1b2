// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// End-to-end layer quantization: calibration statistics, saliency,
// per-block group splits, zone-wise binarization under error compensation,
// and the diagnostics reported for each layer.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "arbq/binarize.hpp"
#include "arbq/calib.hpp"
#include "arbq/compensate.hpp"
#include "arbq/errors.hpp"
#include "arbq/parallel.hpp"
#include "arbq/partition.hpp"
#include "arbq/rowcol.hpp"
#include "arbq/tensor.hpp"

namespace arbq {

enum class Method : std::uint8_t {
  kBaseline = 0,  // closed-form binarization, undivided salient columns
  kArb = 1,
  kArbX = 2,
  kArbRc = 3,
};

inline std::string to_string(Method m) {
  switch (m) {
    case Method::kBaseline: return "baseline-T0";
    case Method::kArb: return "arb";
    case Method::kArbX: return "arb-x";
    case Method::kArbRc: return "arb-rc";
  }
  return "unknown";
}

inline Method parse_method(const std::string& s) {
  if (s == "baseline-T0" || s == "baseline") return Method::kBaseline;
  if (s == "arb") return Method::kArb;
  if (s == "arb-x") return Method::kArbX;
  if (s == "arb-rc") return Method::kArbRc;
  throw ConfigError("unknown method '" + s + "'");
}

inline bool method_has_mean(Method m) { return m != Method::kArbRc; }
inline bool method_has_col_scales(Method m) { return m == Method::kArbRc; }

struct QuantConfig {
  Method method = Method::kArbRc;
  int salient_order = 2;
  int iterations = kDefaultIterations;
  std::size_t block_size = 128;
  std::vector<double> salient_fractions = default_salient_fractions();
  std::vector<double> percentile_grid = default_percentile_grid();
  double damping = 0.01;
  bool cgb = true;
  std::uint64_t seed = 0;
  // Synthetic calibration.
  std::size_t calib_batches = 8;
  std::size_t calib_seq_len = 128;
  double calib_outlier_fraction = 1.0 / 32;
  double calib_outlier_scale = 8.0;
  // Width of stored scales in the bit ledger.
  int scale_bits = 32;

  void validate() const {
    if (iterations < 0) throw ConfigError("iterations must be >= 0");
    if (block_size < 1) throw ConfigError("block_size must be >= 1");
    if (salient_order != 1 && salient_order != 2) throw ConfigError("salient_order must be 1 or 2");
    if (!(damping >= 0.0) || !std::isfinite(damping)) throw ConfigError("damping must be finite and >= 0");
    if (scale_bits != 16 && scale_bits != 32) throw ConfigError("scale_bits must be 16 or 32");
    if (calib_batches < 1 || calib_seq_len < 1) throw ConfigError("calibration sizes must be >= 1");
    if (!(calib_outlier_fraction >= 0.0 && calib_outlier_fraction <= 1.0))
      throw ConfigError("calib_outlier_fraction must lie in [0, 1]");
    if (!(calib_outlier_scale > 0.0) || !std::isfinite(calib_outlier_scale))
      throw ConfigError("calib_outlier_scale must be positive");
    try {
      validate_fractions(salient_fractions);
      validate_grid(percentile_grid);
    } catch (const ValidationError& e) {
      throw ConfigError(e.what());
    }
  }

  int effective_iterations() const { return method == Method::kBaseline ? 0 : iterations; }
  bool effective_cgb() const { return method == Method::kBaseline ? false : cgb; }

  bool operator==(const QuantConfig&) const = default;
};

/// Stored parameters of one zone inside one column block, at storage precision.
struct ZoneParams {
  int zone = 0;
  int planes = 1;
  std::vector<std::vector<float>> alpha;    // [plane][row]
  std::vector<float> mu;                    // [row]; empty without a mean term
  std::vector<std::vector<float>> alpha_c;  // [plane][block column]; row-column style only

  bool operator==(const ZoneParams&) const = default;
};

struct BlockParams {
  std::size_t begin = 0;
  std::size_t width = 0;
  std::vector<ZoneParams> zones;  // present zones in ascending zone order

  const ZoneParams* find(int z) const {
    for (const auto& p : zones)
      if (p.zone == z) return &p;
    return nullptr;
  }

  bool operator==(const BlockParams&) const = default;
};

inline int zone_at(const PartitionMaps& maps, std::size_t r, std::size_t c) {
  return (maps.salient_cols.get(0, c) ? 2 : 0) + (maps.group.get(r, c) ? 1 : 0);
}

/// Writes the stored-precision reconstruction of one block into out
/// (n x width), using full-width sign planes and maps.
inline void reconstruct_block(const BlockParams& bp, const PartitionMaps& maps, const SignPlane& plane1,
                              const SignPlane& plane2, Eigen::Ref<Matrix> out) {
  std::array<const ZoneParams*, kZoneCount> lookup{};
  for (int z = 0; z < kZoneCount; ++z) lookup[static_cast<std::size_t>(z)] = bp.find(z);
  for (std::size_t r = 0; r < maps.rows(); ++r) {
    for (std::size_t j = 0; j < bp.width; ++j) {
      const std::size_t c = bp.begin + j;
      const ZoneParams* zp = lookup[static_cast<std::size_t>(zone_at(maps, r, c))];
      if (zp == nullptr) throw ValidationError("weight falls in a zone without stored parameters");
      double v = zp->mu.empty() ? 0.0 : static_cast<double>(zp->mu[r]);
      for (int p = 0; p < zp->planes; ++p) {
        const auto pi = static_cast<std::size_t>(p);
        double s = static_cast<double>(zp->alpha[pi][r]);
        if (!zp->alpha_c.empty()) s *= static_cast<double>(zp->alpha_c[pi][j]);
        v += s * (p == 0 ? plane1.sign(r, c) : plane2.sign(r, c));
      }
      out(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = v;
    }
  }
}

struct QuantizedLayer {
  std::string name;
  Method method = Method::kArbRc;
  int salient_order = 2;
  int iterations = kDefaultIterations;
  std::size_t block = 128;
  bool cgb = true;
  std::size_t rows = 0;
  std::size_t cols = 0;
  PartitionMaps maps;
  SignPlane plane1;
  SignPlane plane2;  // meaningful on salient columns only; +1 elsewhere
  std::vector<BlockParams> blocks;
  BitBudget budget;

  Matrix reconstruct() const {
    Matrix out = Matrix::Zero(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (const auto& bp : blocks)
      reconstruct_block(bp, maps, plane1, plane2,
                        out.middleCols(static_cast<Eigen::Index>(bp.begin), static_cast<Eigen::Index>(bp.width)));
    return out;
  }
};

/// Storage ledger of a quantized layer.
inline BitBudget layer_storage(const QuantizedLayer& q, int scale_bits) {
  BitBudget b;
  const std::uint64_t nm = static_cast<std::uint64_t>(q.rows) * q.cols;
  b.plane_bits = nm + static_cast<std::uint64_t>(q.rows) * q.maps.salient_count();
  b.bitmap_bits = nm + q.cols;
  std::uint64_t values = 0;
  for (const auto& bp : q.blocks) {
    for (const auto& zp : bp.zones) {
      values += static_cast<std::uint64_t>(zp.planes) * q.rows;
      values += zp.mu.size();
      for (const auto& ac : zp.alpha_c) values += ac.size();
    }
  }
  b.scale_bits = values * static_cast<std::uint64_t>(scale_bits);
  b.avg_weight_bits = nm == 0 ? 0.0 : static_cast<double>(b.plane_bits) / static_cast<double>(nm);
  b.total_bytes = (b.plane_bits + b.bitmap_bits + b.scale_bits + 7) / 8;
  return b;
}

// ---------------------------------------------------------------------------
// Diagnostics.

/// Row-wise masked mean of W - reconstruct(Q).
template <typename Quant>
Vector residual_shift_profile(const Matrix& W, const Quant& Q) {
  return masked_row_mean(residual(W, Q), Q.mask);
}

inline Vector residual_shift_profile(const Matrix& W, const Matrix& W_hat) {
  require_shape(W.rows() == W_hat.rows() && W.cols() == W_hat.cols(), "matrix shapes differ");
  return (W - W_hat).rowwise().mean();
}

/// Mean |M_ij| per column.
inline Vector column_deviation_profile(const Matrix& M) {
  if (M.rows() < 1 || M.cols() < 1) throw ShapeError("profile of an empty matrix");
  return M.cwiseAbs().colwise().mean().transpose();
}

inline double pearson(const Vector& a, const Vector& b) {
  require_shape(a.size() == b.size() && a.size() > 1, "correlation needs equal lengths > 1");
  const Vector da = a.array() - a.mean();
  const Vector db = b.array() - b.mean();
  const double den = std::sqrt(da.squaredNorm() * db.squaredNorm());
  return den > 0.0 ? da.dot(db) / den : 0.0;
}

/// Mean squared entry of X (W - W_hat)^T over the holdout rows.
inline double output_mse(const Matrix& W, const Matrix& W_hat, const std::vector<Matrix>& holdout) {
  require_shape(W.rows() == W_hat.rows() && W.cols() == W_hat.cols(), "matrix shapes differ");
  if (holdout.empty()) throw ValidationError("no holdout batches");
  const Matrix R = W - W_hat;
  double sum = 0.0;
  std::size_t samples = 0;
  for (const Matrix& X : holdout) {
    require_shape(X.cols() == W.cols(), "holdout width differs from weight cols");
    sum += (X * R.transpose()).squaredNorm();
    samples += static_cast<std::size_t>(X.rows());
  }
  return sum / (static_cast<double>(samples) * static_cast<double>(W.rows()));
}

template <typename Quant>
double output_mse(const Matrix& W, const Quant& Q, const std::vector<Matrix>& holdout) {
  return output_mse(W, Q.reconstruct(), holdout);
}

/// (calibration, holdout): the last max(1, B/4) batches are held out when
/// B >= 2; a single batch serves as both.
inline std::pair<std::vector<Matrix>, std::vector<Matrix>> split_calibration(const std::vector<Matrix>& batches) {
  if (batches.empty()) throw ValidationError("no calibration batches");
  if (batches.size() == 1) return {batches, batches};
  const std::size_t hold = std::max<std::size_t>(1, batches.size() / 4);
  const auto cut = batches.begin() + static_cast<std::ptrdiff_t>(batches.size() - hold);
  return {std::vector<Matrix>(batches.begin(), cut), std::vector<Matrix>(cut, batches.end())};
}

struct LayerMetrics {
  double l1 = 0.0;
  double l2 = 0.0;
  double output_mse = 0.0;
  double shift_before = 0.0;
  double shift_after = 0.0;
  Vector profile_w;
  Vector profile_q;
  double profile_corr = 0.0;
};

/// Metrics of a reconstruction against the original weights. shift_before
/// is the residual row-mean shift of plain closed-form binarization.
inline LayerMetrics layer_metrics(const Matrix& W, const Matrix& W_hat, const CalibStats& stats,
                                  const std::vector<Matrix>& holdout) {
  LayerMetrics m;
  const Matrix R = W - W_hat;
  m.l1 = R.squaredNorm();
  m.l2 = l2_error(R, stats);
  m.output_mse = output_mse(W, W_hat, holdout);
  const auto full = BitMask::full(static_cast<std::size_t>(W.rows()), static_cast<std::size_t>(W.cols()));
  m.shift_before = residual_shift_profile(W, binary_first_order(W, full)).cwiseAbs().mean();
  m.shift_after = residual_shift_profile(W, W_hat).cwiseAbs().mean();
  m.profile_w = column_deviation_profile(W);
  m.profile_q = column_deviation_profile(W_hat);
  m.profile_corr = W.cols() > 1 ? pearson(m.profile_w, m.profile_q) : 1.0;
  return m;
}

struct QuantReport {
  std::string layer;
  Method method = Method::kArbRc;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t block = 0;
  bool cgb = false;
  int iterations = 0;
  int salient_order = 2;
  std::size_t salient_cols = 0;
  double salient_fraction = 0.0;
  LayerMetrics metrics;
  std::string trace_metric;   // "l1" or "l2"
  std::vector<double> trace;  // zone objectives summed per iteration
  bool trace_monotone = true;
  BitBudget budget;
  double wall_seconds = 0.0;
};

struct LayerResult {
  QuantizedLayer layer;
  QuantReport report;
};

// ---------------------------------------------------------------------------
// Zone and block quantization.

namespace detail {

struct ZoneOutcome {
  ZoneParams params;
  SignPlane plane1;
  SignPlane plane2;
  ArbTrace trace;
};

inline std::vector<float> to_float(const Vector& v) {
  std::vector<float> out(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(v(i));
  return out;
}

/// Quantizes one zone of a block, given the zone already restricted to the
/// columns it touches. stats is required for arb-x only.
inline ZoneOutcome quantize_compact_zone(Method method, int planes, const Matrix& W, const BitMask& M,
                                         const CalibStats* stats, int iterations) {
  ArbOptions opt;
  opt.iterations = method == Method::kBaseline ? 0 : iterations;
  opt.record_rows = false;
  ZoneOutcome z;
  z.params.planes = planes;
  const bool second = planes == 2;
  switch (method) {
    case Method::kBaseline:
    case Method::kArb:
    case Method::kArbX: {
      if (method == Method::kArbX && stats == nullptr) throw ValidationError("arb-x needs calibration statistics");
      if (second) {
        auto res = method == Method::kArbX ? arbx_second_order(W, M, *stats, opt) : arb_second_order(W, M, opt);
        z.params.alpha = {to_float(res.quant.alpha1), to_float(res.quant.alpha2)};
        z.params.mu = to_float(res.quant.mu);
        z.plane1 = std::move(res.quant.plane1);
        z.plane2 = std::move(res.quant.plane2);
        z.trace = std::move(res.trace);
      } else {
        auto res = method == Method::kArbX ? arbx_first_order(W, M, *stats, opt) : arb_first_order(W, M, opt);
        z.params.alpha = {to_float(res.quant.params.alpha)};
        z.params.mu = to_float(res.quant.params.mu);
        z.plane1 = std::move(res.quant.plane);
        z.trace = std::move(res.trace);
      }
      break;
    }
    case Method::kArbRc: {
      auto res = second ? arbrc_second_order(W, M, opt) : arbrc_first_order(W, M, opt);
      gauge_fix(res.quant);
      z.params.alpha = {to_float(res.quant.alpha_r)};
      z.params.alpha_c = {to_float(res.quant.alpha_c)};
      if (second) {
        z.params.alpha.push_back(to_float(res.quant.alpha_r2));
        z.params.alpha_c.push_back(to_float(res.quant.alpha_c2));
        z.plane2 = std::move(res.quant.plane2);
      }
      z.plane1 = std::move(res.quant.plane);
      z.trace = std::move(res.trace);
      break;
    }
  }
  return z;
}

/// Quantizes one zone of a block. Columns without any zone entry are
/// dropped first; the result is identical to quantizing the full block.
inline ZoneOutcome quantize_zone(Method method, int planes, const Matrix& W, const BitMask& M,
                                 const CalibStats* stats, int iterations) {
  const std::size_t n = M.rows();
  const std::size_t m = M.cols();
  std::vector<std::size_t> used;
  M.any_rows().for_each_set(0, [&](std::size_t c) { used.push_back(c); });
  if (used.size() == m || used.empty()) return quantize_compact_zone(method, planes, W, M, stats, iterations);

  const auto k = static_cast<Eigen::Index>(used.size());
  Matrix Wc(W.rows(), k);
  BitMask Mc(n, used.size());
  for (Eigen::Index j = 0; j < k; ++j) {
    const std::size_t c = used[static_cast<std::size_t>(j)];
    Wc.col(j) = W.col(static_cast<Eigen::Index>(c));
    for (std::size_t r = 0; r < n; ++r)
      if (M.get(r, c)) Mc.set(r, static_cast<std::size_t>(j), true);
  }
  CalibStats sc;
  if (stats != nullptr) {
    sc.dim = used.size();
    sc.sample_count = stats->sample_count;
    sc.S.resize(k, k);
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index b = 0; b < k; ++b)
        sc.S(a, b) = stats->S(static_cast<Eigen::Index>(used[static_cast<std::size_t>(a)]),
                              static_cast<Eigen::Index>(used[static_cast<std::size_t>(b)]));
  }
  ZoneOutcome zc = quantize_compact_zone(method, planes, Wc, Mc, stats ? &sc : nullptr, iterations);

  ZoneOutcome z;
  z.params = std::move(zc.params);
  z.trace = std::move(zc.trace);
  z.plane1 = SignPlane(n, m);
  z.plane2 = SignPlane(n, m);
  z.plane1.fill(true);
  z.plane2.fill(true);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t j = 0; j < used.size(); ++j) {
      z.plane1.set(r, used[j], zc.plane1.get(r, j));
      if (planes == 2) z.plane2.set(r, used[j], zc.plane2.get(r, j));
    }
  }
  for (auto& ac : z.params.alpha_c) {
    std::vector<float> full(m, 0.0f);
    for (std::size_t j = 0; j < used.size(); ++j) full[used[j]] = ac[j];
    ac = std::move(full);
  }
  return z;
}

inline void add_trace(std::vector<double>& total, const ArbTrace& t) {
  if (total.size() < t.steps.size()) total.resize(t.steps.size(), 0.0);
  for (std::size_t i = 0; i < t.steps.size(); ++i) total[i] += t.steps[i].error;
}

}  // namespace detail

struct PartitionQuant {
  Matrix reconstruction;  // stored-precision values, n x width
  BlockParams params;
  SignPlane plane1;
  SignPlane plane2;
  std::vector<double> trace;  // zone objectives summed per iteration
};

/// Quantizes a block zone by zone under the given (block-local) maps:
/// salient zones with `salient_order` planes, the rest with one.
inline PartitionQuant quantize_partition(const Matrix& W, const PartitionMaps& maps, Method method, int salient_order,
                                         int iterations, const CalibStats* stats = nullptr) {
  check_weights(W);
  require_shape(maps.rows() == static_cast<std::size_t>(W.rows()) && maps.cols() == static_cast<std::size_t>(W.cols()),
                "partition maps differ from block shape");
  const auto n = static_cast<std::size_t>(W.rows());
  const auto m = static_cast<std::size_t>(W.cols());
  PartitionQuant out;
  out.params.begin = 0;
  out.params.width = m;
  out.plane1 = SignPlane(n, m);
  out.plane2 = SignPlane(n, m);
  out.plane2.fill(true);
  for (int z = 0; z < kZoneCount; ++z) {
    const BitMask M = maps.zone_mask(z);
    if (!M.any()) continue;
    const int planes = zone_is_salient(z) ? salient_order : 1;
    detail::ZoneOutcome zo = detail::quantize_zone(method, planes, W, M, stats, iterations);
    zo.params.zone = z;
    for (std::size_t r = 0; r < n; ++r) {
      M.for_each_set(r, [&](std::size_t c) {
        out.plane1.set(r, c, zo.plane1.get(r, c));
        if (planes == 2) out.plane2.set(r, c, zo.plane2.get(r, c));
      });
    }
    detail::add_trace(out.trace, zo.trace);
    out.params.zones.push_back(std::move(zo.params));
  }
  out.reconstruction = Matrix::Zero(W.rows(), W.cols());
  reconstruct_block(out.params, maps, out.plane1, out.plane2, out.reconstruction);
  return out;
}

/// Evaluator for splitting a scope: the quantizer that will run on the
/// resulting zones, scored by its own objective.
inline SplitEvaluator zone_split_evaluator(const Matrix& W, Method method, int planes, const CalibStats* stats,
                                           int iterations) {
  return [&W, method, planes, stats, iterations](const BitMask& conc, const BitMask& sparse) {
    double e = 0.0;
    if (conc.any()) e += detail::quantize_zone(method, planes, W, conc, stats, iterations).trace.final();
    if (sparse.any()) e += detail::quantize_zone(method, planes, W, sparse, stats, iterations).trace.final();
    return e;
  };
}

/// Group bitmap for one block given its salient columns. The non-salient
/// columns are split by plain binarization error; with cgb the salient
/// columns are split by the salient zone quantizer itself, otherwise they
/// stay one group.
inline BitMask block_groups(const Matrix& W, const BitMask& salient_cols, const std::vector<double>& grid, bool cgb,
                            Method method, int salient_order, int iterations, const CalibStats* stats) {
  const auto n = static_cast<std::size_t>(W.rows());
  const BitMask cs = salient_cols.broadcast_rows(n);
  const BitMask ns = ~cs;
  BitMask group(n, static_cast<std::size_t>(W.cols()));
  if (ns.any()) group = group | split_groups(W, ns, grid).group;
  if (cgb && cs.any())
    group = group | split_groups(W, cs, grid, zone_split_evaluator(W, method, salient_order, stats, iterations)).group;
  return group;
}

inline PartitionMaps slice_maps(const PartitionMaps& maps, std::size_t begin, std::size_t width) {
  return {maps.salient_cols.slice_cols(begin, width), maps.group.slice_cols(begin, width)};
}

/// Total error of quantizing W block by block without compensation, with
/// closed-form binarization and closed-form group splits, for a candidate
/// salient column set.
inline double salient_candidate_error(const Matrix& W, const BitMask& salient_cols, const QuantConfig& cfg) {
  const auto m = static_cast<std::size_t>(W.cols());
  double total = 0.0;
  for (std::size_t b0 = 0; b0 < m; b0 += cfg.block_size) {
    const std::size_t kb = std::min(cfg.block_size, m - b0);
    const Matrix Wb = W.middleCols(static_cast<Eigen::Index>(b0), static_cast<Eigen::Index>(kb));
    const BitMask cs = salient_cols.slice_cols(b0, kb);
    const BitMask full_cs = cs.broadcast_rows(static_cast<std::size_t>(W.rows()));
    const BitMask ns = ~full_cs;
    BitMask g(static_cast<std::size_t>(W.rows()), kb);
    if (ns.any()) g = g | split_groups(Wb, ns, cfg.percentile_grid).group;
    if (cfg.effective_cgb() && full_cs.any()) g = g | split_groups(Wb, full_cs, cfg.percentile_grid).group;
    const PartitionQuant pq = quantize_partition(Wb, {cs, g}, Method::kBaseline, cfg.salient_order, 0);
    total += pq.trace.front();
  }
  return total;
}

/// Quantizes one layer. The last quarter of the batches is held out for the
/// output error (see split_calibration).
inline LayerResult quantize_layer(const Matrix& W, const std::vector<Matrix>& batches, const QuantConfig& cfg,
                                  const std::string& name = "layer") {
  const auto t0 = std::chrono::steady_clock::now();
  cfg.validate();
  check_weights(W);
  for (const Matrix& X : batches)
    require_shape(X.cols() == W.cols(), "calibration width differs from weight cols");
  const auto n = static_cast<std::size_t>(W.rows());
  const auto m = static_cast<std::size_t>(W.cols());
  const Method method = cfg.method;
  const int T = cfg.effective_iterations();
  const bool cgb = cfg.effective_cgb();

  auto [calib, holdout] = split_calibration(batches);
  const CalibStats stats = accumulate_second_moment(calib);
  const Matrix H = hessian_from_stats(stats, cfg.damping);
  const SensitivityScores scores = sensitivity(W, inverse_diag(H));

  const SalientSelection sel = select_salient_columns(
      scores, cfg.salient_fractions, [&](const BitMask& cs) { return salient_candidate_error(W, cs, cfg); });

  QuantizedLayer layer;
  layer.name = name;
  layer.method = method;
  layer.salient_order = cfg.salient_order;
  layer.iterations = T;
  layer.block = std::min(cfg.block_size, m);
  layer.cgb = cgb;
  layer.rows = n;
  layer.cols = m;
  layer.maps.salient_cols = sel.cols;
  layer.maps.group = BitMask(n, m);

  const std::size_t k = layer.block;
  const std::size_t nblocks = (m + k - 1) / k;
  std::vector<CalibStats> block_stats(nblocks);
  for (std::size_t b = 0; b < nblocks; ++b) block_stats[b] = slice_stats(stats, b * k, std::min(k, m - b * k));

  // Group splits on the original weights, per block.
  std::vector<BitMask> groups(nblocks);
  parallel_for(nblocks, [&](std::size_t b) {
    const std::size_t b0 = b * k;
    const std::size_t kb = std::min(k, m - b0);
    const Matrix Wb = W.middleCols(static_cast<Eigen::Index>(b0), static_cast<Eigen::Index>(kb));
    groups[b] = block_groups(Wb, sel.cols.slice_cols(b0, kb), cfg.percentile_grid, cgb, method, cfg.salient_order, T,
                             method == Method::kArbX ? &block_stats[b] : nullptr);
  });
  for (std::size_t b = 0; b < nblocks; ++b)
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < groups[b].cols(); ++j)
        if (groups[b].get(r, j)) layer.maps.group.set(r, b * k + j, true);

  layer.plane1 = SignPlane(n, m);
  layer.plane2 = SignPlane(n, m);
  layer.blocks.resize(nblocks);
  std::vector<double> trace;
  const CompensationResult comp = compensated_quantize(W, H, k, [&](const Matrix& block, std::size_t b0) {
    const std::size_t b = b0 / k;
    const std::size_t kb = static_cast<std::size_t>(block.cols());
    PartitionQuant pq = quantize_partition(block, slice_maps(layer.maps, b0, kb), method, cfg.salient_order, T,
                                           method == Method::kArbX ? &block_stats[b] : nullptr);
    pq.params.begin = b0;
    layer.blocks[b] = std::move(pq.params);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < kb; ++j) {
        layer.plane1.set(r, b0 + j, pq.plane1.get(r, j));
        layer.plane2.set(r, b0 + j, pq.plane2.get(r, j));
      }
    }
    if (trace.size() < pq.trace.size()) trace.resize(pq.trace.size(), 0.0);
    for (std::size_t i = 0; i < pq.trace.size(); ++i) trace[i] += pq.trace[i];
    return pq.reconstruction;
  });
  // Second-plane bits outside the salient columns are not stored.
  for (std::size_t c = 0; c < m; ++c)
    if (!sel.cols.get(0, c))
      for (std::size_t r = 0; r < n; ++r) layer.plane2.set(r, c, true);
  layer.budget = layer_storage(layer, cfg.scale_bits);

  LayerResult res;
  QuantReport& rep = res.report;
  rep.layer = name;
  rep.method = method;
  rep.rows = n;
  rep.cols = m;
  rep.block = k;
  rep.cgb = cgb;
  rep.iterations = T;
  rep.salient_order = cfg.salient_order;
  rep.salient_cols = sel.cols.count();
  rep.salient_fraction = sel.fraction;
  rep.metrics = layer_metrics(W, comp.reconstruction, stats, holdout);
  rep.trace_metric = method == Method::kArbX ? "l2" : "l1";
  rep.trace = std::move(trace);
  for (std::size_t i = 1; i < rep.trace.size(); ++i)
    if (rep.trace[i] > rep.trace[i - 1] + 1e-9 * (rep.trace.front() + 1.0)) rep.trace_monotone = false;
  rep.budget = layer.budget;
  res.layer = std::move(layer);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

// ---------------------------------------------------------------------------
// Synthetic data and whole-model runs.

inline std::mt19937_64 seeded_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(a >> 32),
                    static_cast<std::uint32_t>(b), static_cast<std::uint32_t>(b >> 32)};
  return std::mt19937_64(seq);
}

struct SyntheticWeightOptions {
  double outlier_fraction = 1.0 / 32;  // columns scaled up by outlier_scale
  double outlier_scale = 6.0;
  double column_spread = 0.3;  // log-normal sigma of per-column scales
  double row_spread = 0.2;     // log-normal sigma of per-row scales
};

/// Gaussian weights with per-row and per-column magnitude profiles and a few
/// planted high-magnitude columns.
inline Matrix synthetic_weights(std::size_t n, std::size_t m, std::uint64_t seed, std::uint64_t stream = 0,
                                const SyntheticWeightOptions& opt = {}) {
  if (n < 1 || m < 1) throw ShapeError("synthetic weights need a non-empty shape");
  auto rng = seeded_rng(seed, stream, 0x57);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector row_scale(static_cast<Eigen::Index>(n));
  Vector col_scale(static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < row_scale.size(); ++i) row_scale(i) = std::exp(opt.row_spread * gauss(rng));
  for (Eigen::Index j = 0; j < col_scale.size(); ++j) col_scale(j) = std::exp(opt.column_spread * gauss(rng));
  const std::size_t planted = salient_count(m, opt.outlier_fraction);
  std::vector<std::size_t> cols(m);
  for (std::size_t j = 0; j < m; ++j) cols[j] = j;
  std::shuffle(cols.begin(), cols.end(), rng);
  for (std::size_t i = 0; i < planted; ++i) col_scale(static_cast<Eigen::Index>(cols[i])) *= opt.outlier_scale;
  Matrix W(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  for (Eigen::Index r = 0; r < W.rows(); ++r)
    for (Eigen::Index c = 0; c < W.cols(); ++c) W(r, c) = 0.02 * row_scale(r) * col_scale(c) * gauss(rng);
  return W;
}

/// Gaussian activation batches (batches x seq_len x m) with a fraction of
/// high-variance channels, seeded by (seed, m).
inline std::vector<Matrix> synthetic_calibration(std::size_t m, const QuantConfig& cfg) {
  if (m < 1) throw ShapeError("synthetic calibration needs m >= 1");
  auto rng = seeded_rng(cfg.seed, m, 0xCA);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Vector scale = Vector::Ones(static_cast<Eigen::Index>(m));
  const std::size_t planted = cfg.calib_outlier_fraction > 0.0 ? salient_count(m, cfg.calib_outlier_fraction) : 0;
  std::vector<std::size_t> cols(m);
  for (std::size_t j = 0; j < m; ++j) cols[j] = j;
  std::shuffle(cols.begin(), cols.end(), rng);
  for (std::size_t i = 0; i < planted; ++i) scale(static_cast<Eigen::Index>(cols[i])) = cfg.calib_outlier_scale;
  std::vector<Matrix> out;
  out.reserve(cfg.calib_batches);
  for (std::size_t b = 0; b < cfg.calib_batches; ++b) {
    Matrix X(static_cast<Eigen::Index>(cfg.calib_seq_len), static_cast<Eigen::Index>(m));
    for (Eigen::Index r = 0; r < X.rows(); ++r)
      for (Eigen::Index c = 0; c < X.cols(); ++c) X(r, c) = scale(c) * gauss(rng);
    out.push_back(std::move(X));
  }
  return out;
}

struct LayerInput {
  std::string name;
  Matrix weights;
};

/// Calibration batches for layer (name, index) of width dim.
using CalibSource = std::function<std::vector<Matrix>(const std::string& name, std::size_t index, std::size_t dim)>;

struct ModelResult {
  std::vector<LayerResult> layers;
  BitBudget total;
};

inline BitBudget sum_budgets(const std::vector<LayerResult>& layers) {
  BitBudget t;
  std::uint64_t weights = 0;
  for (const auto& l : layers) {
    t.plane_bits += l.layer.budget.plane_bits;
    t.bitmap_bits += l.layer.budget.bitmap_bits;
    t.scale_bits += l.layer.budget.scale_bits;
    t.total_bytes += l.layer.budget.total_bytes;
    weights += static_cast<std::uint64_t>(l.layer.rows) * l.layer.cols;
  }
  t.avg_weight_bits = weights == 0 ? 0.0 : static_cast<double>(t.plane_bits) / static_cast<double>(weights);
  return t;
}

/// Quantizes layers in declared order; layers may run concurrently but
/// results keep that order.
inline ModelResult quantize_model(const std::vector<LayerInput>& layers, const CalibSource& calib,
                                  const QuantConfig& cfg) {
  cfg.validate();
  ModelResult out;
  out.layers.resize(layers.size());
  parallel_for(layers.size(), [&](std::size_t i) {
    const auto& L = layers[i];
    const auto batches = calib(L.name, i, static_cast<std::size_t>(L.weights.cols()));
    out.layers[i] = quantize_layer(L.weights, batches, cfg, L.name);
  });
  out.total = sum_budgets(out.layers);
  return out;
}

}  // namespace arbq
