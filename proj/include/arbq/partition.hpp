// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Weight partitioning: Hessian-based column saliency, magnitude-based
// concentrated/sparse group splits, the combined column-group bitmap, and
// the bit/memory ledger for a partitioned layer.

#include <Eigen/Cholesky>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "arbq/binarize.hpp"
#include "arbq/calib.hpp"
#include "arbq/parallel.hpp"
#include "arbq/tensor.hpp"

namespace arbq {

/// Zone ids. Every weight sits in exactly one zone.
enum Zone : int {
  kNonSalientConcentrated = 0,
  kNonSalientSparse = 1,
  kSalientConcentrated = 2,
  kSalientSparse = 3,
};
inline constexpr int kZoneCount = 4;

inline bool zone_is_salient(int z) { return z >= kSalientConcentrated; }
inline bool zone_is_sparse(int z) { return z == kNonSalientSparse || z == kSalientSparse; }

struct PartitionMaps {
  BitMask salient_cols;  // 1 x m
  BitMask group;         // n x m, 1 = sparse group

  std::size_t rows() const { return group.rows(); }
  std::size_t cols() const { return group.cols(); }

  BitMask non_salient_cols() const { return ~salient_cols; }
  BitMask salient_sparse() const { return salient_cols.broadcast_rows(rows()) & group; }
  BitMask non_salient_sparse() const { return non_salient_cols().broadcast_rows(rows()) & group; }

  BitMask zone_mask(int z) const {
    const BitMask cols = zone_is_salient(z) ? salient_cols : non_salient_cols();
    const BitMask g = zone_is_sparse(z) ? group : ~group;
    return cols.broadcast_rows(rows()) & g;
  }

  std::size_t salient_count() const { return salient_cols.count(); }
};

/// (G_s, G_ns): the sparse group split by column saliency.
inline std::pair<BitMask, BitMask> build_cgb(const BitMask& salient_cols, const BitMask& group) {
  require_shape(salient_cols.rows() == 1 && salient_cols.cols() == group.cols(),
                "column mask must be 1 x m with m = group cols");
  const BitMask cs = salient_cols.broadcast_rows(group.rows());
  return {cs & group, (~cs) & group};
}

struct SensitivityScores {
  Matrix s;       // n x m
  Vector column;  // per-column sum over rows
};

struct BitBudget {
  std::uint64_t plane_bits = 0;
  std::uint64_t bitmap_bits = 0;
  std::uint64_t scale_bits = 0;
  double avg_weight_bits = 0.0;
  std::uint64_t total_bytes = 0;
};

/// H = 2 S + lambda I with lambda = damping * mean(diag S).
inline Matrix hessian_from_stats(const CalibStats& stats, double damping = 0.01) {
  if (!(damping >= 0.0) || !std::isfinite(damping)) throw ValidationError("damping must be finite and >= 0");
  if (!stats.S.allFinite()) throw ValidationError("calibration statistics are non-finite");
  require_shape(stats.S.rows() == stats.S.cols() && stats.S.rows() > 0, "second-moment matrix must be square");
  const double lambda = damping * stats.S.diagonal().mean();
  Matrix H = 2.0 * stats.S;
  H.diagonal().array() += lambda;
  return H;
}

/// diag(H^-1) through a Cholesky factorization.
inline Vector inverse_diag(const Matrix& H) {
  require_shape(H.rows() == H.cols() && H.rows() > 0, "Hessian must be square");
  Eigen::LLT<Matrix> llt(H);
  if (llt.info() != Eigen::Success) throw SingularHessian("Hessian is not positive definite; raise damping");
  // diag(H^-1)_i = || L^-1 e_i ||^2
  Matrix Linv = Matrix::Identity(H.rows(), H.cols());
  llt.matrixL().solveInPlace(Linv);
  Vector d = Linv.colwise().squaredNorm().transpose();
  if (!d.allFinite() || (d.array() <= 0.0).any()) throw SingularHessian("Hessian inverse has a non-positive diagonal");
  return d;
}

/// s_ij = W_ij^2 / inv_diag_j^2.
inline SensitivityScores sensitivity(const Matrix& W, const Vector& inv_diag) {
  check_weights(W);
  require_shape(inv_diag.size() == W.cols(), "inverse diagonal length differs from weight cols");
  if (!inv_diag.allFinite() || (inv_diag.array() <= 0.0).any())
    throw ValidationError("inverse diagonal entries must be finite and positive");
  SensitivityScores out;
  out.s = W.array().square().rowwise() / inv_diag.transpose().array().square();
  out.column = out.s.colwise().sum().transpose();
  return out;
}

/// ceil(fraction * m), clamped to m.
inline std::size_t salient_count(std::size_t m, double fraction) {
  return std::min(m, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(m) - 1e-9)));
}

/// Columns with the top ceil(fraction * m) aggregates; lower index wins ties.
inline BitMask top_columns(const Vector& aggregate, double fraction) {
  const auto m = static_cast<std::size_t>(aggregate.size());
  const std::size_t count = salient_count(m, fraction);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return aggregate(static_cast<Eigen::Index>(a)) > aggregate(static_cast<Eigen::Index>(b));
  });
  BitMask out(1, m);
  for (std::size_t i = 0; i < count; ++i) out.set(0, order[i], true);
  return out;
}

struct SalientSelection {
  BitMask cols;
  double fraction = 0.0;
  std::size_t index = 0;
  std::vector<double> scores;  // eval_fn value per candidate
};

inline const std::vector<double>& default_salient_fractions() {
  static const std::vector<double> v{1.0 / 32, 1.0 / 16, 3.0 / 32, 1.0 / 8, 5.0 / 32};
  return v;
}

inline const std::vector<double>& default_percentile_grid() {
  static const std::vector<double> v = [] {
    std::vector<double> g;
    for (int i = 1; i <= 19; ++i) g.push_back(0.05 * i);
    return g;
  }();
  return v;
}

inline void validate_fractions(const std::vector<double>& fractions) {
  if (fractions.empty()) throw ValidationError("salient fraction candidates are empty");
  for (double f : fractions)
    if (!(f > 0.0 && f <= 0.5)) throw ValidationError("salient fractions must lie in (0, 0.5]");
}

inline void validate_grid(const std::vector<double>& grid) {
  if (grid.empty()) throw ValidationError("percentile grid is empty");
  for (double p : grid)
    if (!(p > 0.0 && p < 1.0)) throw ValidationError("percentiles must lie in (0, 1)");
}

/// Evaluates every candidate fraction and keeps the one with the lowest
/// eval_fn score; the earliest candidate wins ties.
inline SalientSelection select_salient_columns(const Vector& column_scores, const std::vector<double>& fractions,
                                               const std::function<double(const BitMask&)>& eval_fn) {
  validate_fractions(fractions);
  if (column_scores.size() < 1) throw ShapeError("no columns to score");
  std::vector<BitMask> masks;
  masks.reserve(fractions.size());
  for (double f : fractions) masks.push_back(top_columns(column_scores, f));
  SalientSelection out;
  out.scores.assign(fractions.size(), 0.0);
  parallel_for(fractions.size(), [&](std::size_t i) { out.scores[i] = eval_fn(masks[i]); });
  for (std::size_t i = 1; i < fractions.size(); ++i)
    if (out.scores[i] < out.scores[out.index]) out.index = i;
  out.cols = masks[out.index];
  out.fraction = fractions[out.index];
  return out;
}

inline SalientSelection select_salient_columns(const SensitivityScores& scores, const std::vector<double>& fractions,
                                               const std::function<double(const BitMask&)>& eval_fn) {
  return select_salient_columns(scores.column, fractions, eval_fn);
}

/// quant_error_l1(W, binary_first_order(W, M), M) without materializing the
/// quantizer.
inline double binary_first_order_error(const Matrix& W, const BitMask& M) {
  require_mask_shape(W, M);
  double total = 0.0;
  std::vector<double> v;
  for (std::size_t r = 0; r < M.rows(); ++r) {
    v.clear();
    M.for_each_set(r, [&](std::size_t c) { v.push_back(W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))); });
    if (v.empty()) continue;
    const double cnt = static_cast<double>(v.size());
    double sum = 0.0;
    for (double x : v) sum += x;
    const double mu = sum / cnt;
    double abs_sum = 0.0;
    for (double x : v) abs_sum += std::abs(x - mu);
    const double alpha = abs_sum / cnt;
    double e = 0.0;
    for (double x : v) {
      const double d = x - (alpha * sign_of(x - mu) + mu);
      e += d * d;
    }
    total += e;
  }
  return total;
}

/// Scores a split of one scope into (concentrated, sparse) masks.
using SplitEvaluator = std::function<double(const BitMask& concentrated, const BitMask& sparse)>;

/// Sum of first-order binarization errors of both groups, each binarized
/// on its own.
inline SplitEvaluator binary_split_evaluator(const Matrix& W) {
  return [&W](const BitMask& conc, const BitMask& sparse) {
    return binary_first_order_error(W, conc) + binary_first_order_error(W, sparse);
  };
}

struct GroupSplit {
  BitMask group;  // n x m, set only inside the scope
  // Chosen percentile; NaN when the single-group option won.
  double percentile = std::numeric_limits<double>::quiet_NaN();
  double threshold = std::numeric_limits<double>::infinity();
  std::size_t index = 0;        // grid index; grid.size() for the single group
  std::vector<double> errors;   // per grid entry, then the single group
};

/// p-quantile of |W| over the scope with lower interpolation.
inline double lower_quantile(const std::vector<double>& sorted_abs, double p) {
  const auto k = static_cast<std::size_t>(std::floor(p * static_cast<double>(sorted_abs.size() - 1)));
  return sorted_abs[k];
}

/// Chooses the magnitude threshold over the scope that minimizes the
/// evaluator, trying each grid percentile and finally no split at all.
/// The earliest candidate wins ties.
inline GroupSplit split_groups(const Matrix& W, const BitMask& scope, const std::vector<double>& grid,
                               const SplitEvaluator& evaluate) {
  validate_grid(grid);
  require_mask_shape(W, scope);
  std::vector<double> mags;
  for (std::size_t r = 0; r < scope.rows(); ++r)
    for (std::size_t c = 0; c < scope.cols(); ++c)
      if (scope.get(r, c)) mags.push_back(std::abs(W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))));
  if (mags.empty()) throw ValidationError("group split scope is empty");
  std::sort(mags.begin(), mags.end());

  auto sparse_for = [&](double t) {
    BitMask g(scope.rows(), scope.cols());
    for (std::size_t r = 0; r < scope.rows(); ++r)
      for (std::size_t c = 0; c < scope.cols(); ++c)
        if (scope.get(r, c) && std::abs(W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))) > t)
          g.set(r, c, true);
    return g;
  };

  const std::size_t n_cand = grid.size() + 1;
  std::vector<double> thresholds(n_cand, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < grid.size(); ++i) thresholds[i] = lower_quantile(mags, grid[i]);

  GroupSplit out;
  out.errors.assign(n_cand, 0.0);
  parallel_for(n_cand, [&](std::size_t i) {
    const BitMask sparse = sparse_for(thresholds[i]);
    const BitMask conc = scope & ~sparse;
    out.errors[i] = evaluate(conc, sparse);
  });
  for (std::size_t i = 1; i < n_cand; ++i)
    if (out.errors[i] < out.errors[out.index]) out.index = i;
  out.threshold = thresholds[out.index];
  if (out.index < grid.size()) out.percentile = grid[out.index];
  out.group = sparse_for(out.threshold);
  return out;
}

namespace detail {

// One scope row sorted by value, with prefix sums, for closed-form
// binarization errors of value ranges.
struct SortedRow {
  std::vector<double> x;
  std::vector<double> p1;  // p1[i] = sum of x[0..i)
  std::vector<double> p2;  // p2[i] = sum of x[0..i)^2
};

struct RangeStats {
  double count = 0.0;
  double sum = 0.0;
  double sumsq = 0.0;
};

inline RangeStats range_stats(const SortedRow& s, std::size_t lo, std::size_t hi) {
  return {static_cast<double>(hi - lo), s.p1[hi] - s.p1[lo], s.p2[hi] - s.p2[lo]};
}

// sum |x - mu| over x[lo, hi).
inline double range_abs_dev(const SortedRow& s, std::size_t lo, std::size_t hi, double mu) {
  if (lo >= hi) return 0.0;
  auto split = static_cast<std::size_t>(std::upper_bound(s.x.begin(), s.x.end(), mu) - s.x.begin());
  split = std::clamp(split, lo, hi);
  const double below = mu * static_cast<double>(split - lo) - (s.p1[split] - s.p1[lo]);
  const double above = (s.p1[hi] - s.p1[split]) - mu * static_cast<double>(hi - split);
  return below + above;
}

// First-order binarization error of the union of up to two ranges:
// sum (x - mu)^2 - c alpha^2 with mu the mean and alpha the mean |x - mu|.
inline double ranges_error(const SortedRow& s, std::initializer_list<std::pair<std::size_t, std::size_t>> ranges) {
  RangeStats t;
  for (auto [lo, hi] : ranges) {
    const RangeStats r = range_stats(s, lo, hi);
    t.count += r.count;
    t.sum += r.sum;
    t.sumsq += r.sumsq;
  }
  if (t.count == 0.0) return 0.0;
  const double mu = t.sum / t.count;
  double dev = 0.0;
  for (auto [lo, hi] : ranges) dev += range_abs_dev(s, lo, hi, mu);
  const double alpha = dev / t.count;
  return std::max(0.0, t.sumsq - t.sum * mu - t.count * alpha * alpha);
}

}  // namespace detail

/// Default split search scored by closed-form first-order binarization of
/// both groups. Equivalent to split_groups with binary_split_evaluator, but
/// evaluates each candidate from per-row sorted prefix sums.
inline GroupSplit split_groups(const Matrix& W, const BitMask& scope, const std::vector<double>& grid) {
  validate_grid(grid);
  require_mask_shape(W, scope);
  std::vector<detail::SortedRow> rows(scope.rows());
  std::vector<double> mags;
  for (std::size_t r = 0; r < scope.rows(); ++r) {
    auto& row = rows[r];
    scope.for_each_set(r, [&](std::size_t c) {
      const double w = W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
      row.x.push_back(w);
      mags.push_back(std::abs(w));
    });
    std::sort(row.x.begin(), row.x.end());
    row.p1.assign(row.x.size() + 1, 0.0);
    row.p2.assign(row.x.size() + 1, 0.0);
    for (std::size_t i = 0; i < row.x.size(); ++i) {
      row.p1[i + 1] = row.p1[i] + row.x[i];
      row.p2[i + 1] = row.p2[i] + row.x[i] * row.x[i];
    }
  }
  if (mags.empty()) throw ValidationError("group split scope is empty");
  std::sort(mags.begin(), mags.end());

  const std::size_t n_cand = grid.size() + 1;
  std::vector<double> thresholds(n_cand, std::numeric_limits<double>::infinity());
  for (std::size_t i = 0; i < grid.size(); ++i) thresholds[i] = lower_quantile(mags, grid[i]);

  GroupSplit out;
  out.errors.assign(n_cand, 0.0);
  for (std::size_t i = 0; i < n_cand; ++i) {
    const double t = thresholds[i];
    double e = 0.0;
    for (const auto& row : rows) {
      const std::size_t N = row.x.size();
      if (N == 0) continue;
      // Concentrated group: -t <= x <= t, a contiguous range of the sorted row.
      const auto lo = static_cast<std::size_t>(std::lower_bound(row.x.begin(), row.x.end(), -t) - row.x.begin());
      const auto hi = static_cast<std::size_t>(std::upper_bound(row.x.begin(), row.x.end(), t) - row.x.begin());
      e += detail::ranges_error(row, {{lo, hi}});
      e += detail::ranges_error(row, {{0, lo}, {hi, N}});
    }
    out.errors[i] = e;
  }
  for (std::size_t i = 1; i < n_cand; ++i)
    if (out.errors[i] < out.errors[out.index]) out.index = i;
  out.threshold = thresholds[out.index];
  if (out.index < grid.size()) out.percentile = grid[out.index];
  out.group = BitMask(scope.rows(), scope.cols());
  for (std::size_t r = 0; r < scope.rows(); ++r)
    scope.for_each_set(r, [&](std::size_t c) {
      if (std::abs(W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c))) > out.threshold)
        out.group.set(r, c, true);
    });
  return out;
}

/// One sign plane everywhere plus a second plane on the salient fraction.
inline double avg_bits(std::size_t n, std::size_t m, double salient_fraction) {
  if (n < 1 || m < 1) throw ShapeError("avg_bits needs a non-empty shape");
  if (!(salient_fraction >= 0.0 && salient_fraction <= 1.0)) throw ValidationError("salient fraction outside [0, 1]");
  return 1.0 + salient_fraction;
}

// ---------------------------------------------------------------------------
// Memory ledger.

enum class ScaleStyle {
  kRowMean,    // per-row scales and a per-row mean in every zone
  kRowColumn,  // per-row and per-column scales, no mean
};

struct TensorShape {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t count = 1;
};

struct ModelShapes {
  std::vector<TensorShape> linear;  // binarized layers
  std::vector<TensorShape> fp16;    // kept in half precision (embeddings, head, norms)
};

struct MemoryOptions {
  ScaleStyle style = ScaleStyle::kRowMean;
  bool cgb = true;
  std::size_t block = 128;
  double salient_fraction = 0.09;
  int scale_bits = 32;
};

/// Planes stored by each zone; the salient zones carry two.
inline int zone_planes(int z) { return zone_is_salient(z) ? 2 : 1; }

/// Zones that exist for a partition style: without the combined bitmap
/// the salient columns form a single undivided zone.
inline std::vector<int> active_zones(bool cgb, bool has_salient) {
  std::vector<int> zones{kNonSalientConcentrated, kNonSalientSparse};
  if (has_salient) {
    zones.push_back(kSalientConcentrated);
    if (cgb) zones.push_back(kSalientSparse);
  }
  return zones;
}

/// Storage for one binarized n x m layer with s salient columns.
inline BitBudget layer_budget(std::size_t n, std::size_t m, std::size_t s, const MemoryOptions& opt) {
  if (opt.block < 1) throw ValidationError("block size must be >= 1");
  if (opt.scale_bits != 16 && opt.scale_bits != 32) throw ValidationError("scale width must be 16 or 32 bits");
  BitBudget b;
  const std::uint64_t nm = static_cast<std::uint64_t>(n) * m;
  b.plane_bits = nm + static_cast<std::uint64_t>(n) * s;
  b.bitmap_bits = nm + m;
  const std::uint64_t blocks = (m + opt.block - 1) / opt.block;
  std::uint64_t values = 0;
  for (int z : active_zones(opt.cgb, s > 0)) {
    const std::uint64_t planes = static_cast<std::uint64_t>(zone_planes(z));
    if (opt.style == ScaleStyle::kRowMean) {
      values += static_cast<std::uint64_t>(n) * blocks * (planes + 1);
    } else {
      values += static_cast<std::uint64_t>(n) * blocks * planes + static_cast<std::uint64_t>(m) * planes;
    }
  }
  b.scale_bits = values * static_cast<std::uint64_t>(opt.scale_bits);
  b.avg_weight_bits = nm == 0 ? 0.0 : static_cast<double>(b.plane_bits) / static_cast<double>(nm);
  b.total_bytes = (b.plane_bits + b.bitmap_bits + b.scale_bits + 7) / 8;
  return b;
}

/// Whole-model storage: every binarized layer plus FP16 tensors.
inline BitBudget memory_estimate(const ModelShapes& shapes, const MemoryOptions& opt) {
  if (!(opt.salient_fraction >= 0.0 && opt.salient_fraction <= 1.0))
    throw ValidationError("salient fraction outside [0, 1]");
  BitBudget total;
  std::uint64_t weights = 0;
  std::uint64_t packed_bits = 0;
  for (const auto& t : shapes.linear) {
    if (t.rows < 1 || t.cols < 1) throw ShapeError("layer '" + t.name + "' has an empty shape");
    const BitBudget b = layer_budget(t.rows, t.cols, salient_count(t.cols, opt.salient_fraction), opt);
    total.plane_bits += b.plane_bits * t.count;
    total.bitmap_bits += b.bitmap_bits * t.count;
    total.scale_bits += b.scale_bits * t.count;
    packed_bits += (b.plane_bits + b.bitmap_bits + b.scale_bits) * t.count;
    weights += static_cast<std::uint64_t>(t.rows) * t.cols * t.count;
  }
  std::uint64_t fp16_bytes = 0;
  for (const auto& t : shapes.fp16) fp16_bytes += static_cast<std::uint64_t>(t.rows) * t.cols * t.count * 2;
  total.avg_weight_bits = weights == 0 ? 0.0 : static_cast<double>(total.plane_bits) / static_cast<double>(weights);
  total.total_bytes = (packed_bits + 7) / 8 + fp16_bytes;
  return total;
}

}  // namespace arbq
