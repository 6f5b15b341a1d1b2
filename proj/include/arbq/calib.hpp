// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Calibration-aware binarization. The output error ||W X^T - W_hat X^T||^2
// over calibration rows X is evaluated through the precomputed second-moment
// matrix S = sum_b X_b^T X_b as Tr(R S R^T), R = W - W_hat.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include "arbq/binarize.hpp"
#include "arbq/tensor.hpp"

namespace arbq {

struct CalibStats {
  std::size_t dim = 0;
  Matrix S;
  std::size_t sample_count = 0;
};

/// S = sum_b X_b^T X_b accumulated in batch order. Each batch is L x m.
inline CalibStats accumulate_second_moment(std::span<const Matrix> batches) {
  if (batches.empty()) throw ValidationError("no calibration batches");
  const Eigen::Index m = batches.front().cols();
  if (m < 1) throw ShapeError("calibration batch has no columns");
  CalibStats stats{static_cast<std::size_t>(m), Matrix::Zero(m, m), 0};
  for (const Matrix& X : batches) {
    require_shape(X.cols() == m, "calibration batches differ in width");
    if (!X.allFinite()) throw ValidationError("calibration batch has non-finite entries");
    stats.S.noalias() += X.transpose() * X;
    stats.sample_count += static_cast<std::size_t>(X.rows());
  }
  return stats;
}

inline CalibStats accumulate_second_moment(const std::vector<Matrix>& batches) {
  return accumulate_second_moment(std::span<const Matrix>(batches));
}

/// Second moments restricted to columns [begin, begin + width).
inline CalibStats slice_stats(const CalibStats& stats, std::size_t begin, std::size_t width) {
  require_shape(begin + width <= stats.dim, "stats slice out of range");
  const auto b = static_cast<Eigen::Index>(begin);
  const auto w = static_cast<Eigen::Index>(width);
  return {width, stats.S.block(b, b, w, w), stats.sample_count};
}

/// Tr(R S R^T), summed row by row.
inline double l2_error(const Matrix& R, const CalibStats& stats) {
  require_shape(static_cast<std::size_t>(R.cols()) == stats.dim, "residual width differs from stats dim");
  const Matrix RS = R * stats.S;
  double total = 0.0;
  for (Eigen::Index r = 0; r < R.rows(); ++r) total += RS.row(r).dot(R.row(r));
  return total;
}

namespace detail {

inline std::vector<Eigen::Index> masked_columns(const BitMask& M, std::size_t r) {
  std::vector<Eigen::Index> cols;
  for (std::size_t c = 0; c < M.cols(); ++c)
    if (M.get(r, c)) cols.push_back(static_cast<Eigen::Index>(c));
  return cols;
}

inline Matrix gather(const Matrix& S, const std::vector<Eigen::Index>& idx) {
  const auto k = static_cast<Eigen::Index>(idx.size());
  Matrix out(k, k);
  for (Eigen::Index a = 0; a < k; ++a)
    for (Eigen::Index b = 0; b < k; ++b) out(a, b) = S(idx[a], idx[b]);
  return out;
}

// Denominators at or below this fraction of the masked diagonal mass are
// treated as zero.
inline bool degenerate(double den, double diag_mass) {
  return !(den > 1e-12 * diag_mass) || diag_mass <= 0.0;
}

inline double diag_mass(const Matrix& S, const std::vector<Eigen::Index>& idx) {
  double s = 0.0;
  for (auto j : idx) s += S(j, j);
  return s;
}

inline void check_calib_inputs(const Matrix& W, const BitMask& M, const CalibStats& stats) {
  check_weights(W);
  require_mask_shape(W, M);
  require_shape(static_cast<std::size_t>(W.cols()) == stats.dim, "weight width differs from stats dim");
}

}  // namespace detail

/// Per-row mean minimizing the masked calibration error for fixed alpha, B:
/// mu_i = m^T S (m * (W_i - alpha_i B_i)) / (m^T S m), m = row mask.
/// Rows whose masked S mass vanishes get 0 and bump *guarded.
inline Vector refine_mu_x(const Matrix& W, const Vector& alpha, const SignPlane& B, const BitMask& M,
                          const CalibStats& stats, std::size_t* guarded = nullptr) {
  detail::check_calib_inputs(W, M, stats);
  require_shape(B.same_shape(M) && alpha.size() == W.rows(), "alpha/sign shapes differ from weights");
  Vector mu = Vector::Zero(W.rows());
  for (Eigen::Index r = 0; r < W.rows(); ++r) {
    const auto idx = detail::masked_columns(M, static_cast<std::size_t>(r));
    if (idx.empty()) continue;
    double num = 0.0;
    double den = 0.0;
    for (auto a : idx) {
      for (auto b : idx) {
        const double s = stats.S(a, b);
        num += s * (W(r, b) - alpha(r) * B.sign(r, b));
        den += s;
      }
    }
    if (detail::degenerate(den, detail::diag_mass(stats.S, idx))) {
      if (guarded) ++*guarded;
      continue;
    }
    mu(r) = num / den;
  }
  return mu;
}

/// Unmasked form; throws DegenerateCalibration when 1^T S 1 = 0.
inline Vector refine_mu_x(const Matrix& W, const Vector& alpha, const SignPlane& B, const CalibStats& stats) {
  if (!(stats.S.sum() > 0.0)) throw DegenerateCalibration("1^T S 1 is zero");
  const auto M = BitMask::full(static_cast<std::size_t>(W.rows()), static_cast<std::size_t>(W.cols()));
  return refine_mu_x(W, alpha, B, M, stats);
}

/// Per-row scale minimizing the masked calibration error for fixed mu, B:
/// alpha_i = (B*m)^T S (m * (W_i - mu_i)) / ((B*m)^T S (B*m)).
/// Zero denominators give 0 and bump *guarded.
inline Vector refine_alpha_x(const Matrix& W, const Vector& mu, const SignPlane& B, const BitMask& M,
                             const CalibStats& stats, std::size_t* guarded = nullptr) {
  detail::check_calib_inputs(W, M, stats);
  require_shape(B.same_shape(M) && mu.size() == W.rows(), "mu/sign shapes differ from weights");
  Vector alpha = Vector::Zero(W.rows());
  for (Eigen::Index r = 0; r < W.rows(); ++r) {
    const auto idx = detail::masked_columns(M, static_cast<std::size_t>(r));
    if (idx.empty()) continue;
    double num = 0.0;
    double den = 0.0;
    for (auto a : idx) {
      const double ba = B.sign(r, a);
      for (auto b : idx) {
        const double s = stats.S(a, b) * ba;
        num += s * (W(r, b) - mu(r));
        den += s * B.sign(r, b);
      }
    }
    if (detail::degenerate(den, detail::diag_mass(stats.S, idx))) {
      if (guarded) ++*guarded;
      continue;
    }
    alpha(r) = num / den;
  }
  return alpha;
}

inline Vector refine_alpha_x(const Matrix& W, const Vector& mu, const SignPlane& B, const CalibStats& stats,
                             std::size_t* guarded = nullptr) {
  const auto M = BitMask::full(static_cast<std::size_t>(W.rows()), static_cast<std::size_t>(W.cols()));
  return refine_alpha_x(W, mu, B, M, stats, guarded);
}

/// Masked calibration error sum_i r_i^T S r_i, r_i = m_i * (W_i - W_hat_i).
template <typename Quant>
double quant_error_l2(const Matrix& W, const Quant& Q, const BitMask& M, const CalibStats& stats) {
  require_mask_shape(W, M);
  Matrix R = Matrix::Zero(W.rows(), W.cols());
  for (Eigen::Index r = 0; r < W.rows(); ++r)
    for (Eigen::Index c = 0; c < W.cols(); ++c)
      if (M.get(r, c)) R(r, c) = W(r, c) - Q.at(r, c);
  return l2_error(R, stats);
}

namespace detail {

// Per-row coordinate descent on the masked calibration error with all signs
// fixed. Basis vectors over the row's masked columns are [1, b_1..b_p, w];
// their S-Gram matrix makes every update and error evaluation O(p^2).
struct RowGram {
  Matrix G;  // (p + 2) x (p + 2)
  double diag_mass = 0.0;
  bool empty = true;
};

template <std::size_t Planes>
RowGram row_gram(const Matrix& W, const std::array<const SignPlane*, Planes>& planes, const BitMask& M,
                 const CalibStats& stats, std::size_t r) {
  RowGram g;
  const auto idx = masked_columns(M, r);
  constexpr auto k = static_cast<Eigen::Index>(Planes + 2);
  g.G = Matrix::Zero(k, k);
  if (idx.empty()) return g;
  g.empty = false;
  g.diag_mass = diag_mass(stats.S, idx);
  const auto len = static_cast<Eigen::Index>(idx.size());
  Matrix V(len, k);
  for (Eigen::Index a = 0; a < len; ++a) {
    V(a, 0) = 1.0;
    for (std::size_t p = 0; p < Planes; ++p)
      V(a, static_cast<Eigen::Index>(p) + 1) = planes[p]->sign(r, static_cast<std::size_t>(idx[a]));
    V(a, k - 1) = W(static_cast<Eigen::Index>(r), idx[a]);
  }
  const Matrix SV = gather(stats.S, idx) * V;
  g.G.noalias() = V.transpose() * SV;
  return g;
}

// Error for coefficients (mu, alpha_1..alpha_p): c^T G c with c = [-mu, -alpha, 1].
inline double gram_error(const Matrix& G, double mu, std::span<const double> alphas) {
  const auto k = G.rows();
  Vector c(k);
  c(0) = -mu;
  for (std::size_t p = 0; p < alphas.size(); ++p) c(static_cast<Eigen::Index>(p) + 1) = -alphas[p];
  c(k - 1) = 1.0;
  return std::max(0.0, c.dot(G * c));
}

// Exact minimizer of coordinate j in {0 = mu, 1.. = alpha_p} with the others fixed.
inline bool gram_update(const Matrix& G, double diag_mass, std::vector<double>& coef, Eigen::Index j) {
  const auto k = G.rows();
  const double den = G(j, j);
  if (degenerate(den, diag_mass)) return false;
  double num = G(j, k - 1);
  for (Eigen::Index i = 0; i + 1 < k; ++i)
    if (i != j) num -= coef[static_cast<std::size_t>(i)] * G(j, i);
  coef[static_cast<std::size_t>(j)] = num / den;
  return true;
}

}  // namespace detail

/// Calibration-aware first-order refinement: binary_first_order init, then
/// per iteration refine_mu_x followed by refine_alpha_x. B stays fixed; the
/// trace records the masked calibration error.
inline ArbResult<FirstOrderQuant> arbx_first_order(const Matrix& W, const BitMask& M, const CalibStats& stats,
                                                    const ArbOptions& opt) {
  if (opt.iterations < 0) throw ValidationError("iteration count must be >= 0");
  detail::check_calib_inputs(W, M, stats);
  ArbResult<FirstOrderQuant> out{binary_first_order(W, M), {}};
  auto& q = out.quant;
  const auto n = static_cast<std::size_t>(W.rows());
  std::vector<detail::RowGram> grams(n);
  std::array<const SignPlane*, 1> planes{&q.plane};
  for (std::size_t r = 0; r < n; ++r) grams[r] = detail::row_gram<1>(W, planes, M, stats, r);

  auto errors = [&] {
    Vector e = Vector::Zero(W.rows());
    for (std::size_t r = 0; r < n; ++r) {
      if (grams[r].empty) continue;
      const double a = q.params.alpha(r);
      e(r) = detail::gram_error(grams[r].G, q.params.mu(r), std::span<const double>(&a, 1));
    }
    return e;
  };
  {
    Vector e = errors();
    detail::push_step(out.trace, opt, q.params.mu, q.params.alpha, {}, e, e);
  }
  std::size_t guarded = 0;
  for (int it = 0; it < opt.iterations; ++it) {
    for (std::size_t r = 0; r < n; ++r) {
      if (grams[r].empty) continue;
      std::vector<double> coef{q.params.mu(r), q.params.alpha(r)};
      if (!detail::gram_update(grams[r].G, grams[r].diag_mass, coef, 0)) ++guarded;
      if (!detail::gram_update(grams[r].G, grams[r].diag_mass, coef, 1)) {
        coef[1] = 0.0;
        ++guarded;
      }
      q.params.mu(r) = coef[0];
      q.params.alpha(r) = coef[1];
    }
    Vector e = errors();
    detail::push_step(out.trace, opt, q.params.mu, q.params.alpha, {}, e, e);
    if (opt.early_exit && detail::converged(out.trace)) break;
  }
  out.trace.guarded_updates = guarded;
  return out;
}

inline ArbResult<FirstOrderQuant> arbx_first_order(const Matrix& W, const BitMask& M, const CalibStats& stats,
                                                    int iterations = kDefaultIterations) {
  ArbOptions opt;
  opt.iterations = iterations;
  return arbx_first_order(W, M, stats, opt);
}

/// Calibration-aware second-order refinement: binary_second_order init, then
/// per iteration the combined mean, alpha1, alpha2, each the exact minimizer
/// of the masked calibration error with both sign planes fixed.
inline ArbResult<SecondOrderQuant> arbx_second_order(const Matrix& W, const BitMask& M, const CalibStats& stats,
                                                      const ArbOptions& opt) {
  if (opt.iterations < 0) throw ValidationError("iteration count must be >= 0");
  detail::check_calib_inputs(W, M, stats);
  ArbResult<SecondOrderQuant> out{binary_second_order(W, M), {}};
  auto& q = out.quant;
  const auto n = static_cast<std::size_t>(W.rows());
  std::vector<detail::RowGram> grams(n);
  std::array<const SignPlane*, 2> planes{&q.plane1, &q.plane2};
  for (std::size_t r = 0; r < n; ++r) grams[r] = detail::row_gram<2>(W, planes, M, stats, r);

  auto errors = [&] {
    Vector e = Vector::Zero(W.rows());
    for (std::size_t r = 0; r < n; ++r) {
      if (grams[r].empty) continue;
      const double a[2] = {q.alpha1(r), q.alpha2(r)};
      e(r) = detail::gram_error(grams[r].G, q.mu(r), a);
    }
    return e;
  };
  {
    Vector e = errors();
    detail::push_step(out.trace, opt, q.mu, q.alpha1, q.alpha2, e, e);
  }
  std::size_t guarded = 0;
  for (int it = 0; it < opt.iterations; ++it) {
    for (std::size_t r = 0; r < n; ++r) {
      if (grams[r].empty) continue;
      std::vector<double> coef{q.mu(r), q.alpha1(r), q.alpha2(r)};
      for (Eigen::Index j = 0; j < 3; ++j) {
        if (!detail::gram_update(grams[r].G, grams[r].diag_mass, coef, j)) {
          if (j > 0) coef[static_cast<std::size_t>(j)] = 0.0;
          ++guarded;
        }
      }
      q.mu(r) = coef[0];
      q.alpha1(r) = coef[1];
      q.alpha2(r) = coef[2];
    }
    Vector e = errors();
    detail::push_step(out.trace, opt, q.mu, q.alpha1, q.alpha2, e, e);
    if (opt.early_exit && detail::converged(out.trace)) break;
  }
  out.trace.guarded_updates = guarded;
  return out;
}

inline ArbResult<SecondOrderQuant> arbx_second_order(const Matrix& W, const BitMask& M, const CalibStats& stats,
                                                      int iterations = kDefaultIterations) {
  ArbOptions opt;
  opt.iterations = iterations;
  return arbx_second_order(W, M, stats, opt);
}

// ---------------------------------------------------------------------------
// Cost of the two ways of evaluating the calibration error inside a
// refinement loop over a layer split into column blocks of width k:
//   direct:       ||R_blk X_blk^T||^2 from raw activations at every step
//   reformulated: S_blk = X_blk^T X_blk once per block, Tr(R_blk S_blk R_blk^T)
//                 at every step
// Only multiply-accumulates inside matrix products are counted.

struct OpCounter {
  std::uint64_t multiply_accumulate_count = 0;
  double wall_time = 0.0;
};

struct BenchConfig {
  std::size_t rows = 1024;       // n
  std::size_t cols = 1024;       // m
  std::size_t samples = 65536;   // B * L
  std::size_t iterations = 15;   // T
  std::size_t block = 128;       // k
  std::uint64_t seed = 0;
};

struct BenchResult {
  BenchConfig config;
  OpCounter direct;
  OpCounter reformulated;
  double eta_counted = 0.0;
  double eta_wall = 0.0;
  double eta_formula = 0.0;
  double max_rel_diff = 0.0;  // between the two paths' error values
};

/// 1 / (k * (1 / (n T) + 1 / (B L))).
inline double speedup_formula(const BenchConfig& c) {
  const double k = static_cast<double>(c.block);
  return 1.0 / (k * (1.0 / (static_cast<double>(c.rows) * static_cast<double>(c.iterations)) +
                     1.0 / static_cast<double>(c.samples)));
}

/// Operation counts of both paths without executing them.
inline std::pair<OpCounter, OpCounter> count_l2_paths(const BenchConfig& c) {
  if (c.rows < 1 || c.cols < 1 || c.samples < 1 || c.iterations < 1 || c.block < 1)
    throw ValidationError("bench counts must be >= 1");
  OpCounter direct;
  OpCounter reform;
  const std::uint64_t n = c.rows;
  const std::uint64_t N = c.samples;
  const std::uint64_t T = c.iterations;
  for (std::size_t b0 = 0; b0 < c.cols; b0 += c.block) {
    const std::uint64_t kb = std::min(c.block, c.cols - b0);
    direct.multiply_accumulate_count += T * n * N * kb;
    reform.multiply_accumulate_count += N * kb * kb + T * n * kb * kb;
  }
  return {direct, reform};
}

/// Executes both paths on synthetic data, timing each and counting the
/// multiply-accumulates actually issued.
inline BenchResult bench_l2_paths(const BenchConfig& c) {
  using FMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (c.rows < 1 || c.cols < 1 || c.samples < 1 || c.iterations < 1 || c.block < 1)
    throw ValidationError("bench counts must be >= 1");
  BenchResult res;
  res.config = c;
  const auto n = static_cast<Eigen::Index>(c.rows);
  const auto m = static_cast<Eigen::Index>(c.cols);
  const auto N = static_cast<Eigen::Index>(c.samples);

  std::mt19937_64 rng(c.seed);
  std::normal_distribution<float> gauss(0.0f, 1.0f);
  FMatrix X(N, m);
  for (Eigen::Index i = 0; i < X.size(); ++i) X.data()[i] = gauss(rng);
  FMatrix R0(n, m);
  for (Eigen::Index i = 0; i < R0.size(); ++i) R0.data()[i] = gauss(rng);
  // Residual at refinement step t; any deterministic sequence will do.
  auto residual_at = [&](std::size_t t, Eigen::Index b0, Eigen::Index kb) -> FMatrix {
    return R0.middleCols(b0, kb) * (1.0f + 0.01f * static_cast<float>(t));
  };

  constexpr Eigen::Index kChunk = 4096;
  std::vector<double> direct_vals;
  std::vector<double> reform_vals;
  using clock = std::chrono::steady_clock;

  auto t0 = clock::now();
  for (Eigen::Index b0 = 0; b0 < m; b0 += static_cast<Eigen::Index>(c.block)) {
    const Eigen::Index kb = std::min<Eigen::Index>(static_cast<Eigen::Index>(c.block), m - b0);
    for (std::size_t t = 0; t < c.iterations; ++t) {
      const FMatrix Rb = residual_at(t, b0, kb);
      double sum = 0.0;
      for (Eigen::Index s0 = 0; s0 < N; s0 += kChunk) {
        const Eigen::Index len = std::min(kChunk, N - s0);
        const FMatrix P = X.block(s0, b0, len, kb) * Rb.transpose();
        sum += static_cast<double>(P.squaredNorm());
        res.direct.multiply_accumulate_count +=
            static_cast<std::uint64_t>(len) * static_cast<std::uint64_t>(kb) * static_cast<std::uint64_t>(n);
      }
      direct_vals.push_back(sum);
    }
  }
  res.direct.wall_time = std::chrono::duration<double>(clock::now() - t0).count();

  t0 = clock::now();
  for (Eigen::Index b0 = 0; b0 < m; b0 += static_cast<Eigen::Index>(c.block)) {
    const Eigen::Index kb = std::min<Eigen::Index>(static_cast<Eigen::Index>(c.block), m - b0);
    const FMatrix Sb = X.middleCols(b0, kb).transpose() * X.middleCols(b0, kb);
    res.reformulated.multiply_accumulate_count +=
        static_cast<std::uint64_t>(N) * static_cast<std::uint64_t>(kb) * static_cast<std::uint64_t>(kb);
    for (std::size_t t = 0; t < c.iterations; ++t) {
      const FMatrix Rb = residual_at(t, b0, kb);
      const FMatrix RS = Rb * Sb;
      reform_vals.push_back(static_cast<double>(RS.cwiseProduct(Rb).sum()));
      res.reformulated.multiply_accumulate_count +=
          static_cast<std::uint64_t>(n) * static_cast<std::uint64_t>(kb) * static_cast<std::uint64_t>(kb);
    }
  }
  res.reformulated.wall_time = std::chrono::duration<double>(clock::now() - t0).count();

  for (std::size_t i = 0; i < direct_vals.size(); ++i) {
    const double d = std::abs(direct_vals[i] - reform_vals[i]) / std::max(1e-30, std::abs(direct_vals[i]));
    res.max_rel_diff = std::max(res.max_rel_diff, d);
  }
  res.eta_counted = static_cast<double>(res.direct.multiply_accumulate_count) /
                    static_cast<double>(res.reformulated.multiply_accumulate_count);
  res.eta_wall = res.direct.wall_time / std::max(1e-12, res.reformulated.wall_time);
  res.eta_formula = speedup_formula(c);
  return res;
}

}  // namespace arbq
