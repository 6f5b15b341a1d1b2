// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Mean-shifted binarization W ~ alpha * B + mu and its alternating
// refinement: closed-form updates of mu, alpha and B applied in that order,
// each one a conditional minimizer of the squared reconstruction error over
// the masked entries. The second-order form adds a residual plane,
// W ~ alpha1 * B1 + alpha2 * B2 + mu.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "arbq/tensor.hpp"

namespace arbq {

/// Guard for empty-mask denominators in the alpha update.
inline constexpr double kAlphaEpsilon = 1e-12;
inline constexpr int kDefaultIterations = 15;

struct FirstOrderQuant {
  RowParams params;
  SignPlane plane;
  BitMask mask;

  double at(std::size_t r, std::size_t c) const {
    return params.alpha(r) * plane.sign(r, c) + params.mu(r);
  }

  /// Masked reconstruction; entries off the mask are 0.
  Matrix reconstruct() const {
    Matrix out = Matrix::Zero(mask.rows(), mask.cols());
    for (std::size_t r = 0; r < mask.rows(); ++r)
      for (std::size_t c = 0; c < mask.cols(); ++c)
        if (mask.get(r, c)) out(r, c) = at(r, c);
    return out;
  }
};

struct SecondOrderQuant {
  Vector alpha1;
  Vector alpha2;
  Vector mu;
  SignPlane plane1;
  SignPlane plane2;
  BitMask mask;

  double at(std::size_t r, std::size_t c) const {
    return alpha1(r) * plane1.sign(r, c) + alpha2(r) * plane2.sign(r, c) + mu(r);
  }

  Matrix reconstruct() const {
    Matrix out = Matrix::Zero(mask.rows(), mask.cols());
    for (std::size_t r = 0; r < mask.rows(); ++r)
      for (std::size_t c = 0; c < mask.cols(); ++c)
        if (mask.get(r, c)) out(r, c) = at(r, c);
    return out;
  }
};

/// One snapshot of the refinement loop. Step 0 is the initialization.
struct TraceStep {
  Vector mu;      // empty for mean-free quantizers
  Vector alpha;   // plane 1 (row scale for row-column quantizers)
  Vector alpha2;  // plane 2, empty for first order
  Vector row_error;
  // Objective right after the continuous-parameter updates of this step,
  // before any sign refresh. Equal to row_error when signs are not refreshed.
  Vector row_error_refit;
  double error = 0.0;
  double error_refit = 0.0;
};

struct ArbTrace {
  std::vector<TraceStep> steps;
  // Updates skipped because their denominator vanished.
  std::size_t guarded_updates = 0;

  std::size_t iterations() const { return steps.empty() ? 0 : steps.size() - 1; }
  double initial() const { return steps.front().error; }
  double final() const { return steps.back().error; }

  std::vector<double> errors() const {
    std::vector<double> out;
    out.reserve(steps.size());
    for (const auto& s : steps) out.push_back(s.error);
    return out;
  }

  /// True when every step's error is at most the previous one plus
  /// rel_tol * (initial + 1).
  bool non_increasing(double rel_tol = 1e-9) const {
    if (steps.empty()) return true;
    const double slack = rel_tol * (initial() + 1.0);
    for (std::size_t i = 1; i < steps.size(); ++i)
      if (steps[i].error > steps[i - 1].error + slack) return false;
    return true;
  }
};

template <typename Quant>
struct ArbResult {
  Quant quant;
  ArbTrace trace;
};

struct ArbOptions {
  int iterations = kDefaultIterations;
  // Stop once an iteration improves the objective by less than 1e-12 relative.
  bool early_exit = false;
  // Keep per-row vectors in every trace step (only totals otherwise).
  bool record_rows = true;
};

namespace detail {

inline void check_quant_inputs(const Matrix& W, const BitMask& M) {
  check_weights(W);
  require_mask_shape(W, M);
}

template <typename Quant>
Vector row_errors(const Matrix& W, const Quant& Q, const BitMask& M) {
  Vector out = Vector::Zero(W.rows());
  for (Eigen::Index r = 0; r < W.rows(); ++r) {
    double sum = 0.0;
    for (Eigen::Index c = 0; c < W.cols(); ++c) {
      if (!M.get(r, c)) continue;
      const double d = W(r, c) - Q.at(r, c);
      sum += d * d;
    }
    out(r) = sum;
  }
  return out;
}

inline void push_step(ArbTrace& trace, const ArbOptions& opt, Vector mu, Vector alpha, Vector alpha2,
                      Vector row_error, Vector row_error_refit) {
  TraceStep s;
  s.error = row_error.sum();
  s.error_refit = row_error_refit.sum();
  if (opt.record_rows) {
    s.mu = std::move(mu);
    s.alpha = std::move(alpha);
    s.alpha2 = std::move(alpha2);
    s.row_error = std::move(row_error);
    s.row_error_refit = std::move(row_error_refit);
  }
  trace.steps.push_back(std::move(s));
}

inline bool converged(const ArbTrace& trace) {
  const std::size_t n = trace.steps.size();
  if (n < 2) return false;
  const double prev = trace.steps[n - 2].error;
  const double cur = trace.steps[n - 1].error;
  return prev - cur < 1e-12 * prev;
}

}  // namespace detail

/// Closed-form first-order binarization over the masked entries:
/// mu = masked mean, alpha = masked mean |W - mu|, B = sign(W - mu).
/// Off-mask signs are +1. Rows with an empty mask get alpha = mu = 0.
inline FirstOrderQuant binary_first_order(const Matrix& W, const BitMask& M) {
  detail::check_quant_inputs(W, M);
  const auto n = static_cast<std::size_t>(W.rows());
  const auto m = static_cast<std::size_t>(W.cols());
  FirstOrderQuant q{{Vector::Zero(W.rows()), masked_row_mean(W, M)}, SignPlane(n, m), M};
  for (std::size_t r = 0; r < n; ++r) {
    double abs_sum = 0.0;
    std::size_t count = 0;
    const double mu = q.params.mu(r);
    for (std::size_t c = 0; c < m; ++c) {
      if (!M.get(r, c)) {
        q.plane.set(r, c, true);
        continue;
      }
      const double centered = W(r, c) - mu;
      abs_sum += std::abs(centered);
      q.plane.set_sign(r, c, sign_of(centered));
      ++count;
    }
    q.params.alpha(r) = count == 0 ? 0.0 : abs_sum / static_cast<double>(count);
  }
  return q;
}

/// W - reconstruct(Q) on masked entries, 0 elsewhere.
template <typename Quant>
Matrix residual(const Matrix& W, const Quant& Q) {
  require_mask_shape(W, Q.mask);
  Matrix R = Matrix::Zero(W.rows(), W.cols());
  for (Eigen::Index r = 0; r < W.rows(); ++r)
    for (Eigen::Index c = 0; c < W.cols(); ++c)
      if (Q.mask.get(r, c)) R(r, c) = W(r, c) - Q.at(r, c);
  return R;
}

/// Sum of squared masked reconstruction errors.
template <typename Quant>
double quant_error_l1(const Matrix& W, const Quant& Q, const BitMask& M) {
  require_mask_shape(W, M);
  require_shape(M.same_shape(Q.mask), "quant and mask shapes differ");
  return detail::row_errors(W, Q, M).sum();
}

/// mu + masked row mean of the residual.
inline Vector refine_mu(const Vector& mu, const Matrix& R, const BitMask& M) {
  require_shape(mu.size() == R.rows(), "mu length differs from residual rows");
  return mu + masked_row_mean(R, M);
}

template <typename Quant>
Vector refine_mu(const Quant& Q, const Matrix& R, const BitMask& M) {
  return refine_mu(Q.params.mu, R, M);
}

/// Per-row least-squares scale for fixed signs and mean:
/// sum(B*M*(W - mu)) / (sum((B*M)^2) + eps).
inline Vector refine_alpha(const SignPlane& B, const Matrix& W, const BitMask& M, const Vector& mu) {
  require_mask_shape(W, M);
  require_shape(B.same_shape(M), "sign plane and mask shapes differ");
  require_shape(mu.size() == W.rows(), "mu length differs from rows");
  Vector alpha(W.rows());
  for (Eigen::Index r = 0; r < W.rows(); ++r) {
    double num = 0.0;
    double den = 0.0;
    for (Eigen::Index c = 0; c < W.cols(); ++c) {
      if (!M.get(r, c)) continue;
      num += B.sign(r, c) * (W(r, c) - mu(r));
      den += 1.0;
    }
    alpha(r) = num / (den + kAlphaEpsilon);
  }
  return alpha;
}

namespace detail {

// Masked entries of row r, in column order.
inline void gather_row(const Matrix& W, const BitMask& M, std::size_t r, std::vector<double>& vals,
                       std::vector<std::size_t>& cols) {
  vals.clear();
  cols.clear();
  for (std::size_t c = 0; c < M.cols(); ++c) {
    if (!M.get(r, c)) continue;
    vals.push_back(W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    cols.push_back(c);
  }
}

// Per-step, per-row history of a row-separable refinement.
struct RowHistory {
  Matrix mu, alpha, alpha2, error, refit;  // (T + 1) x n

  RowHistory(int T, Eigen::Index n, bool second)
      : mu(Matrix::Zero(T + 1, n)),
        alpha(Matrix::Zero(T + 1, n)),
        alpha2(second ? Matrix::Zero(T + 1, n) : Matrix()),
        error(Matrix::Zero(T + 1, n)),
        refit(Matrix::Zero(T + 1, n)) {}

  // Last step to keep: the first converged step under early exit, else T.
  int last_step(const ArbOptions& opt) const {
    const int T = static_cast<int>(error.rows()) - 1;
    if (!opt.early_exit) return T;
    for (int t = 1; t <= T; ++t) {
      const double prev = error.row(t - 1).sum();
      const double cur = error.row(t).sum();
      if (prev - cur < 1e-12 * prev) return t;
    }
    return T;
  }

  void emit(ArbTrace& trace, const ArbOptions& opt, int last) const {
    const bool second = alpha2.size() > 0;
    for (int t = 0; t <= last; ++t)
      push_step(trace, opt, mu.row(t).transpose(), alpha.row(t).transpose(),
                second ? Vector(alpha2.row(t).transpose()) : Vector(), error.row(t).transpose(),
                refit.row(t).transpose());
  }
};

}  // namespace detail

/// First-order alternating refinement. Each iteration: mu from the residual
/// mean, alpha from the least-squares ratio, then B = sign(W - mu).
/// Rows are independent, so each row runs all its iterations at once on its
/// masked entries.
inline ArbResult<FirstOrderQuant> arb_first_order(const Matrix& W, const BitMask& M, const ArbOptions& opt) {
  if (opt.iterations < 0) throw ValidationError("iteration count must be >= 0");
  ArbResult<FirstOrderQuant> out{binary_first_order(W, M), {}};
  auto& q = out.quant;
  const int T = opt.iterations;
  const auto n = static_cast<std::size_t>(W.rows());
  detail::RowHistory h(T, W.rows(), false);
  std::vector<double> v;
  std::vector<double> s;
  std::vector<std::size_t> cols;
  for (std::size_t r = 0; r < n; ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    detail::gather_row(W, M, r, v, cols);
    const std::size_t count = v.size();
    double mu = q.params.mu(ri);
    double alpha = q.params.alpha(ri);
    s.resize(count);
    for (std::size_t j = 0; j < count; ++j) s[j] = q.plane.sign(r, cols[j]);
    auto sq_error = [&] {
      double e = 0.0;
      for (std::size_t j = 0; j < count; ++j) {
        const double d = v[j] - (alpha * s[j] + mu);
        e += d * d;
      }
      return e;
    };
    h.mu(0, ri) = mu;
    h.alpha(0, ri) = alpha;
    h.error(0, ri) = h.refit(0, ri) = sq_error();
    if (count == 0) continue;
    for (int t = 1; t <= T; ++t) {
      double shift = 0.0;
      for (std::size_t j = 0; j < count; ++j) shift += v[j] - (alpha * s[j] + mu);
      mu = mu + shift / static_cast<double>(count);
      double num = 0.0;
      for (std::size_t j = 0; j < count; ++j) num += s[j] * (v[j] - mu);
      alpha = num / (static_cast<double>(count) + kAlphaEpsilon);
      h.refit(t, ri) = sq_error();
      for (std::size_t j = 0; j < count; ++j) s[j] = sign_of(v[j] - mu);
      h.error(t, ri) = sq_error();
      h.mu(t, ri) = mu;
      h.alpha(t, ri) = alpha;
    }
  }
  const int last = h.last_step(opt);
  h.emit(out.trace, opt, last);
  if (last > 0) {
    q.params.mu = h.mu.row(last).transpose();
    q.params.alpha = h.alpha.row(last).transpose();
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < static_cast<std::size_t>(W.cols()); ++c)
        if (M.get(r, c))
          q.plane.set_sign(r, c, sign_of(W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) -
                                         q.params.mu(static_cast<Eigen::Index>(r))));
  }
  return out;
}

inline ArbResult<FirstOrderQuant> arb_first_order(const Matrix& W, const BitMask& M,
                                                   int iterations = kDefaultIterations) {
  ArbOptions opt;
  opt.iterations = iterations;
  return arb_first_order(W, M, opt);
}

/// Residual binarization: plane 1 binarizes W, plane 2 binarizes the
/// masked residual of plane 1; the two means are stored combined.
inline SecondOrderQuant binary_second_order(const Matrix& W, const BitMask& M) {
  FirstOrderQuant first = binary_first_order(W, M);
  FirstOrderQuant second = binary_first_order(residual(W, first), M);
  return SecondOrderQuant{first.params.alpha,
                          second.params.alpha,
                          first.params.mu + second.params.mu,
                          std::move(first.plane),
                          std::move(second.plane),
                          M};
}

/// Sequential plane-scale updates for fixed signs and mean: alpha1 against
/// W - mu - alpha2*B2, then alpha2 against W - mu - alpha1_new*B1.
inline std::pair<Vector, Vector> refine_alphas_second(const SecondOrderQuant& Q, const Matrix& W,
                                                      const BitMask& M, const Vector& mu) {
  require_mask_shape(W, M);
  require_shape(Q.mask.same_shape(M), "quant and mask shapes differ");
  require_shape(mu.size() == W.rows(), "mu length differs from rows");
  Vector a1(W.rows());
  Vector a2(W.rows());
  for (Eigen::Index r = 0; r < W.rows(); ++r) {
    double num1 = 0.0;
    double count = 0.0;
    for (Eigen::Index c = 0; c < W.cols(); ++c) {
      if (!M.get(r, c)) continue;
      num1 += Q.plane1.sign(r, c) * (W(r, c) - mu(r) - Q.alpha2(r) * Q.plane2.sign(r, c));
      count += 1.0;
    }
    a1(r) = count == 0.0 ? 0.0 : num1 / count;
    double num2 = 0.0;
    for (Eigen::Index c = 0; c < W.cols(); ++c) {
      if (!M.get(r, c)) continue;
      num2 += Q.plane2.sign(r, c) * (W(r, c) - mu(r) - a1(r) * Q.plane1.sign(r, c));
    }
    a2(r) = count == 0.0 ? 0.0 : num2 / count;
  }
  return {a1, a2};
}

struct SignPair {
  double b1;
  double b2;
};

namespace detail {

struct PairCandidate {
  double value;
  double b1;
  double b2;
};

// The four values +/-alpha1 +/-alpha2 in ascending (value, b1, b2) order.
inline std::array<PairCandidate, 4> sorted_pairs(double alpha1, double alpha2) {
  std::array<PairCandidate, 4> cand{{{-alpha1 - alpha2, -1.0, -1.0},
                                     {-alpha1 + alpha2, -1.0, 1.0},
                                     {alpha1 - alpha2, 1.0, -1.0},
                                     {alpha1 + alpha2, 1.0, 1.0}}};
  std::sort(cand.begin(), cand.end(), [](const PairCandidate& a, const PairCandidate& b) {
    if (a.value != b.value) return a.value < b.value;
    if (a.b1 != b.b1) return a.b1 < b.b1;
    return a.b2 < b.b2;
  });
  return cand;
}

inline const PairCandidate& nearest_pair(const std::array<PairCandidate, 4>& cand, double target) {
  // First candidate strictly above the target.
  const auto* hi = std::upper_bound(cand.begin(), cand.end(), target,
                                    [](double t, const PairCandidate& c) { return t < c.value; });
  const PairCandidate* pick;
  if (hi == cand.begin()) {
    pick = hi;
  } else if (hi == cand.end()) {
    pick = hi - 1;
  } else {
    const PairCandidate* lo = hi - 1;
    pick = (hi->value - target) <= (target - lo->value) ? hi : lo;
  }
  // Among candidates sharing the winning value, take the last one.
  while (pick + 1 != cand.end() && (pick + 1)->value == pick->value) ++pick;
  return *pick;
}

}  // namespace detail

/// Nearest of the four values +/-alpha1 +/-alpha2 to target, found by binary
/// search over the sorted candidates. Equidistant candidates resolve to the
/// larger value; coincident values resolve to the larger (b1, b2).
inline SignPair select_sign_pair(double target, double alpha1, double alpha2) {
  const auto cand = detail::sorted_pairs(alpha1, alpha2);
  const auto& p = detail::nearest_pair(cand, target);
  return {p.b1, p.b2};
}

/// Joint sign refresh for the two planes on masked entries.
inline std::pair<SignPlane, SignPlane> refine_sign_pair(const Matrix& W, const BitMask& M, const Vector& mu,
                                                        const Vector& alpha1, const Vector& alpha2) {
  require_mask_shape(W, M);
  if (!alpha1.allFinite() || !alpha2.allFinite()) throw ValidationError("non-finite plane scale");
  const auto n = static_cast<std::size_t>(W.rows());
  const auto m = static_cast<std::size_t>(W.cols());
  SignPlane b1(n, m);
  SignPlane b2(n, m);
  for (std::size_t r = 0; r < n; ++r) {
    const auto cand = detail::sorted_pairs(alpha1(r), alpha2(r));
    for (std::size_t c = 0; c < m; ++c) {
      if (!M.get(r, c)) {
        b1.set(r, c, true);
        b2.set(r, c, true);
        continue;
      }
      const auto& p = detail::nearest_pair(cand, W(r, c) - mu(r));
      b1.set_sign(r, c, p.b1);
      b2.set_sign(r, c, p.b2);
    }
  }
  return {std::move(b1), std::move(b2)};
}

/// Second-order alternating refinement: combined mean from the full
/// two-plane residual, sequential plane scales, then the joint sign refresh.
inline ArbResult<SecondOrderQuant> arb_second_order(const Matrix& W, const BitMask& M, const ArbOptions& opt) {
  if (opt.iterations < 0) throw ValidationError("iteration count must be >= 0");
  ArbResult<SecondOrderQuant> out{binary_second_order(W, M), {}};
  auto& q = out.quant;
  const int T = opt.iterations;
  const auto n = static_cast<std::size_t>(W.rows());
  detail::RowHistory h(T, W.rows(), true);
  std::vector<double> v;
  std::vector<double> s1;
  std::vector<double> s2;
  std::vector<std::size_t> cols;
  for (std::size_t r = 0; r < n; ++r) {
    const auto ri = static_cast<Eigen::Index>(r);
    detail::gather_row(W, M, r, v, cols);
    const std::size_t count = v.size();
    double mu = q.mu(ri);
    double a1 = q.alpha1(ri);
    double a2 = q.alpha2(ri);
    s1.resize(count);
    s2.resize(count);
    for (std::size_t j = 0; j < count; ++j) {
      s1[j] = q.plane1.sign(r, cols[j]);
      s2[j] = q.plane2.sign(r, cols[j]);
    }
    auto sq_error = [&] {
      double e = 0.0;
      for (std::size_t j = 0; j < count; ++j) {
        const double d = v[j] - (a1 * s1[j] + a2 * s2[j] + mu);
        e += d * d;
      }
      return e;
    };
    h.mu(0, ri) = mu;
    h.alpha(0, ri) = a1;
    h.alpha2(0, ri) = a2;
    h.error(0, ri) = h.refit(0, ri) = sq_error();
    if (count == 0) continue;
    const double cnt = static_cast<double>(count);
    for (int t = 1; t <= T; ++t) {
      double shift = 0.0;
      for (std::size_t j = 0; j < count; ++j) shift += v[j] - (a1 * s1[j] + a2 * s2[j] + mu);
      mu = mu + shift / cnt;
      double num1 = 0.0;
      for (std::size_t j = 0; j < count; ++j) num1 += s1[j] * (v[j] - mu - a2 * s2[j]);
      a1 = num1 / cnt;
      double num2 = 0.0;
      for (std::size_t j = 0; j < count; ++j) num2 += s2[j] * (v[j] - mu - a1 * s1[j]);
      a2 = num2 / cnt;
      h.refit(t, ri) = sq_error();
      const auto cand = detail::sorted_pairs(a1, a2);
      for (std::size_t j = 0; j < count; ++j) {
        const auto& p = detail::nearest_pair(cand, v[j] - mu);
        s1[j] = p.b1;
        s2[j] = p.b2;
      }
      h.error(t, ri) = sq_error();
      h.mu(t, ri) = mu;
      h.alpha(t, ri) = a1;
      h.alpha2(t, ri) = a2;
    }
  }
  const int last = h.last_step(opt);
  h.emit(out.trace, opt, last);
  if (last > 0) {
    q.mu = h.mu.row(last).transpose();
    q.alpha1 = h.alpha.row(last).transpose();
    q.alpha2 = h.alpha2.row(last).transpose();
    auto [b1, b2] = refine_sign_pair(W, M, q.mu, q.alpha1, q.alpha2);
    q.plane1 = std::move(b1);
    q.plane2 = std::move(b2);
  }
  return out;
}

inline ArbResult<SecondOrderQuant> arb_second_order(const Matrix& W, const BitMask& M,
                                                     int iterations = kDefaultIterations) {
  ArbOptions opt;
  opt.iterations = iterations;
  return arb_second_order(W, M, opt);
}

}  // namespace arbq
