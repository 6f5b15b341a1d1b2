// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Row-column binarization W ~ diag(alpha_r) B diag(alpha_c), with no mean
// term. Signs are fixed at sign(W); the two scale vectors are refined
// alternately, each update an exact conditional least-squares minimizer.

#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "arbq/binarize.hpp"
#include "arbq/tensor.hpp"

namespace arbq {

struct RowColQuant {
  Vector alpha_r;
  Vector alpha_c;
  SignPlane plane;
  BitMask mask;
  bool has_second = false;
  Vector alpha_r2;
  Vector alpha_c2;
  SignPlane plane2;

  double at(std::size_t r, std::size_t c) const {
    double v = alpha_r(r) * alpha_c(c) * plane.sign(r, c);
    if (has_second) v += alpha_r2(r) * alpha_c2(c) * plane2.sign(r, c);
    return v;
  }

  Matrix reconstruct() const {
    Matrix out = Matrix::Zero(mask.rows(), mask.cols());
    for (std::size_t r = 0; r < mask.rows(); ++r)
      for (std::size_t c = 0; c < mask.cols(); ++c)
        if (mask.get(r, c)) out(r, c) = at(r, c);
    return out;
  }
};

/// alpha_r = masked row mean of |W|, alpha_c = masked column mean of
/// |W / alpha_r| over rows with non-zero alpha_r, B = sign(W).
inline RowColQuant rc_init(const Matrix& W, const BitMask& M) {
  check_weights(W);
  require_mask_shape(W, M);
  const auto n = static_cast<std::size_t>(W.rows());
  const auto m = static_cast<std::size_t>(W.cols());
  RowColQuant q;
  q.mask = M;
  q.alpha_r = Vector::Zero(W.rows());
  q.alpha_c = Vector::Zero(W.cols());
  q.plane = SignPlane(n, m);
  for (std::size_t r = 0; r < n; ++r) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t c = 0; c < m; ++c) {
      if (!M.get(r, c)) {
        q.plane.set(r, c, true);
        continue;
      }
      const double w = W(r, c);
      q.plane.set_sign(r, c, sign_of(w));
      sum += std::abs(w);
      ++count;
    }
    q.alpha_r(r) = count == 0 ? 0.0 : sum / static_cast<double>(count);
  }
  for (std::size_t c = 0; c < m; ++c) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t r = 0; r < n; ++r) {
      if (!M.get(r, c) || !(q.alpha_r(r) > kAlphaEpsilon)) continue;
      sum += std::abs(W(r, c)) / q.alpha_r(r);
      ++count;
    }
    q.alpha_c(c) = count == 0 ? 0.0 : sum / static_cast<double>(count);
  }
  return q;
}

namespace detail {

// Least-squares row scales of target ~ diag(a_r) (B diag(a_c)) on the mask.
inline Vector fit_row_scales(const Matrix& target, const Vector& alpha_c, const SignPlane& B, const BitMask& M,
                             std::size_t* guarded) {
  Vector out(target.rows());
  for (Eigen::Index r = 0; r < target.rows(); ++r) {
    double num = 0.0;
    double den = 0.0;
    for (Eigen::Index c = 0; c < target.cols(); ++c) {
      if (!M.get(r, c)) continue;
      const double v = alpha_c(c) * B.sign(r, c);
      num += target(r, c) * v;
      den += v * v;
    }
    if (den <= kAlphaEpsilon && guarded) ++*guarded;
    out(r) = num / (den + kAlphaEpsilon);
  }
  return out;
}

inline Vector fit_col_scales(const Matrix& target, const Vector& alpha_r, const SignPlane& B, const BitMask& M,
                             std::size_t* guarded) {
  Vector num = Vector::Zero(target.cols());
  Vector den = Vector::Zero(target.cols());
  for (Eigen::Index r = 0; r < target.rows(); ++r) {
    for (Eigen::Index c = 0; c < target.cols(); ++c) {
      if (!M.get(r, c)) continue;
      const double v = alpha_r(r) * B.sign(r, c);
      num(c) += target(r, c) * v;
      den(c) += v * v;
    }
  }
  Vector out(target.cols());
  for (Eigen::Index c = 0; c < target.cols(); ++c) {
    if (den(c) <= kAlphaEpsilon && guarded) ++*guarded;
    out(c) = num(c) / (den(c) + kAlphaEpsilon);
  }
  return out;
}

// target minus the given plane's reconstruction on the mask.
inline Matrix subtract_plane(const Matrix& target, const Vector& alpha_r, const Vector& alpha_c,
                             const SignPlane& B, const BitMask& M) {
  Matrix out = target;
  for (Eigen::Index r = 0; r < target.rows(); ++r)
    for (Eigen::Index c = 0; c < target.cols(); ++c)
      if (M.get(r, c)) out(r, c) -= alpha_r(r) * alpha_c(c) * B.sign(r, c);
  return out;
}

}  // namespace detail

/// Row scales for fixed column scales and signs (plane 1 of Q; the second
/// plane, if present, is subtracted from the target first).
inline Vector refine_alpha_r(const Matrix& W, const RowColQuant& Q, std::size_t* guarded = nullptr) {
  require_mask_shape(W, Q.mask);
  const Matrix target =
      Q.has_second ? detail::subtract_plane(W, Q.alpha_r2, Q.alpha_c2, Q.plane2, Q.mask) : W;
  return detail::fit_row_scales(target, Q.alpha_c, Q.plane, Q.mask, guarded);
}

inline Vector refine_alpha_c(const Matrix& W, const RowColQuant& Q, std::size_t* guarded = nullptr) {
  require_mask_shape(W, Q.mask);
  const Matrix target =
      Q.has_second ? detail::subtract_plane(W, Q.alpha_r2, Q.alpha_c2, Q.plane2, Q.mask) : W;
  return detail::fit_col_scales(target, Q.alpha_r, Q.plane, Q.mask, guarded);
}

namespace detail {

// Masked entries grouped by row, in row-major order.
struct MaskedEntries {
  std::vector<std::size_t> row_start;  // rows + 1 offsets
  std::vector<std::size_t> col;
  std::vector<double> w;
};

inline MaskedEntries masked_entries(const Matrix& W, const BitMask& M) {
  MaskedEntries e;
  e.row_start.reserve(M.rows() + 1);
  e.row_start.push_back(0);
  for (std::size_t r = 0; r < M.rows(); ++r) {
    for (std::size_t c = 0; c < M.cols(); ++c) {
      if (!M.get(r, c)) continue;
      e.col.push_back(c);
      e.w.push_back(W(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)));
    }
    e.row_start.push_back(e.col.size());
  }
  return e;
}

inline std::vector<double> entry_signs(const MaskedEntries& e, const SignPlane& B) {
  std::vector<double> s(e.col.size());
  for (std::size_t r = 0; r + 1 < e.row_start.size(); ++r)
    for (std::size_t i = e.row_start[r]; i < e.row_start[r + 1]; ++i) s[i] = B.sign(r, e.col[i]);
  return s;
}

// One plane's least-squares refit against per-entry targets: row scales
// first, then column scales. Same arithmetic as fit_row_scales followed by
// fit_col_scales.
inline void refit_plane(const MaskedEntries& e, const std::vector<double>& target, const std::vector<double>& s,
                        Vector& ar, Vector& ac, std::size_t& guarded) {
  const std::size_t n = e.row_start.size() - 1;
  for (std::size_t r = 0; r < n; ++r) {
    double num = 0.0;
    double den = 0.0;
    for (std::size_t i = e.row_start[r]; i < e.row_start[r + 1]; ++i) {
      const double v = ac(static_cast<Eigen::Index>(e.col[i])) * s[i];
      num += target[i] * v;
      den += v * v;
    }
    if (den <= kAlphaEpsilon) ++guarded;
    ar(static_cast<Eigen::Index>(r)) = num / (den + kAlphaEpsilon);
  }
  Vector num = Vector::Zero(ac.size());
  Vector den = Vector::Zero(ac.size());
  for (std::size_t r = 0; r < n; ++r) {
    const double a = ar(static_cast<Eigen::Index>(r));
    for (std::size_t i = e.row_start[r]; i < e.row_start[r + 1]; ++i) {
      const auto c = static_cast<Eigen::Index>(e.col[i]);
      const double v = a * s[i];
      num(c) += target[i] * v;
      den(c) += v * v;
    }
  }
  for (Eigen::Index c = 0; c < ac.size(); ++c) {
    if (den(c) <= kAlphaEpsilon) ++guarded;
    ac(c) = num(c) / (den(c) + kAlphaEpsilon);
  }
}

}  // namespace detail

/// rc_init, then per iteration alpha_r followed by alpha_c with B fixed.
inline ArbResult<RowColQuant> arbrc_first_order(const Matrix& W, const BitMask& M, const ArbOptions& opt) {
  if (opt.iterations < 0) throw ValidationError("iteration count must be >= 0");
  ArbResult<RowColQuant> out{rc_init(W, M), {}};
  auto& q = out.quant;
  const detail::MaskedEntries e = detail::masked_entries(W, M);
  const std::vector<double> s = detail::entry_signs(e, q.plane);
  const std::size_t n = e.row_start.size() - 1;
  auto errors = [&] {
    Vector err = Vector::Zero(W.rows());
    for (std::size_t r = 0; r < n; ++r) {
      double sum = 0.0;
      for (std::size_t i = e.row_start[r]; i < e.row_start[r + 1]; ++i) {
        const double d = e.w[i] - q.alpha_r(static_cast<Eigen::Index>(r)) *
                                      q.alpha_c(static_cast<Eigen::Index>(e.col[i])) * s[i];
        sum += d * d;
      }
      err(static_cast<Eigen::Index>(r)) = sum;
    }
    return err;
  };
  {
    Vector err = errors();
    detail::push_step(out.trace, opt, {}, q.alpha_r, {}, err, err);
  }
  std::size_t guarded = 0;
  for (int it = 0; it < opt.iterations; ++it) {
    detail::refit_plane(e, e.w, s, q.alpha_r, q.alpha_c, guarded);
    Vector err = errors();
    detail::push_step(out.trace, opt, {}, q.alpha_r, {}, err, err);
    if (opt.early_exit && detail::converged(out.trace)) break;
  }
  out.trace.guarded_updates = guarded;
  return out;
}

inline ArbResult<RowColQuant> arbrc_first_order(const Matrix& W, const BitMask& M,
                                                 int iterations = kDefaultIterations) {
  ArbOptions opt;
  opt.iterations = iterations;
  return arbrc_first_order(W, M, opt);
}

/// Two row-column planes: plane 2 starts as rc_init of the plane-1 residual;
/// each iteration refits (alpha_r1, alpha_c1, alpha_r2, alpha_c2) in turn,
/// each against the residual of the other plane.
inline ArbResult<RowColQuant> arbrc_second_order(const Matrix& W, const BitMask& M, const ArbOptions& opt) {
  if (opt.iterations < 0) throw ValidationError("iteration count must be >= 0");
  ArbResult<RowColQuant> out{rc_init(W, M), {}};
  auto& q = out.quant;
  {
    RowColQuant second = rc_init(residual(W, q), M);
    q.has_second = true;
    q.alpha_r2 = std::move(second.alpha_r);
    q.alpha_c2 = std::move(second.alpha_c);
    q.plane2 = std::move(second.plane);
  }
  const detail::MaskedEntries e = detail::masked_entries(W, M);
  const std::vector<double> s1 = detail::entry_signs(e, q.plane);
  const std::vector<double> s2 = detail::entry_signs(e, q.plane2);
  const std::size_t n = e.row_start.size() - 1;
  auto plane_value = [&](const Vector& ar, const Vector& ac, const std::vector<double>& s, std::size_t r,
                         std::size_t i) {
    return ar(static_cast<Eigen::Index>(r)) * ac(static_cast<Eigen::Index>(e.col[i])) * s[i];
  };
  auto errors = [&] {
    Vector err = Vector::Zero(W.rows());
    for (std::size_t r = 0; r < n; ++r) {
      double sum = 0.0;
      for (std::size_t i = e.row_start[r]; i < e.row_start[r + 1]; ++i) {
        const double d =
            e.w[i] - (plane_value(q.alpha_r, q.alpha_c, s1, r, i) + plane_value(q.alpha_r2, q.alpha_c2, s2, r, i));
        sum += d * d;
      }
      err(static_cast<Eigen::Index>(r)) = sum;
    }
    return err;
  };
  {
    Vector err = errors();
    detail::push_step(out.trace, opt, {}, q.alpha_r, q.alpha_r2, err, err);
  }
  std::size_t guarded = 0;
  std::vector<double> target(e.w.size());
  for (int it = 0; it < opt.iterations; ++it) {
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = e.row_start[r]; i < e.row_start[r + 1]; ++i)
        target[i] = e.w[i] - plane_value(q.alpha_r2, q.alpha_c2, s2, r, i);
    detail::refit_plane(e, target, s1, q.alpha_r, q.alpha_c, guarded);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = e.row_start[r]; i < e.row_start[r + 1]; ++i)
        target[i] = e.w[i] - plane_value(q.alpha_r, q.alpha_c, s1, r, i);
    detail::refit_plane(e, target, s2, q.alpha_r2, q.alpha_c2, guarded);
    Vector err = errors();
    detail::push_step(out.trace, opt, {}, q.alpha_r, q.alpha_r2, err, err);
    if (opt.early_exit && detail::converged(out.trace)) break;
  }
  out.trace.guarded_updates = guarded;
  return out;
}

inline ArbResult<RowColQuant> arbrc_second_order(const Matrix& W, const BitMask& M,
                                                  int iterations = kDefaultIterations) {
  ArbOptions opt;
  opt.iterations = iterations;
  return arbrc_second_order(W, M, opt);
}

/// Rescales each plane so the mean |alpha_c| over columns with any masked
/// entry is 1, folding the factor into alpha_r. Reconstruction is unchanged
/// up to rounding.
inline void gauge_fix(RowColQuant& q) {
  auto fix = [&](Vector& ar, Vector& ac) {
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t c = 0; c < q.mask.cols(); ++c) {
      bool any = false;
      for (std::size_t r = 0; r < q.mask.rows() && !any; ++r) any = q.mask.get(r, c);
      if (!any) continue;
      sum += std::abs(ac(static_cast<Eigen::Index>(c)));
      ++count;
    }
    if (count == 0 || !(sum > 0.0)) return;
    const double s = sum / static_cast<double>(count);
    ac /= s;
    ar *= s;
  };
  fix(q.alpha_r, q.alpha_c);
  if (q.has_second) fix(q.alpha_r2, q.alpha_c2);
}

}  // namespace arbq
