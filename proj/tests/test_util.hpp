// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "arbq/tensor.hpp"

namespace arbq::testing {

inline Matrix gaussian(std::size_t n, std::size_t m, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Matrix W(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = g(rng);
  return W;
}

// Student-t with 3 degrees of freedom.
inline Matrix heavy_tailed(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  std::student_t_distribution<double> t(3.0);
  Matrix W(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(m));
  for (Eigen::Index i = 0; i < W.size(); ++i) W.data()[i] = t(rng);
  return W;
}

inline BitMask random_mask(std::size_t n, std::size_t m, std::mt19937_64& rng, double p = 0.5) {
  std::bernoulli_distribution b(p);
  BitMask M(n, m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) M.set(r, c, b(rng));
  return M;
}

inline SignPlane random_plane(std::size_t n, std::size_t m, std::mt19937_64& rng) {
  std::bernoulli_distribution b(0.5);
  SignPlane P(n, m);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < m; ++c) P.set(r, c, b(rng));
  return P;
}

inline BitMask full_mask(const Matrix& W) {
  return BitMask::full(static_cast<std::size_t>(W.rows()), static_cast<std::size_t>(W.cols()));
}

inline Matrix row(std::initializer_list<double> v) {
  Matrix W(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (double x : v) W(0, i++) = x;
  return W;
}

inline BitMask mask_row(std::initializer_list<int> v) {
  BitMask M(1, v.size());
  std::size_t i = 0;
  for (int x : v) M.set(0, i++, x != 0);
  return M;
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)}); }

// Random PSD second-moment matrix X^T X from `samples` Gaussian rows.
inline Matrix random_psd(std::size_t m, std::size_t samples, std::mt19937_64& rng) {
  const Matrix X = gaussian(samples, m, rng);
  return X.transpose() * X;
}

}  // namespace arbq::testing
