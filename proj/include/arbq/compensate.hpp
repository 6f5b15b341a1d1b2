// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Block-wise error compensation. Columns are quantized in blocks of k; the
// error of each quantized column is pushed onto the still-real columns to
// its right through the upper Cholesky factor of H^-1, so the remaining
// weights absorb the induced output error.

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>

#include "arbq/errors.hpp"
#include "arbq/tensor.hpp"

namespace arbq {

struct CompensationResult {
  Matrix reconstruction;  // quantized weights, n x m
  Matrix compensated;     // real-valued targets each block was quantized from
  std::size_t block_steps = 0;
  double l2 = 0.0;        // Tr(R (H/2) R^T) against the original weights
};

/// Tr(R (H/2) R^T).
inline double hessian_l2(const Matrix& R, const Matrix& H) {
  const Matrix RH = R * H;
  double total = 0.0;
  for (Eigen::Index r = 0; r < R.rows(); ++r) total += RH.row(r).dot(R.row(r));
  return 0.5 * total;
}

/// Upper Cholesky factor U of H^-1 (H^-1 = U^T U).
inline Matrix inverse_hessian_factor(const Matrix& H) {
  require_shape(H.rows() == H.cols() && H.rows() > 0, "Hessian must be square");
  if (!H.allFinite()) throw ValidationError("Hessian has non-finite entries");
  Eigen::LLT<Matrix> llt(H);
  if (llt.info() != Eigen::Success) throw SingularHessian("Hessian is not positive definite; raise damping");
  const Matrix Hinv = llt.solve(Matrix::Identity(H.rows(), H.cols()));
  Eigen::LLT<Matrix> inv_llt(Hinv);
  if (inv_llt.info() != Eigen::Success) throw SingularHessian("Hessian inverse is not positive definite");
  Matrix U = inv_llt.matrixU();
  const double floor = std::sqrt(1e-12 * Hinv.diagonal().mean());
  for (Eigen::Index q = 0; q < U.rows(); ++q) U(q, q) = std::max(U(q, q), floor);
  return U;
}

/// quantize_block(block, begin) receives the current n x kb real-valued
/// block starting at column `begin` and returns its n x kb quantized values.
template <typename BlockQuantizer>
CompensationResult compensated_quantize(const Matrix& W, const Matrix& H, std::size_t k,
                                        BlockQuantizer&& quantize_block) {
  check_weights(W);
  require_shape(H.rows() == W.cols() && H.cols() == W.cols(), "Hessian size differs from weight cols");
  if (k < 1) throw ValidationError("block size must be >= 1");
  const Eigen::Index m = W.cols();
  const Eigen::Index kk = std::min<Eigen::Index>(static_cast<Eigen::Index>(k), m);
  const Matrix U = inverse_hessian_factor(H);

  CompensationResult out;
  Matrix work = W;
  out.reconstruction = Matrix::Zero(W.rows(), m);
  out.compensated = Matrix::Zero(W.rows(), m);
  for (Eigen::Index b0 = 0; b0 < m; b0 += kk) {
    const Eigen::Index kb = std::min(kk, m - b0);
    Matrix block = work.middleCols(b0, kb);
    out.compensated.middleCols(b0, kb) = block;
    const Matrix q = quantize_block(static_cast<const Matrix&>(block), static_cast<std::size_t>(b0));
    require_shape(q.rows() == W.rows() && q.cols() == kb, "block quantizer returned the wrong shape");
    out.reconstruction.middleCols(b0, kb) = q;

    Matrix err(W.rows(), kb);
    for (Eigen::Index j = 0; j < kb; ++j) {
      const Eigen::Index col = b0 + j;
      err.col(j) = (block.col(j) - q.col(j)) / U(col, col);
      block.rightCols(kb - j).noalias() -= err.col(j) * U.row(col).segment(col, kb - j);
    }
    if (b0 + kb < m) {
      work.rightCols(m - b0 - kb).noalias() -= err * U.block(b0, b0 + kb, kb, m - b0 - kb);
    }
    ++out.block_steps;
  }
  out.l2 = hessian_l2(W - out.reconstruction, H);
  return out;
}

/// The same block quantizer applied to the original weights without any
/// error feedback.
template <typename BlockQuantizer>
CompensationResult direct_quantize(const Matrix& W, const Matrix& H, std::size_t k, BlockQuantizer&& quantize_block) {
  check_weights(W);
  require_shape(H.rows() == W.cols() && H.cols() == W.cols(), "Hessian size differs from weight cols");
  if (k < 1) throw ValidationError("block size must be >= 1");
  const Eigen::Index m = W.cols();
  const Eigen::Index kk = std::min<Eigen::Index>(static_cast<Eigen::Index>(k), m);
  CompensationResult out;
  out.reconstruction = Matrix::Zero(W.rows(), m);
  out.compensated = W;
  for (Eigen::Index b0 = 0; b0 < m; b0 += kk) {
    const Eigen::Index kb = std::min(kk, m - b0);
    const Matrix block = W.middleCols(b0, kb);
    const Matrix q = quantize_block(block, static_cast<std::size_t>(b0));
    require_shape(q.rows() == W.rows() && q.cols() == kb, "block quantizer returned the wrong shape");
    out.reconstruction.middleCols(b0, kb) = q;
    ++out.block_steps;
  }
  out.l2 = hessian_l2(W - out.reconstruction, H);
  return out;
}

struct CompensationGain {
  double l2_with = 0.0;
  double l2_without = 0.0;
};

template <typename BlockQuantizer>
CompensationGain compensation_gain(const Matrix& W, const Matrix& H, std::size_t k, BlockQuantizer&& quantize_block) {
  return {compensated_quantize(W, H, k, quantize_block).l2, direct_quantize(W, H, k, quantize_block).l2};
}

}  // namespace arbq
