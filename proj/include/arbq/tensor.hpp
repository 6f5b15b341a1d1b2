// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

// Dense matrices, packed sign planes and packed bitmaps shared by every
// quantizer in the library.
//
// Packing layout (also the on-disk layout): each row occupies
// ceil(cols / 8) bytes; column c of a row lives in bit (c % 8) of byte
// (c / 8), least-significant bit first. Padding bits are always zero.

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "arbq/errors.hpp"

namespace arbq {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using SignMatrix = Eigen::Matrix<std::int8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Full-precision layer weight, rows = output channels, cols = input dims.
using WeightMatrix = Matrix;

inline void require_shape(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

/// Throws unless W is non-empty and every entry is finite.
inline void check_weights(const Matrix& W, const char* what = "weight matrix") {
  if (W.rows() < 1 || W.cols() < 1) throw ShapeError(std::string(what) + " is empty");
  if (!W.allFinite()) throw ValidationError(std::string(what) + " has non-finite entries");
}

class BitMatrix {
 public:
  BitMatrix() = default;
  BitMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), stride_((cols + 7) / 8), bytes_(rows * stride_, 0) {}

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t row_bytes() const noexcept { return stride_; }

  bool get(std::size_t r, std::size_t c) const noexcept {
    return (bytes_[r * stride_ + (c >> 3)] >> (c & 7)) & 1u;
  }

  void set(std::size_t r, std::size_t c, bool v) noexcept {
    std::uint8_t& byte = bytes_[r * stride_ + (c >> 3)];
    const auto bit = static_cast<std::uint8_t>(1u << (c & 7));
    byte = v ? static_cast<std::uint8_t>(byte | bit) : static_cast<std::uint8_t>(byte & ~bit);
  }

  std::span<const std::uint8_t> row_span(std::size_t r) const {
    return {bytes_.data() + r * stride_, stride_};
  }
  std::span<const std::uint8_t> bytes() const { return bytes_; }
  std::span<std::uint8_t> mutable_bytes() { return bytes_; }

  bool same_shape(const BitMatrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  void fill(bool v) {
    std::fill(bytes_.begin(), bytes_.end(), v ? std::uint8_t{0xFF} : std::uint8_t{0});
    const std::size_t tail = cols_ % 8;
    if (!v || tail == 0) return;
    const auto keep = static_cast<std::uint8_t>((1u << tail) - 1u);
    for (std::size_t r = 0; r < rows_; ++r) bytes_[r * stride_ + stride_ - 1] &= keep;
  }

  /// Calls fn(c) for every set column of row r, in increasing order.
  template <typename Fn>
  void for_each_set(std::size_t r, Fn&& fn) const {
    const std::uint8_t* row = bytes_.data() + r * stride_;
    for (std::size_t b = 0; b < stride_; ++b)
      for (unsigned bits = row[b]; bits != 0; bits &= bits - 1)
        fn(b * 8 + static_cast<std::size_t>(std::countr_zero(bits)));
  }

  friend bool operator==(const BitMatrix& a, const BitMatrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.bytes_ == b.bytes_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t stride_ = 0;
  std::vector<std::uint8_t> bytes_;
};

/// Packed +/-1 matrix; bit 1 encodes +1, bit 0 encodes -1.
class SignPlane : public BitMatrix {
 public:
  using BitMatrix::BitMatrix;

  double sign(std::size_t r, std::size_t c) const noexcept { return get(r, c) ? 1.0 : -1.0; }
  void set_sign(std::size_t r, std::size_t c, double s) noexcept { set(r, c, s >= 0.0); }
};

/// Packed membership flags.
class BitMask : public BitMatrix {
 public:
  using BitMatrix::BitMatrix;

  static BitMask full(std::size_t rows, std::size_t cols) {
    BitMask m(rows, cols);
    m.fill(true);
    return m;
  }

  /// 1 x m mask of columns with at least one set entry.
  BitMask any_rows() const {
    BitMask out(1, cols());
    auto dst = out.mutable_bytes();
    for (std::size_t r = 0; r < rows(); ++r) {
      auto src = row_span(r);
      for (std::size_t b = 0; b < row_bytes(); ++b) dst[b] = static_cast<std::uint8_t>(dst[b] | src[b]);
    }
    return out;
  }

  std::size_t count_row(std::size_t r) const {
    std::size_t n = 0;
    for (std::uint8_t byte : row_span(r)) n += static_cast<std::size_t>(std::popcount(byte));
    return n;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (std::uint8_t byte : bytes()) n += static_cast<std::size_t>(std::popcount(byte));
    return n;
  }

  BitMask operator~() const {
    BitMask out(rows(), cols());
    auto src = bytes();
    auto dst = out.mutable_bytes();
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<std::uint8_t>(~src[i]);
    out.clear_padding();
    return out;
  }

  BitMask operator&(const BitMask& o) const { return combine(o, [](std::uint8_t a, std::uint8_t b) { return a & b; }); }
  BitMask operator|(const BitMask& o) const { return combine(o, [](std::uint8_t a, std::uint8_t b) { return a | b; }); }

  bool any() const {
    for (std::uint8_t byte : bytes())
      if (byte) return true;
    return false;
  }

  /// Repeats a 1 x m column mask over n rows.
  BitMask broadcast_rows(std::size_t n) const {
    require_shape(rows() == 1, "broadcast_rows expects a 1 x m mask");
    BitMask out(n, cols());
    auto src = row_span(0);
    auto dst = out.mutable_bytes();
    for (std::size_t r = 0; r < n; ++r) std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(r * row_bytes()));
    return out;
  }

  /// Columns [begin, begin + width) as a new mask.
  BitMask slice_cols(std::size_t begin, std::size_t width) const {
    require_shape(begin + width <= cols(), "column slice out of range");
    BitMask out(rows(), width);
    for (std::size_t r = 0; r < rows(); ++r)
      for (std::size_t c = 0; c < width; ++c) out.set(r, c, get(r, begin + c));
    return out;
  }

 private:
  template <typename Op>
  BitMask combine(const BitMask& o, Op op) const {
    require_shape(same_shape(o), "mask shapes differ");
    BitMask out(rows(), cols());
    auto a = bytes();
    auto b = o.bytes();
    auto dst = out.mutable_bytes();
    for (std::size_t i = 0; i < a.size(); ++i) dst[i] = static_cast<std::uint8_t>(op(a[i], b[i]));
    return out;
  }

  void clear_padding() {
    const std::size_t tail = cols() % 8;
    if (tail == 0) return;
    const auto keep = static_cast<std::uint8_t>((1u << tail) - 1u);
    auto dst = mutable_bytes();
    for (std::size_t r = 0; r < rows(); ++r) dst[r * row_bytes() + row_bytes() - 1] &= keep;
  }
};

/// Per-row scale and mean.
struct RowParams {
  Vector alpha;
  Vector mu;
};

/// Per-column scale.
struct ColParams {
  Vector alpha_c;
};

inline SignPlane pack_signs(const SignMatrix& B) {
  SignPlane plane(static_cast<std::size_t>(B.rows()), static_cast<std::size_t>(B.cols()));
  for (Eigen::Index r = 0; r < B.rows(); ++r) {
    for (Eigen::Index c = 0; c < B.cols(); ++c) {
      const auto v = B(r, c);
      if (v != 1 && v != -1) throw ValidationError("sign matrix entry is not +1 or -1");
      plane.set(static_cast<std::size_t>(r), static_cast<std::size_t>(c), v == 1);
    }
  }
  return plane;
}

inline SignMatrix unpack_signs(const SignPlane& P) {
  SignMatrix B(static_cast<Eigen::Index>(P.rows()), static_cast<Eigen::Index>(P.cols()));
  for (std::size_t r = 0; r < P.rows(); ++r)
    for (std::size_t c = 0; c < P.cols(); ++c)
      B(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = P.get(r, c) ? 1 : -1;
  return B;
}

/// sign() with the deterministic tie rule sign(0) = +1.
inline double sign_of(double x) noexcept { return x >= 0.0 ? 1.0 : -1.0; }

inline void require_mask_shape(const Matrix& W, const BitMask& M) {
  require_shape(static_cast<std::size_t>(W.rows()) == M.rows() &&
                    static_cast<std::size_t>(W.cols()) == M.cols(),
                "matrix and mask shapes differ");
}

/// Row-wise mean over masked entries, divided by the masked count.
/// Rows with an empty mask yield 0.
inline Vector masked_row_mean(const Matrix& W, const BitMask& M) {
  require_mask_shape(W, M);
  Vector out = Vector::Zero(W.rows());
  for (Eigen::Index r = 0; r < W.rows(); ++r) {
    double sum = 0.0;
    std::size_t n = 0;
    for (Eigen::Index c = 0; c < W.cols(); ++c) {
      if (M.get(r, c)) {
        sum += W(r, c);
        ++n;
      }
    }
    out(r) = n == 0 ? 0.0 : sum / static_cast<double>(n);
  }
  return out;
}

}  // namespace arbq
