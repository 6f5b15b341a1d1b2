// Copyright (c) 2026 The arbq Authors.
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include "arbq/tensor.hpp"
#include "test_util.hpp"

namespace arbq {
namespace {

using testing::gaussian;
using testing::random_mask;

SignMatrix signs(std::initializer_list<int> v) {
  SignMatrix B(1, static_cast<Eigen::Index>(v.size()));
  Eigen::Index i = 0;
  for (int x : v) B(0, i++) = static_cast<std::int8_t>(x);
  return B;
}

TEST(PackSigns, EncodesLsbFirst) {
  const SignPlane P = pack_signs(signs({1, -1, 1, 1}));
  ASSERT_EQ(P.row_bytes(), 1u);
  EXPECT_EQ(P.bytes()[0], 0b00001101);
}

TEST(PackSigns, AllPositiveByteIsFF) {
  EXPECT_EQ(pack_signs(signs({1, 1, 1, 1, 1, 1, 1, 1})).bytes()[0], 0xFF);
}

TEST(PackSigns, RejectsNonSignEntries) {
  EXPECT_THROW(pack_signs(signs({1, 0, -1})), ValidationError);
  EXPECT_THROW(pack_signs(signs({2})), ValidationError);
}

TEST(UnpackSigns, DecodesByte) {
  SignPlane P(1, 4);
  P.mutable_bytes()[0] = 0b00001101;
  const SignMatrix B = unpack_signs(P);
  EXPECT_EQ(B(0, 0), 1);
  EXPECT_EQ(B(0, 1), -1);
  EXPECT_EQ(B(0, 2), 1);
  EXPECT_EQ(B(0, 3), 1);

  SignPlane Q(1, 8);
  Q.mutable_bytes()[0] = 0xFF;
  EXPECT_TRUE((unpack_signs(Q).array() == 1).all());
}

TEST(PackSigns, RoundtripAndZeroPaddingOnRandomShapes) {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> dim(1, 64);
  std::bernoulli_distribution coin(0.5);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = dim(rng);
    const int m = trial == 0 ? 17 : dim(rng);
    SignMatrix B(n, m);
    for (Eigen::Index i = 0; i < B.size(); ++i) B.data()[i] = coin(rng) ? 1 : -1;
    const SignPlane P = pack_signs(B);
    EXPECT_EQ(unpack_signs(P), B);
    if (m % 8 != 0) {
      for (int r = 0; r < n; ++r) EXPECT_EQ(P.row_span(static_cast<std::size_t>(r)).back() >> (m % 8), 0);
    }
  }
}

TEST(PackSigns, IsPure) {
  std::mt19937_64 rng(5);
  SignMatrix B(9, 23);
  std::bernoulli_distribution coin(0.5);
  for (Eigen::Index i = 0; i < B.size(); ++i) B.data()[i] = coin(rng) ? 1 : -1;
  const SignPlane a = pack_signs(B);
  const SignPlane b = pack_signs(B);
  EXPECT_TRUE(std::equal(a.bytes().begin(), a.bytes().end(), b.bytes().begin(), b.bytes().end()));
}

TEST(MaskedRowMean, HandExamples) {
  EXPECT_DOUBLE_EQ(masked_row_mean(testing::row({1, -1, 100}), testing::mask_row({1, 1, 0}))(0), 0.0);
  EXPECT_DOUBLE_EQ(masked_row_mean(testing::row({0, 0, 0, 4}), testing::mask_row({1, 1, 1, 1}))(0), 1.0);
  EXPECT_DOUBLE_EQ(masked_row_mean(testing::row({3, 5}), testing::mask_row({0, 0}))(0), 0.0);
}

TEST(MaskedRowMean, FullMaskIsOrdinaryMean) {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 50; ++t) {
    const Matrix W = gaussian(7, 33, rng);
    const Vector got = masked_row_mean(W, testing::full_mask(W));
    const Vector want = W.rowwise().mean();
    for (Eigen::Index r = 0; r < W.rows(); ++r) EXPECT_LE(testing::rel_diff(got(r), want(r)), 1e-12);
  }
}

TEST(MaskedRowMean, RejectsShapeMismatch) {
  EXPECT_THROW(masked_row_mean(Matrix::Zero(2, 3), BitMask(2, 4)), ShapeError);
}

TEST(BitMask, OperationsMatchBooleanOracle) {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> dim(1, 40);
  for (int t = 0; t < 200; ++t) {
    const auto n = static_cast<std::size_t>(dim(rng));
    const auto m = static_cast<std::size_t>(dim(rng));
    const BitMask a = random_mask(n, m, rng);
    const BitMask b = random_mask(n, m, rng, 0.3);
    const BitMask na = ~a;
    const BitMask both = a & b;
    const BitMask either = a | b;
    const BitMask rows_any = a.any_rows();
    std::size_t count = 0;
    bool any = false;
    for (std::size_t r = 0; r < n; ++r) {
      std::size_t row_count = 0;
      for (std::size_t c = 0; c < m; ++c) {
        ASSERT_EQ(na.get(r, c), !a.get(r, c));
        ASSERT_EQ(both.get(r, c), a.get(r, c) && b.get(r, c));
        ASSERT_EQ(either.get(r, c), a.get(r, c) || b.get(r, c));
        row_count += a.get(r, c);
        any = any || a.get(r, c);
      }
      EXPECT_EQ(a.count_row(r), row_count);
      count += row_count;
    }
    EXPECT_EQ(a.count(), count);
    EXPECT_EQ(a.any(), any);
    for (std::size_t c = 0; c < m; ++c) {
      bool col = false;
      for (std::size_t r = 0; r < n; ++r) col = col || a.get(r, c);
      EXPECT_EQ(rows_any.get(0, c), col);
    }
    if (m % 8 != 0)
      for (std::size_t r = 0; r < n; ++r) EXPECT_EQ(na.row_span(r).back() >> (m % 8), 0);

    const BitMask line = random_mask(1, m, rng);
    const BitMask wide = line.broadcast_rows(n);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < m; ++c) ASSERT_EQ(wide.get(r, c), line.get(0, c));

    std::uniform_int_distribution<std::size_t> start(0, m - 1);
    const std::size_t b0 = start(rng);
    const std::size_t w = 1 + start(rng) % (m - b0);
    const BitMask slice = a.slice_cols(b0, w);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < w; ++c) ASSERT_EQ(slice.get(r, c), a.get(r, b0 + c));

    std::vector<std::size_t> visited;
    a.for_each_set(0, [&](std::size_t c) { visited.push_back(c); });
    std::vector<std::size_t> want;
    for (std::size_t c = 0; c < m; ++c)
      if (a.get(0, c)) want.push_back(c);
    EXPECT_EQ(visited, want);
  }
}

}  // namespace
}  // namespace arbq
