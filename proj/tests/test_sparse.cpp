#include <gtest/gtest.h>

#include "diffhybrid/array.hpp"
#include "diffhybrid/errors.hpp"
#include "diffhybrid/sparse.hpp"

using namespace diffhybrid;

TEST(SparseMatrix, RowsKeepTheirOwnEntries) {
  const SparseMatrix m(3, {{{0, 1.0}, {2, 2.0}}, {}, {{1, -3.0}}});
  EXPECT_EQ(m.rows(), 3u);
  EXPECT_EQ(m.cols(), 3u);
  const std::vector<double> x{1.0, 10.0, 100.0};
  std::vector<double> y(3, 0.0);
  m.multiply(x.data(), y.data());
  EXPECT_DOUBLE_EQ(y[0], 201.0);
  EXPECT_DOUBLE_EQ(y[1], 0.0);
  EXPECT_DOUBLE_EQ(y[2], -30.0);
}

TEST(SparseMatrix, DuplicateColumnsMerge) {
  const SparseMatrix m(2, {{{1, 1.5}, {1, 2.5}}});
  const auto dense = m.dense();
  EXPECT_DOUBLE_EQ(dense[0 * 2 + 1], 4.0);
  const auto [b, e] = m.row(0);
  EXPECT_EQ(e - b, 1);
}

TEST(SparseMatrix, TransposeProductMatchesDense) {
  const SparseMatrix m(3, {{{0, 1.0}, {1, 2.0}}, {{2, 3.0}}});
  const std::vector<double> g{1.0, -1.0};
  std::vector<double> out(3, 0.5);
  m.multiply_transpose_add(g.data(), out.data());
  EXPECT_DOUBLE_EQ(out[0], 1.5);
  EXPECT_DOUBLE_EQ(out[1], 2.5);
  EXPECT_DOUBLE_EQ(out[2], -2.5);
}

TEST(SparseMatrix, IdentityAndRangeCheck) {
  const auto id = SparseMatrix::identity(4);
  const std::vector<double> x{1, 2, 3, 4};
  std::vector<double> y(4);
  id.multiply(x.data(), y.data());
  EXPECT_EQ(x, y);
  EXPECT_THROW(SparseMatrix(2, {{{2, 1.0}}}), ConfigError);
}
