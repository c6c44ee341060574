#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "diffhybrid/errors.hpp"

namespace diffhybrid {

/// Compressed-row sparse matrix used for fixed linear maps (stencils, masks,
/// boundary copies, observation selectors).
class SparseMatrix {
 public:
  struct Entry {
    std::size_t col;
    double value;
  };

  SparseMatrix() = default;

  /// Builds from per-row entry lists. Repeated columns inside a row are summed.
  SparseMatrix(std::size_t n_cols, const std::vector<std::vector<Entry>>& rows)
      : n_rows_(rows.size()), n_cols_(n_cols) {
    row_ptr_.assign(1, 0);
    row_ptr_.reserve(rows.size() + 1);
    for (const auto& row : rows) {
      const std::size_t start = entries_.size();
      for (const auto& e : row) {
        if (e.col >= n_cols) {
          throw ConfigError("SparseMatrix: column index out of range");
        }
        bool merged = false;
        for (std::size_t k = start; k < entries_.size(); ++k) {
          if (entries_[k].col == e.col) {
            entries_[k].value += e.value;
            merged = true;
            break;
          }
        }
        if (!merged) entries_.push_back(e);
      }
      row_ptr_.push_back(entries_.size());
    }
  }

  static SparseMatrix identity(std::size_t n) {
    std::vector<std::vector<Entry>> rows(n);
    for (std::size_t i = 0; i < n; ++i) rows[i].push_back({i, 1.0});
    return SparseMatrix(n, rows);
  }

  std::size_t rows() const { return n_rows_; }
  std::size_t cols() const { return n_cols_; }

  std::pair<const Entry*, const Entry*> row(std::size_t r) const {
    return {entries_.data() + row_ptr_[r], entries_.data() + row_ptr_[r + 1]};
  }

  /// y = K x for contiguous vectors.
  void multiply(const double* x, double* y) const {
    for (std::size_t r = 0; r < n_rows_; ++r) {
      double acc = 0.0;
      for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
        acc += entries_[k].value * x[entries_[k].col];
      }
      y[r] = acc;
    }
  }

  /// x_bar += K^T y_bar.
  void multiply_transpose_add(const double* y_bar, double* x_bar) const {
    for (std::size_t r = 0; r < n_rows_; ++r) {
      for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
        x_bar[entries_[k].col] += entries_[k].value * y_bar[r];
      }
    }
  }

  /// Dense copy, row-major. Test and diagnostic use only.
  std::vector<double> dense() const {
    std::vector<double> out(n_rows_ * n_cols_, 0.0);
    for (std::size_t r = 0; r < n_rows_; ++r) {
      for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
        out[r * n_cols_ + entries_[k].col] += entries_[k].value;
      }
    }
    return out;
  }

 private:
  std::size_t n_rows_ = 0;
  std::size_t n_cols_ = 0;
  std::vector<std::size_t> row_ptr_{0};
  std::vector<Entry> entries_;
};

}  // namespace diffhybrid
