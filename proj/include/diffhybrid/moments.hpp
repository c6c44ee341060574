#pragma once

// Diagonal-Gaussian state fields and exact moment propagation through
// linear/affine maps. Cross-covariances are never tracked: every term of a
// linear combination is treated as independent, even when two terms refer to
// the same underlying variable.

#include <cmath>
#include <cstddef>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "diffhybrid/array.hpp"
#include "diffhybrid/errors.hpp"

namespace diffhybrid {

/// Discretization of the space-time domain. ODE systems use n_x = n_y = 1.
struct GridSpec {
  std::size_t n_x = 1;
  std::size_t n_y = 1;
  double dx = 1.0;
  double dy = 1.0;
  double dt = 0.1;
  std::size_t n_t = 1;
  std::size_t n_v = 1;

  std::size_t points() const { return n_x * n_y; }
  std::size_t index(std::size_t x, std::size_t y) const { return y * n_x + x; }
  double horizon() const { return static_cast<double>(n_t) * dt; }

  void validate() const {
    if (n_x == 0 || n_y == 0 || n_t == 0 || n_v == 0) {
      throw ConfigError("GridSpec: counts must be positive");
    }
    if (!(dx > 0.0) || !(dy > 0.0) || !(dt > 0.0)) {
      throw ConfigError("GridSpec: spacings must be positive");
    }
  }
};

/// Mean and diagonal variance per state variable. Each entry of `mean` and
/// `var` is a 1 x n_points row.
template <class A>
struct MomentField {
  std::vector<A> mean;
  std::vector<A> var;

  std::size_t n_vars() const { return mean.size(); }
};

using Field = MomentField<Array>;

inline Field make_field(std::size_t n_vars, std::size_t n_points, double mean = 0.0,
                        double var = 0.0) {
  Field f;
  for (std::size_t v = 0; v < n_vars; ++v) {
    f.mean.emplace_back(1, n_points, mean);
    f.var.emplace_back(1, n_points, var);
  }
  return f;
}

inline const Shape& value_shape(const Array& a) { return a.shape(); }
template <class V>
  requires requires(const V& v) { v.value(); }
const Shape& value_shape(const V& v) {
  return v.value().shape();
}

inline const Array& value_of(const Array& a) { return a; }
template <class V>
  requires requires(const V& v) { v.value(); }
const Array& value_of(const V& v) {
  return v.value();
}

template <class A>
void require_compatible(const MomentField<A>& a, const MomentField<A>& b, const char* where) {
  if (a.n_vars() != b.n_vars()) {
    throw ConfigError(std::string(where) + ": variable count mismatch");
  }
  for (std::size_t v = 0; v < a.n_vars(); ++v) {
    const auto& sa = value_shape(a.mean[v]);
    const auto& sb = value_shape(b.mean[v]);
    if (!(sa == sb)) {
      throw ConfigError(std::string(where) + ": shape mismatch " + to_string(sa) + " vs " +
                        to_string(sb));
    }
  }
}

/// Detaches a field to plain arrays.
template <class A>
Field values_of(const MomentField<A>& f) {
  Field out;
  for (std::size_t v = 0; v < f.n_vars(); ++v) {
    out.mean.push_back(value_of(f.mean[v]));
    out.var.push_back(value_of(f.var[v]));
  }
  return out;
}

template <class A>
bool all_finite(const MomentField<A>& f) {
  for (std::size_t v = 0; v < f.n_vars(); ++v) {
    if (!value_of(f.mean[v]).all_finite() || !value_of(f.var[v]).all_finite()) return false;
  }
  return true;
}

/// One output row of a linear operator: sum of coeff * input[index].
struct StencilTerm {
  std::size_t index;
  double coeff;
};

/// Linear (or affine, with `offset`) operator K v + b over the points of one
/// variable. Terms within a row may repeat an index; each term contributes its
/// own squared coefficient to the propagated variance.
class LinearStencil {
 public:
  LinearStencil(std::size_t n_in, std::vector<std::vector<StencilTerm>> rows,
                std::vector<double> offset = {})
      : n_in_(n_in), rows_(std::move(rows)), offset_(std::move(offset)) {
    if (!offset_.empty() && offset_.size() != rows_.size()) {
      throw ConfigError("LinearStencil: offset length does not match row count");
    }
    std::vector<std::vector<SparseMatrix::Entry>> m(rows_.size()), s(rows_.size());
    for (std::size_t r = 0; r < rows_.size(); ++r) {
      for (const auto& t : rows_[r]) {
        if (!std::isfinite(t.coeff)) throw ConfigError("LinearStencil: non-finite coefficient");
        if (t.index >= n_in_) throw ConfigError("LinearStencil: index out of range");
        m[r].push_back({t.index, t.coeff});
        s[r].push_back({t.index, t.coeff * t.coeff});
      }
    }
    for (double b : offset_) {
      if (!std::isfinite(b)) throw ConfigError("LinearStencil: non-finite offset");
    }
    mean_map_ = std::make_shared<const SparseMatrix>(n_in_, m);
    var_map_ = std::make_shared<const SparseMatrix>(n_in_, s);
  }

  /// Dense K (row-major, n_out x n_in) with optional offset.
  static LinearStencil dense(std::size_t n_out, std::size_t n_in, const std::vector<double>& k,
                             std::vector<double> offset = {}) {
    if (k.size() != n_out * n_in) throw ConfigError("LinearStencil: dense size mismatch");
    std::vector<std::vector<StencilTerm>> rows(n_out);
    for (std::size_t r = 0; r < n_out; ++r) {
      for (std::size_t c = 0; c < n_in; ++c) {
        if (k[r * n_in + c] != 0.0) rows[r].push_back({c, k[r * n_in + c]});
      }
    }
    return LinearStencil(n_in, std::move(rows), std::move(offset));
  }

  std::size_t inputs() const { return n_in_; }
  std::size_t outputs() const { return rows_.size(); }
  const std::vector<std::vector<StencilTerm>>& rows() const { return rows_; }
  const std::vector<double>& offset() const { return offset_; }
  const std::shared_ptr<const SparseMatrix>& mean_map() const { return mean_map_; }
  const std::shared_ptr<const SparseMatrix>& variance_map() const { return var_map_; }

 private:
  std::size_t n_in_;
  std::vector<std::vector<StencilTerm>> rows_;
  std::vector<double> offset_;
  std::shared_ptr<const SparseMatrix> mean_map_;
  std::shared_ptr<const SparseMatrix> var_map_;
};

/// mean' = K mean + b, var' = (K o K) var, applied to every variable.
template <class A>
MomentField<A> affine_propagate(const MomentField<A>& field, const LinearStencil& k) {
  MomentField<A> out;
  for (std::size_t v = 0; v < field.n_vars(); ++v) {
    if (value_shape(field.mean[v]).cols != k.inputs()) {
      throw ConfigError("affine_propagate: stencil expects " + std::to_string(k.inputs()) +
                        " points, field has " + std::to_string(value_shape(field.mean[v]).cols));
    }
    A m = apply(k.mean_map(), field.mean[v]);
    if (!k.offset().empty()) m = m + constant_like(m, Array::row(k.offset()));
    out.mean.push_back(std::move(m));
    out.var.push_back(apply(k.variance_map(), field.var[v]));
  }
  return out;
}

/// Y = sum_i c_i X_i with independent terms: mean = sum c_i mu_i,
/// var = sum c_i^2 var_i.
template <class A>
MomentField<A> combine_linear(const std::vector<std::pair<double, const MomentField<A>*>>& terms) {
  if (terms.empty()) throw ConfigError("combine_linear: empty term list");
  const MomentField<A>& first = *terms.front().second;
  for (const auto& [c, f] : terms) require_compatible(first, *f, "combine_linear");
  MomentField<A> out;
  for (std::size_t v = 0; v < first.n_vars(); ++v) {
    A m = first.mean[v] * terms.front().first;
    A s = first.var[v] * (terms.front().first * terms.front().first);
    for (std::size_t i = 1; i < terms.size(); ++i) {
      const double c = terms[i].first;
      m = m + terms[i].second->mean[v] * c;
      s = s + terms[i].second->var[v] * (c * c);
    }
    out.mean.push_back(std::move(m));
    out.var.push_back(std::move(s));
  }
  return out;
}

}  // namespace diffhybrid
