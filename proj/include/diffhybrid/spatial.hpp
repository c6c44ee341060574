#pragma once

// Finite-difference operators on moment fields over an n_x x n_y grid with
// point index y * n_x + x.

#include <algorithm>
#include <cstddef>
#include <memory>
#include <string>
#include <vector>

#include "diffhybrid/errors.hpp"
#include "diffhybrid/moments.hpp"
#include "diffhybrid/sparse.hpp"

namespace diffhybrid {

namespace detail {
inline void require_2d_grid(const GridSpec& g, const char* where) {
  if (g.n_x < 3 || g.n_y < 3) {
    throw ConfigError(std::string(where) + ": grid must be at least 3x3, got " +
                      std::to_string(g.n_x) + "x" + std::to_string(g.n_y));
  }
}
inline bool on_boundary(const GridSpec& g, std::size_t x, std::size_t y) {
  return x == 0 || y == 0 || x + 1 == g.n_x || y + 1 == g.n_y;
}
}  // namespace detail

/// Five-point Laplacian. Each direction contributes its own centre term, so
/// the centre appears twice and its variance weight is 4/dx^4 + 4/dy^4.
/// Boundary rows are empty (zero output); the boundary is owned by the
/// Neumann copy.
inline LinearStencil laplacian_stencil(const GridSpec& g) {
  detail::require_2d_grid(g, "laplacian");
  const double cx = 1.0 / (g.dx * g.dx);
  const double cy = 1.0 / (g.dy * g.dy);
  std::vector<std::vector<StencilTerm>> rows(g.points());
  for (std::size_t y = 0; y < g.n_y; ++y) {
    for (std::size_t x = 0; x < g.n_x; ++x) {
      if (detail::on_boundary(g, x, y)) continue;
      auto& r = rows[g.index(x, y)];
      r = {{g.index(x + 1, y), cx}, {g.index(x - 1, y), cx}, {g.index(x, y), -2.0 * cx},
           {g.index(x, y + 1), cy}, {g.index(x, y - 1), cy}, {g.index(x, y), -2.0 * cy}};
    }
  }
  return LinearStencil(g.points(), std::move(rows));
}

template <class A>
MomentField<A> laplacian(const MomentField<A>& field, const GridSpec& g) {
  return affine_propagate(field, laplacian_stencil(g));
}

/// Zero-gradient boundary: boundary means copy the nearest interior point
/// (an x copy followed by a y copy, so corners take the diagonal neighbour);
/// boundary variances become 0.
class NeumannBoundary {
 public:
  explicit NeumannBoundary(const GridSpec& g) {
    detail::require_2d_grid(g, "neumann");
    std::vector<std::vector<SparseMatrix::Entry>> m(g.points()), s(g.points());
    for (std::size_t y = 0; y < g.n_y; ++y) {
      for (std::size_t x = 0; x < g.n_x; ++x) {
        const std::size_t p = g.index(x, y);
        const std::size_t sx = std::clamp<std::size_t>(x, 1, g.n_x - 2);
        const std::size_t sy = std::clamp<std::size_t>(y, 1, g.n_y - 2);
        m[p].push_back({g.index(sx, sy), 1.0});
        if (!detail::on_boundary(g, x, y)) s[p].push_back({p, 1.0});
      }
    }
    mean_map_ = std::make_shared<const SparseMatrix>(g.points(), m);
    var_map_ = std::make_shared<const SparseMatrix>(g.points(), s);
  }

  template <class A>
  MomentField<A> enforce(const MomentField<A>& field) const {
    MomentField<A> out;
    for (std::size_t v = 0; v < field.n_vars(); ++v) {
      out.mean.push_back(apply(mean_map_, field.mean[v]));
      out.var.push_back(apply(var_map_, field.var[v]));
    }
    return out;
  }

  const std::shared_ptr<const SparseMatrix>& mean_map() const { return mean_map_; }

 private:
  std::shared_ptr<const SparseMatrix> mean_map_;
  std::shared_ptr<const SparseMatrix> var_map_;
};

template <class A>
MomentField<A> apply_neumann(const MomentField<A>& field, const GridSpec& g) {
  return NeumannBoundary(g).enforce(field);
}

}  // namespace diffhybrid
