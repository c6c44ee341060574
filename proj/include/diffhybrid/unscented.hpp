#pragma once

// Unscented transform for diagonal input covariance. The element type A may be
// a plain double, an eager Array, or an ad::Var; with arrays every operation is
// pointwise, so one call transforms every grid point at once.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "diffhybrid/array.hpp"
#include "diffhybrid/errors.hpp"
#include "diffhybrid/moments.hpp"

namespace diffhybrid {

struct UtConfig {
  double alpha = 1.0;
  double beta = 2.0;
  double kappa = 0.0;

  double lambda(std::size_t dim) const {
    const double l = static_cast<double>(dim);
    return alpha * alpha * (l + kappa) - l;
  }

  void validate(std::size_t dim) const {
    if (dim == 0) throw ConfigError("unscented: dimension must be positive");
    if (!(static_cast<double>(dim) + lambda(dim) > 0.0)) {
      throw ConfigError("unscented: L + lambda must be positive (L=" + std::to_string(dim) +
                        ", lambda=" + std::to_string(lambda(dim)) + ")");
    }
  }
};

template <class A>
struct SigmaSet {
  std::vector<std::vector<A>> points;  // 2L+1 points, each of dimension L
  std::vector<double> wm;
  std::vector<double> wc;

  std::size_t dim() const { return points.empty() ? 0 : points.front().size(); }
};

template <class A>
struct UtResult {
  std::vector<A> mean;
  std::vector<A> var;
};

namespace detail {

inline double clamped_sqrt(double x) { return std::sqrt(std::max(x, 0.0)); }
template <class A>
A clamped_sqrt(const A& x) {
  return sqrt(x);
}

inline bool finite_value(double x) { return std::isfinite(x); }
template <class A>
bool finite_value(const A& x) {
  return value_of(x).all_finite();
}

inline double square_of(double x) { return x * x; }
template <class A>
A square_of(const A& x) {
  return square(x);
}

}  // namespace detail

template <class A>
SigmaSet<A> sigma_points(const std::vector<A>& mu, const std::vector<A>& var,
                         const UtConfig& cfg = {}) {
  const std::size_t l = mu.size();
  if (var.size() != l) throw ConfigError("sigma_points: mean and variance lengths differ");
  cfg.validate(l);
  const double lam = cfg.lambda(l);
  const double scale = static_cast<double>(l) + lam;

  SigmaSet<A> s;
  s.wm.assign(2 * l + 1, 1.0 / (2.0 * scale));
  s.wc = s.wm;
  s.wm[0] = lam / scale;
  s.wc[0] = lam / scale + (1.0 - cfg.alpha * cfg.alpha + cfg.beta);

  s.points.push_back(mu);
  std::vector<A> offsets;
  offsets.reserve(l);
  for (std::size_t i = 0; i < l; ++i) offsets.push_back(detail::clamped_sqrt(var[i] * scale));
  for (int sign : {1, -1}) {
    for (std::size_t i = 0; i < l; ++i) {
      std::vector<A> p = mu;
      p[i] = sign > 0 ? mu[i] + offsets[i] : mu[i] - offsets[i];
      s.points.push_back(std::move(p));
    }
  }
  return s;
}

/// Propagates (mu, var) through f: R^L -> R^K. f receives and returns vectors
/// of A; it may capture trainable parameters.
template <class A, class F>
UtResult<A> ut_propagate(F&& f, const std::vector<A>& mu, const std::vector<A>& var,
                         const UtConfig& cfg = {}) {
  const SigmaSet<A> s = sigma_points(mu, var, cfg);
  std::vector<std::vector<A>> ys;
  ys.reserve(s.points.size());
  for (std::size_t i = 0; i < s.points.size(); ++i) {
    std::vector<A> y = f(s.points[i]);
    if (!ys.empty() && y.size() != ys.front().size()) {
      throw ConfigError("ut_propagate: output dimension changed at sigma point " +
                        std::to_string(i));
    }
    for (const A& c : y) {
      if (!detail::finite_value(c)) {
        throw NumericalError("ut_propagate: non-finite output at sigma point " +
                             std::to_string(i));
      }
    }
    ys.push_back(std::move(y));
  }

  const std::size_t k = ys.front().size();
  UtResult<A> out;
  for (std::size_t c = 0; c < k; ++c) {
    A m = ys[0][c] * s.wm[0];
    for (std::size_t i = 1; i < ys.size(); ++i) m = m + ys[i][c] * s.wm[i];
    A v = detail::square_of(ys[0][c] - m) * s.wc[0];
    for (std::size_t i = 1; i < ys.size(); ++i) v = v + detail::square_of(ys[i][c] - m) * s.wc[i];
    out.mean.push_back(std::move(m));
    out.var.push_back(std::move(v));
  }
  return out;
}

}  // namespace diffhybrid
