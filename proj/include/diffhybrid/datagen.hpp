#pragma once

// Synthetic ground truth: plain-double RK4 solvers of the fully known systems,
// measurement noise, Gaussian-random-field initial conditions, observation
// masks and fine-to-coarse subsampling.

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstddef>
#include <cstdint>
#include <mutex>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "diffhybrid/array.hpp"
#include "diffhybrid/bayes.hpp"
#include "diffhybrid/errors.hpp"
#include "diffhybrid/moments.hpp"

namespace diffhybrid {

/// Deterministic trajectory sampled every grid.dt; frames 0..grid.n_t.
/// values are laid out [frame][var][point].
struct Trajectory {
  GridSpec grid;
  std::vector<double> values;

  std::size_t frames() const { return grid.n_t + 1; }
  std::size_t offset(std::size_t f, std::size_t v) const {
    return (f * grid.n_v + v) * grid.points();
  }
  double at(std::size_t f, std::size_t v, std::size_t p) const { return values[offset(f, v) + p]; }

  std::vector<Array> frame(std::size_t f) const {
    std::vector<Array> out;
    for (std::size_t v = 0; v < grid.n_v; ++v) {
      const double* b = values.data() + offset(f, v);
      out.push_back(Array::row(std::span<const double>(b, grid.points())));
    }
    return out;
  }
};

/// Pendulum x1' = x2, x2' = -sin(x1); `substeps` RK4 steps per sample.
inline Trajectory solve_pendulum(std::array<double, 2> x0, double dt, std::size_t steps,
                                 std::size_t substeps = 1) {
  if (!(dt > 0.0) || substeps == 0) throw ConfigError("solve_pendulum: invalid step");
  Trajectory tr;
  tr.grid.n_v = 2;
  tr.grid.dt = dt;
  tr.grid.n_t = steps;
  tr.values.reserve(2 * (steps + 1));
  const double h = dt / static_cast<double>(substeps);
  double x1 = x0[0], x2 = x0[1];
  tr.values.push_back(x1);
  tr.values.push_back(x2);
  for (std::size_t k = 0; k < steps; ++k) {
    for (std::size_t s = 0; s < substeps; ++s) {
      const double a1 = x2, a2 = -std::sin(x1);
      const double b1 = x2 + 0.5 * h * a2, b2 = -std::sin(x1 + 0.5 * h * a1);
      const double c1 = x2 + 0.5 * h * b2, c2 = -std::sin(x1 + 0.5 * h * b1);
      const double d1 = x2 + h * c2, d2 = -std::sin(x1 + h * c1);
      x1 += h / 6.0 * (a1 + 2.0 * b1 + 2.0 * c1 + d1);
      x2 += h / 6.0 * (a2 + 2.0 * b2 + 2.0 * c2 + d2);
    }
    if (!std::isfinite(x1) || !std::isfinite(x2)) {
      throw NumericalError("solve_pendulum: non-finite state at step " + std::to_string(k + 1));
    }
    tr.values.push_back(x1);
    tr.values.push_back(x2);
  }
  return tr;
}

inline double pendulum_energy(double x1, double x2) { return 0.5 * x2 * x2 - std::cos(x1); }

struct ReactionDiffusionTruth {
  std::array<double, 2> diffusion{2.8e-4, 5.0e-2};
};

namespace detail {

/// Zero-gradient copy: every boundary point takes the clamped interior value.
inline void neumann_copy(const GridSpec& g, double* u) {
  for (std::size_t y = 0; y < g.n_y; ++y) {
    for (std::size_t x = 0; x < g.n_x; ++x) {
      if (x > 0 && y > 0 && x + 1 < g.n_x && y + 1 < g.n_y) continue;
      const std::size_t sx = std::clamp<std::size_t>(x, 1, g.n_x - 2);
      const std::size_t sy = std::clamp<std::size_t>(y, 1, g.n_y - 2);
      u[g.index(x, y)] = u[g.index(sx, sy)];
    }
  }
}

inline void rd_derivative(const GridSpec& g, const std::array<double, 2>& d, const double* v1,
                          const double* v2, double* k1, double* k2) {
  const double ix = 1.0 / (g.dx * g.dx), iy = 1.0 / (g.dy * g.dy);
  for (std::size_t y = 0; y < g.n_y; ++y) {
    for (std::size_t x = 0; x < g.n_x; ++x) {
      const std::size_t p = g.index(x, y);
      double l1 = 0.0, l2 = 0.0;
      if (x > 0 && y > 0 && x + 1 < g.n_x && y + 1 < g.n_y) {
        l1 = (v1[p + 1] - 2.0 * v1[p] + v1[p - 1]) * ix +
             (v1[p + g.n_x] - 2.0 * v1[p] + v1[p - g.n_x]) * iy;
        l2 = (v2[p + 1] - 2.0 * v2[p] + v2[p - 1]) * ix +
             (v2[p + g.n_x] - 2.0 * v2[p] + v2[p - g.n_x]) * iy;
      }
      const double a = v1[p], b = v2[p];
      k1[p] = d[0] * l1 + (a - a * a * a - b - 0.005);
      k2[p] = d[1] * l2 + 10.0 * (a - b);
    }
  }
}

}  // namespace detail

/// RK4 on the full reaction-diffusion system with the Neumann copy applied to
/// the initial condition and after every fine step.
inline Trajectory solve_reaction_diffusion(const GridSpec& grid, const ReactionDiffusionTruth& truth,
                                           const std::vector<Array>& mu0, std::size_t steps,
                                           std::size_t substeps = 1) {
  grid.validate();
  if (grid.n_x < 3 || grid.n_y < 3) throw ConfigError("solve_reaction_diffusion: grid below 3x3");
  if (mu0.size() != 2 || mu0[0].size() != grid.points() || mu0[1].size() != grid.points()) {
    throw ConfigError("solve_reaction_diffusion: initial condition does not match the grid");
  }
  if (substeps == 0) throw ConfigError("solve_reaction_diffusion: substeps must be positive");
  const std::size_t n = grid.points();
  Trajectory tr;
  tr.grid = grid;
  tr.grid.n_v = 2;
  tr.grid.n_t = steps;
  tr.values.reserve(2 * n * (steps + 1));

  std::vector<double> u(2 * n);
  std::copy(mu0[0].values().begin(), mu0[0].values().end(), u.begin());
  std::copy(mu0[1].values().begin(), mu0[1].values().end(), u.begin() + static_cast<long>(n));
  detail::neumann_copy(grid, u.data());
  detail::neumann_copy(grid, u.data() + n);
  tr.values.insert(tr.values.end(), u.begin(), u.end());

  const double h = grid.dt / static_cast<double>(substeps);
  std::vector<double> k1(2 * n), k2(2 * n), k3(2 * n), k4(2 * n), tmp(2 * n);
  auto deriv = [&](const std::vector<double>& s, std::vector<double>& k) {
    detail::rd_derivative(grid, truth.diffusion, s.data(), s.data() + n, k.data(), k.data() + n);
  };
  auto stage = [&](const std::vector<double>& k, double a) {
    for (std::size_t i = 0; i < 2 * n; ++i) tmp[i] = u[i] + a * h * k[i];
  };
  for (std::size_t step = 0; step < steps; ++step) {
    for (std::size_t s = 0; s < substeps; ++s) {
      deriv(u, k1);
      stage(k1, 0.5);
      deriv(tmp, k2);
      stage(k2, 0.5);
      deriv(tmp, k3);
      stage(k3, 1.0);
      deriv(tmp, k4);
      for (std::size_t i = 0; i < 2 * n; ++i) {
        u[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
      }
      detail::neumann_copy(grid, u.data());
      detail::neumann_copy(grid, u.data() + n);
    }
    for (double x : u) {
      if (!std::isfinite(x)) {
        const double dmax = std::max(truth.diffusion[0], truth.diffusion[1]);
        const double dmin2 = std::min(grid.dx * grid.dx, grid.dy * grid.dy);
        throw NumericalError("solve_reaction_diffusion: non-finite state at step " +
                             std::to_string(step + 1) + "; diffusion number D*dt/dx^2 = " +
                             std::to_string(dmax * h / dmin2) + " with fine step " +
                             std::to_string(h));
      }
    }
    tr.values.insert(tr.values.end(), u.begin(), u.end());
  }
  return tr;
}

/// Adds N(0, std_v^2) noise to every entry of variable v.
inline Dataset add_noise(const Trajectory& tr, const std::vector<double>& std_per_var,
                         std::uint64_t seed) {
  if (std_per_var.size() != tr.grid.n_v) {
    throw ConfigError("add_noise: expected " + std::to_string(tr.grid.n_v) + " noise levels");
  }
  for (double s : std_per_var) {
    if (!(s >= 0.0)) throw ConfigError("add_noise: noise std must be non-negative");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  Dataset d;
  d.grid = tr.grid;
  d.entries.reserve(tr.values.size());
  for (std::size_t f = 0; f < tr.frames(); ++f) {
    for (std::size_t v = 0; v < tr.grid.n_v; ++v) {
      for (std::size_t p = 0; p < tr.grid.points(); ++p) {
        const double z = n01(rng);
        d.entries.push_back({f, v, p, tr.at(f, v, p) + std_per_var[v] * z});
      }
    }
  }
  return d;
}

/// Observed variables and inclusive time windows. On grids, boundary points
/// can be dropped: the model pins their variance to zero and their values only
/// repeat the adjacent interior point.
struct CaseSpec {
  std::vector<std::size_t> variables;
  std::vector<std::pair<double, double>> windows;
  bool interior_only = false;
};

/// Pendulum observation cases over the 20 s training horizon.
inline CaseSpec pendulum_case(int which) {
  switch (which) {
    case 1: return {{0, 1}, {{0.0, 20.0}}};
    case 2: return {{0, 1}, {{5.0, 20.0}}};
    case 3: return {{1}, {{0.0, 20.0}}};
    default: throw ConfigError("unknown pendulum case " + std::to_string(which));
  }
}

inline Dataset mask_case(const Dataset& data, const CaseSpec& spec) {
  constexpr double kTimeTol = 1e-9;
  Dataset out;
  out.grid = data.grid;
  for (const auto& e : data.entries) {
    if (std::find(spec.variables.begin(), spec.variables.end(), e.var) == spec.variables.end()) {
      continue;
    }
    if (spec.interior_only && data.grid.n_x >= 3 && data.grid.n_y >= 3) {
      const std::size_t x = e.point % data.grid.n_x, y = e.point / data.grid.n_x;
      if (x == 0 || y == 0 || x + 1 == data.grid.n_x || y + 1 == data.grid.n_y) continue;
    }
    const double t = static_cast<double>(e.frame) * data.grid.dt;
    for (const auto& [t0, t1] : spec.windows) {
      if (t >= t0 - kTimeTol && t <= t1 + kTimeTol) {
        out.entries.push_back(e);
        break;
      }
    }
  }
  return out;
}

/// Index of the fine sample nearest to coarse sample i when both grids span
/// the same extent.
inline std::vector<std::size_t> nearest_index_map(std::size_t n_fine, std::size_t n_coarse) {
  if (n_fine == 0 || n_coarse == 0) throw ConfigError("nearest_index_map: empty grid");
  std::vector<std::size_t> m(n_coarse, 0);
  if (n_coarse == 1) return m;
  for (std::size_t i = 0; i < n_coarse; ++i) {
    const double pos = static_cast<double>(i) * static_cast<double>(n_fine - 1) /
                       static_cast<double>(n_coarse - 1);
    m[i] = static_cast<std::size_t>(std::lround(pos));
  }
  return m;
}

/// Fine trajectory to an nx x ny grid over the same extent, keeping every
/// `time_stride`-th frame.
inline Trajectory subsample(const Trajectory& fine, std::size_t nx, std::size_t ny,
                            std::size_t time_stride) {
  if (time_stride == 0) throw ConfigError("subsample: time stride must be positive");
  if (nx > fine.grid.n_x || ny > fine.grid.n_y) throw ConfigError("subsample: target is finer");
  const auto mx = nearest_index_map(fine.grid.n_x, nx);
  const auto my = nearest_index_map(fine.grid.n_y, ny);
  Trajectory c;
  c.grid = fine.grid;
  c.grid.n_x = nx;
  c.grid.n_y = ny;
  const double lx = fine.grid.dx * static_cast<double>(fine.grid.n_x - 1);
  const double ly = fine.grid.dy * static_cast<double>(fine.grid.n_y - 1);
  c.grid.dx = nx > 1 ? lx / static_cast<double>(nx - 1) : fine.grid.dx;
  c.grid.dy = ny > 1 ? ly / static_cast<double>(ny - 1) : fine.grid.dy;
  c.grid.dt = fine.grid.dt * static_cast<double>(time_stride);
  c.grid.n_t = fine.grid.n_t / time_stride;
  for (std::size_t f = 0; f <= c.grid.n_t; ++f) {
    for (std::size_t v = 0; v < fine.grid.n_v; ++v) {
      for (std::size_t y = 0; y < ny; ++y) {
        for (std::size_t x = 0; x < nx; ++x) {
          c.values.push_back(fine.at(f * time_stride, v, fine.grid.index(mx[x], my[y])));
        }
      }
    }
  }
  return c;
}

namespace detail {
inline std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

/// Stationary Gaussian random field with covariance amp^2 exp(-r^2 / (2 l^2)),
/// sampled by circulant embedding on a doubled periodic grid and cropped.
inline Array grf_initial(const GridSpec& grid, double length_scale, double amplitude,
                         std::uint64_t seed) {
  if (!(length_scale > 0.0)) throw ConfigError("grf_initial: length scale must be positive");
  const std::size_t nx = grid.n_x, ny = grid.n_y;
  if (amplitude == 0.0) return Array(1, nx * ny, 0.0);
  const std::size_t mx = 2 * nx, my = 2 * ny, m = mx * my;

  using cplx = std::complex<double>;
  std::vector<cplx> c(m), w(m);
  for (std::size_t j = 0; j < my; ++j) {
    for (std::size_t i = 0; i < mx; ++i) {
      const double rx = grid.dx * static_cast<double>(std::min(i, mx - i));
      const double ry = grid.dy * static_cast<double>(std::min(j, my - j));
      const double r2 = rx * rx + ry * ry;
      c[j * mx + i] = amplitude * amplitude * std::exp(-r2 / (2.0 * length_scale * length_scale));
    }
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  for (auto& z : w) z = n01(rng);

  auto* cp = reinterpret_cast<fftw_complex*>(c.data());
  auto* wp = reinterpret_cast<fftw_complex*>(w.data());
  fftw_plan fwd_c, fwd_w, inv_w;
  {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    const int n0 = static_cast<int>(my), n1 = static_cast<int>(mx);
    fwd_c = fftw_plan_dft_2d(n0, n1, cp, cp, FFTW_FORWARD, FFTW_ESTIMATE);
    fwd_w = fftw_plan_dft_2d(n0, n1, wp, wp, FFTW_FORWARD, FFTW_ESTIMATE);
    inv_w = fftw_plan_dft_2d(n0, n1, wp, wp, FFTW_BACKWARD, FFTW_ESTIMATE);
  }
  fftw_execute(fwd_c);
  fftw_execute(fwd_w);
  for (std::size_t k = 0; k < m; ++k) w[k] *= std::sqrt(std::max(c[k].real(), 0.0));
  fftw_execute(inv_w);
  {
    std::lock_guard<std::mutex> lock(detail::fftw_planner_mutex());
    fftw_destroy_plan(fwd_c);
    fftw_destroy_plan(fwd_w);
    fftw_destroy_plan(inv_w);
  }

  Array out(1, nx * ny, 0.0);
  const double scale = 1.0 / static_cast<double>(m);
  for (std::size_t j = 0; j < ny; ++j) {
    for (std::size_t i = 0; i < nx; ++i) out[j * nx + i] = w[j * mx + i].real() * scale;
  }
  return out;
}

}  // namespace diffhybrid
