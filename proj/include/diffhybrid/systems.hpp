#pragma once

// Hybrid model assemblies: the Hamiltonian pendulum and the two-species
// reaction-diffusion system. Known physics goes through the unscented
// transform or exact linear rules, the unknown term through a moment MLP.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "diffhybrid/array.hpp"
#include "diffhybrid/errors.hpp"
#include "diffhybrid/moments.hpp"
#include "diffhybrid/neural.hpp"
#include "diffhybrid/spatial.hpp"
#include "diffhybrid/stepper.hpp"
#include "diffhybrid/unscented.hpp"

namespace diffhybrid {

enum class SystemKind { hamiltonian, reaction_diffusion };

/// `exact` replaces the network with the true unknown term (oracle runs).
enum class Surrogate { neural, exact };

inline constexpr std::string_view kSegmentDiffusion = "log_diffusion";
inline constexpr std::string_view kSegmentNetwork = "network";
inline constexpr std::string_view kSegmentInitialVariance = "log_initial_variance";

struct Segment {
  std::string name;
  std::size_t offset = 0;
  std::size_t length = 0;
};

class ParamLayout {
 public:
  void add(std::string_view name, std::size_t length) {
    segments_.push_back({std::string(name), size_, length});
    size_ += length;
  }

  std::size_t size() const { return size_; }
  const std::vector<Segment>& segments() const { return segments_; }

  const Segment* find(std::string_view name) const {
    for (const auto& s : segments_) {
      if (s.name == name) return &s;
    }
    return nullptr;
  }

  const Segment& at(std::string_view name) const {
    const Segment* s = find(name);
    if (s == nullptr) throw ConfigError("parameter layout has no segment '" + std::string(name) + "'");
    return *s;
  }

  bool has(std::string_view name) const {
    const Segment* s = find(name);
    return s != nullptr && s->length > 0;
  }

 private:
  std::vector<Segment> segments_;
  std::size_t size_ = 0;
};

struct ParamVector {
  ParamLayout layout;
  std::vector<double> values;

  std::span<const double> segment(std::string_view name) const {
    const Segment& s = layout.at(name);
    return std::span<const double>(values).subspan(s.offset, s.length);
  }
  std::span<double> segment(std::string_view name) {
    const Segment& s = layout.at(name);
    return std::span<double>(values).subspan(s.offset, s.length);
  }
};

struct SystemSpec {
  SystemKind kind = SystemKind::hamiltonian;
  GridSpec grid;
  Integrator integrator = Integrator::euler;
  Surrogate surrogate = Surrogate::neural;
  MomentMlpSpec mlp = MomentMlpSpec::ode_preset();
  UtConfig ut;
  bool train_diffusion = true;
  std::array<double, 2> diffusion{2.8e-4, 5.0e-2};  // used when not trained
  double init_log_diffusion = -6.0;
  double init_variance = 1e-2;

  static SystemSpec pendulum(double dt = 0.1) {
    SystemSpec s;
    s.kind = SystemKind::hamiltonian;
    s.grid.n_v = 2;
    s.grid.dt = dt;
    s.mlp = MomentMlpSpec::ode_preset(2, 1);
    return s;
  }

  /// Unit square by default; spacing 1/(n-1).
  static SystemSpec reaction_diffusion(std::size_t nx, std::size_t ny, double dt,
                                       double lx = 1.0, double ly = 1.0) {
    SystemSpec s;
    s.kind = SystemKind::reaction_diffusion;
    s.grid.n_x = nx;
    s.grid.n_y = ny;
    s.grid.dx = lx / static_cast<double>(nx - 1);
    s.grid.dy = ly / static_cast<double>(ny - 1);
    s.grid.dt = dt;
    s.grid.n_v = 2;
    s.mlp = MomentMlpSpec::pde_preset(2, 1);
    return s;
  }

  std::size_t n_vars() const { return 2; }
  bool is_grid() const { return kind == SystemKind::reaction_diffusion; }

  void validate() const {
    grid.validate();
    if (grid.n_v != 2) throw ConfigError("system: both systems carry 2 state variables");
    if (kind == SystemKind::hamiltonian && grid.points() != 1) {
      throw ConfigError("system: the Hamiltonian system has no spatial grid (n_x = n_y = 1)");
    }
    if (kind == SystemKind::reaction_diffusion) {
      if (grid.n_x < 3 || grid.n_y < 3) throw ConfigError("system: grid must be at least 3x3");
      if (!train_diffusion && !(diffusion[0] >= 0.0 && diffusion[1] >= 0.0)) {
        throw ConfigError("system: diffusion coefficients must be non-negative");
      }
    }
    if (surrogate == Surrogate::neural) {
      mlp.validate();
      if (mlp.inputs != 2 || mlp.outputs != 1) {
        throw ConfigError("system: the surrogate maps 2 state variables to 1 unknown term");
      }
    }
    if (!(init_variance > 0.0)) throw ConfigError("system: init_variance must be positive");
    for (std::size_t v = 0; v < 2; ++v) ut.validate(v + 1);
  }

  ParamLayout layout() const {
    ParamLayout l;
    l.add(kSegmentDiffusion, kind == SystemKind::reaction_diffusion && train_diffusion ? 2 : 0);
    l.add(kSegmentNetwork, surrogate == Surrogate::neural ? mlp.param_count() : 0);
    l.add(kSegmentInitialVariance, n_vars());
    return l;
  }

  ParamVector initial_params(std::uint64_t seed) const {
    validate();
    ParamVector p{layout(), {}};
    p.values.assign(p.layout.size(), 0.0);
    for (double& d : p.segment(kSegmentDiffusion)) d = init_log_diffusion;
    if (surrogate == Surrogate::neural) {
      const auto w = init_params(mlp, seed);
      std::copy(w.begin(), w.end(), p.segment(kSegmentNetwork).begin());
    }
    for (double& v : p.segment(kSegmentInitialVariance)) v = std::log(init_variance);
    return p;
  }
};

/// A system bound to one parameter column theta ([d x 1] Array or Var).
/// Parameter slices, broadcasts and stencils are built once per binding.
template <class A>
class HybridModel {
 public:
  HybridModel(const SystemSpec& spec, const A& theta) : spec_(spec), theta_(theta) {
    spec_.validate();
    const ParamLayout layout = spec_.layout();
    const Shape& s = value_shape(theta);
    if (s.cols != 1 || s.rows != layout.size()) {
      throw ConfigError("model: parameter column has shape " + to_string(s) + ", expected [" +
                        std::to_string(layout.size()) + "x1]");
    }
    const std::size_t n = spec_.grid.points();
    if (spec_.surrogate == Surrogate::neural) {
      const Segment& seg = layout.at(kSegmentNetwork);
      net_.emplace(bind_mlp(spec_.mlp, slice_rows(theta, seg.offset, seg.offset + seg.length)));
    }
    const Segment& v0 = layout.at(kSegmentInitialVariance);
    for (std::size_t v = 0; v < spec_.n_vars(); ++v) {
      var0_.push_back(
          broadcast_cols(exp(slice_rows(theta, v0.offset + v, v0.offset + v + 1)), n));
    }
    if (spec_.is_grid()) {
      const Segment& d = layout.at(kSegmentDiffusion);
      for (std::size_t v = 0; v < 2; ++v) {
        A dv = spec_.train_diffusion
                   ? broadcast_cols(exp(slice_rows(theta, d.offset + v, d.offset + v + 1)), n)
                   : constant_like(theta, Array(1, n, spec_.diffusion[v]));
        diffusion_sq_.push_back(square(dv));
        diffusion_.push_back(std::move(dv));
      }
      lap_.emplace(laplacian_stencil(spec_.grid));
      boundary_.emplace(spec_.grid);
    }
  }

  const SystemSpec& spec() const { return spec_; }
  const std::vector<A>& diffusion() const { return diffusion_; }

  /// Frame 0: the given means with exp(log initial variance) at every point.
  MomentField<A> initial(const std::vector<Array>& mu0) const {
    if (mu0.size() != spec_.n_vars()) {
      throw ConfigError("model: initial condition has " + std::to_string(mu0.size()) +
                        " variables, expected " + std::to_string(spec_.n_vars()));
    }
    MomentField<A> f;
    for (std::size_t v = 0; v < mu0.size(); ++v) {
      if (mu0[v].rows() != 1 || mu0[v].cols() != spec_.grid.points()) {
        throw ConfigError("model: initial condition variable " + std::to_string(v) +
                          " has shape " + to_string(mu0[v].shape()) + ", expected [1x" +
                          std::to_string(spec_.grid.points()) + "]");
      }
      f.mean.push_back(constant_like(theta_, mu0[v]));
      f.var.push_back(var0_[v]);
    }
    return spec_.is_grid() ? boundary_->enforce(f) : f;
  }

  StageMoments<A> rhs(const MomentField<A>& s) const {
    return spec_.is_grid() ? rd_rhs(s) : hamiltonian_rhs(s);
  }

  /// dx1/dt = f1 (unknown; network), dx2/dt = -sin(x1) (known; UT).
  StageMoments<A> hamiltonian_rhs(const MomentField<A>& s) const {
    StageMoments<A> k;
    if (net_) {
      MomentField<A> f1 = mlp_forward(*net_, s.mean, s.var);
      k.mean.push_back(std::move(f1.mean[0]));
      k.var.push_back(std::move(f1.var[0]));
    } else {
      UtResult<A> f1 = ut_propagate([](const std::vector<A>& x) { return std::vector<A>{x[0]}; },
                                    std::vector<A>{s.mean[1]}, std::vector<A>{s.var[1]}, spec_.ut);
      k.mean.push_back(std::move(f1.mean[0]));
      k.var.push_back(std::move(f1.var[0]));
    }
    UtResult<A> f2 = ut_propagate([](const std::vector<A>& x) { return std::vector<A>{-sin(x[0])}; },
                                  std::vector<A>{s.mean[0]}, std::vector<A>{s.var[0]}, spec_.ut);
    k.mean.push_back(std::move(f2.mean[0]));
    k.var.push_back(std::move(f2.var[0]));
    return k;
  }

  /// dv_i/dt = D_i lap(v_i) + s_i with s1 known (UT over both variables) and
  /// s2 unknown (network).
  StageMoments<A> rd_rhs(const MomentField<A>& s) const {
    const MomentField<A> lap = affine_propagate(s, *lap_);
    const UtResult<A> s1 = ut_propagate(
        [](const std::vector<A>& x) {
          return std::vector<A>{x[0] - x[0] * x[0] * x[0] - x[1] - 0.005};
        },
        s.mean, s.var, spec_.ut);
    A s2_mean, s2_var;
    if (net_) {
      MomentField<A> o = mlp_forward(*net_, s.mean, s.var);
      s2_mean = std::move(o.mean[0]);
      s2_var = std::move(o.var[0]);
    } else {
      UtResult<A> o = ut_propagate(
          [](const std::vector<A>& x) { return std::vector<A>{(x[0] - x[1]) * 10.0}; }, s.mean,
          s.var, spec_.ut);
      s2_mean = std::move(o.mean[0]);
      s2_var = std::move(o.var[0]);
    }
    StageMoments<A> k;
    k.mean.push_back(diffusion_[0] * lap.mean[0] + s1.mean[0]);
    k.var.push_back(diffusion_sq_[0] * lap.var[0] + s1.var[0]);
    k.mean.push_back(diffusion_[1] * lap.mean[1] + s2_mean);
    k.var.push_back(diffusion_sq_[1] * lap.var[1] + s2_var);
    return k;
  }

  /// Frames 0..steps.
  std::vector<MomentField<A>> rollout(const std::vector<Array>& mu0, std::size_t steps) const {
    std::vector<MomentField<A>> frames;
    frames.reserve(steps + 1);
    frames.push_back(initial(mu0));
    const double dt = spec_.grid.dt;
    auto f = [this](const MomentField<A>& st, double) { return rhs(st); };
    for (std::size_t k = 1; k <= steps; ++k) {
      const double t = static_cast<double>(k - 1) * dt;
      MomentField<A> next;
      try {
        next = integrate_step(spec_.integrator, frames.back(), f, t, dt);
      } catch (const NumericalError& e) {
        throw NumericalError("rollout: step " + std::to_string(k) + ": " + e.what());
      }
      if (spec_.is_grid()) next = boundary_->enforce(next);
      if (!all_finite(next)) {
        throw NumericalError("rollout: non-finite state at step " + std::to_string(k));
      }
      frames.push_back(std::move(next));
    }
    return frames;
  }

 private:
  SystemSpec spec_;
  A theta_;
  std::optional<MlpWeights<A>> net_;
  std::vector<A> var0_;
  std::vector<A> diffusion_;
  std::vector<A> diffusion_sq_;
  std::optional<LinearStencil> lap_;
  std::optional<NeumannBoundary> boundary_;
};

template <class A>
std::vector<MomentField<A>> rollout(const SystemSpec& spec, const A& theta,
                                    const std::vector<Array>& mu0, std::size_t steps) {
  if (steps == 0) throw ConfigError("rollout: steps must be at least 1");
  return HybridModel<A>(spec, theta).rollout(mu0, steps);
}

/// Eager rollout from a flat parameter vector.
inline std::vector<Field> rollout(const SystemSpec& spec, std::span<const double> theta,
                                  const std::vector<Array>& mu0, std::size_t steps) {
  return rollout(spec, Array::column(theta), mu0, steps);
}

}  // namespace diffhybrid
