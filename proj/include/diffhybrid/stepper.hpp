#pragma once

#include <cstddef>
#include <string>
#include <string_view>

#include "diffhybrid/errors.hpp"
#include "diffhybrid/moments.hpp"

namespace diffhybrid {

/// Time derivative moments (mean rate, variance rate) per variable.
template <class A>
using StageMoments = MomentField<A>;

enum class Integrator { euler, rk4 };

inline Integrator parse_integrator(std::string_view name) {
  if (name == "euler") return Integrator::euler;
  if (name == "rk4") return Integrator::rk4;
  throw ConfigError("unknown integrator '" + std::string(name) + "' (expected euler or rk4)");
}

inline std::string_view integrator_name(Integrator i) {
  return i == Integrator::euler ? "euler" : "rk4";
}

namespace detail {

template <class A>
void require_finite_stage(const StageMoments<A>& k, const char* where) {
  if (!all_finite(k)) throw NumericalError(std::string(where) + ": non-finite stage moments");
}

/// (mean + a*dt*k_mean, var + (a*dt)^2*k_var)
template <class A>
MomentField<A> advance(const MomentField<A>& s, const StageMoments<A>& k, double h) {
  require_compatible(s, k, "stepper");
  MomentField<A> out;
  for (std::size_t v = 0; v < s.n_vars(); ++v) {
    out.mean.push_back(s.mean[v] + k.mean[v] * h);
    out.var.push_back(s.var[v] + k.var[v] * (h * h));
  }
  return out;
}

}  // namespace detail

/// rhs(state, t) -> StageMoments
template <class A, class Rhs>
MomentField<A> euler_step(const MomentField<A>& state, Rhs&& rhs, double t, double dt) {
  if (!(dt > 0.0)) throw ConfigError("euler_step: dt must be positive");
  const StageMoments<A> k = rhs(state, t);
  detail::require_finite_stage(k, "euler_step");
  return detail::advance(state, k, dt);
}

template <class A, class Rhs>
MomentField<A> rk4_step(const MomentField<A>& state, Rhs&& rhs, double t, double dt) {
  if (!(dt > 0.0)) throw ConfigError("rk4_step: dt must be positive");
  const StageMoments<A> k1 = rhs(state, t);
  detail::require_finite_stage(k1, "rk4_step");
  const StageMoments<A> k2 = rhs(detail::advance(state, k1, 0.5 * dt), t + 0.5 * dt);
  detail::require_finite_stage(k2, "rk4_step");
  const StageMoments<A> k3 = rhs(detail::advance(state, k2, 0.5 * dt), t + 0.5 * dt);
  detail::require_finite_stage(k3, "rk4_step");
  const StageMoments<A> k4 = rhs(detail::advance(state, k3, dt), t + dt);
  detail::require_finite_stage(k4, "rk4_step");

  MomentField<A> out;
  for (std::size_t v = 0; v < state.n_vars(); ++v) {
    const A dm = k1.mean[v] + k2.mean[v] * 2.0 + k3.mean[v] * 2.0 + k4.mean[v];
    const A dv = k1.var[v] + k2.var[v] * 4.0 + k3.var[v] * 4.0 + k4.var[v];
    out.mean.push_back(state.mean[v] + dm * (dt / 6.0));
    out.var.push_back(state.var[v] + dv * (dt * dt / 36.0));
  }
  return out;
}

template <class A, class Rhs>
MomentField<A> integrate_step(Integrator method, const MomentField<A>& state, Rhs&& rhs, double t,
                              double dt) {
  return method == Integrator::euler ? euler_step(state, rhs, t, dt)
                                     : rk4_step(state, rhs, t, dt);
}

}  // namespace diffhybrid
