#pragma once

// Point-to-point moment MLP: (mean, variance) of L input variables at each
// point -> (mean, variance) of K outputs at the same point.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "diffhybrid/array.hpp"
#include "diffhybrid/errors.hpp"
#include "diffhybrid/moments.hpp"

namespace diffhybrid {

struct MomentMlpSpec {
  std::size_t inputs = 2;   // L state variables, fed as 2L moment features
  std::size_t outputs = 1;  // K surrogate outputs, emitted as 2K moment rows
  std::vector<std::size_t> hidden{8, 8};

  static MomentMlpSpec ode_preset(std::size_t inputs = 2, std::size_t outputs = 1) {
    return {inputs, outputs, {8, 8}};
  }
  static MomentMlpSpec pde_preset(std::size_t inputs = 2, std::size_t outputs = 1) {
    return {inputs, outputs, {32, 32}};
  }

  /// Layer widths from input features to output rows.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{2 * inputs};
    w.insert(w.end(), hidden.begin(), hidden.end());
    w.push_back(2 * outputs);
    return w;
  }

  std::size_t param_count() const {
    const auto w = widths();
    std::size_t n = 0;
    for (std::size_t i = 0; i + 1 < w.size(); ++i) n += w[i] * w[i + 1] + w[i + 1];
    return n;
  }

  void validate() const {
    if (inputs == 0 || outputs == 0) throw ConfigError("MomentMlpSpec: empty input or output");
    for (std::size_t h : hidden) {
      if (h == 0) throw ConfigError("MomentMlpSpec: hidden width must be positive");
    }
  }
};

/// Glorot-uniform weights, zero biases. Per layer the segment holds W
/// (row-major, out x in) followed by b (out).
inline std::vector<double> init_params(const MomentMlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  std::vector<double> theta;
  theta.reserve(spec.param_count());
  const auto w = spec.widths();
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w[i] + w[i + 1]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (std::size_t k = 0; k < w[i] * w[i + 1]; ++k) theta.push_back(dist(rng));
    theta.insert(theta.end(), w[i + 1], 0.0);
  }
  return theta;
}

/// Weights sliced out of a parameter column once, reused across every call of
/// a rollout.
template <class A>
struct MlpWeights {
  MomentMlpSpec spec;
  std::vector<A> weight;  // out x in
  std::vector<A> bias;    // out x 1
};

template <class A>
MlpWeights<A> bind_mlp(const MomentMlpSpec& spec, const A& segment) {
  spec.validate();
  const Shape& s = value_shape(segment);
  if (s.cols != 1 || s.rows != spec.param_count()) {
    throw ConfigError("mlp: parameter segment has shape " + to_string(s) + ", expected [" +
                      std::to_string(spec.param_count()) + "x1]");
  }
  MlpWeights<A> out{spec, {}, {}};
  const auto w = spec.widths();
  std::size_t off = 0;
  for (std::size_t i = 0; i + 1 < w.size(); ++i) {
    const std::size_t nw = w[i] * w[i + 1];
    out.weight.push_back(reshape(slice_rows(segment, off, off + nw), w[i + 1], w[i]));
    off += nw;
    out.bias.push_back(slice_rows(segment, off, off + w[i + 1]));
    off += w[i + 1];
  }
  return out;
}

/// Each mean/var entry is a 1 x N row; returns K mean rows and K variance rows.
template <class A>
MomentField<A> mlp_forward(const MlpWeights<A>& net, const std::vector<A>& mean,
                           const std::vector<A>& var) {
  if (mean.size() != net.spec.inputs || var.size() != net.spec.inputs) {
    throw ConfigError("mlp_forward: expected " + std::to_string(net.spec.inputs) +
                      " input variables, got " + std::to_string(mean.size()));
  }
  std::vector<A> features;
  features.reserve(2 * mean.size());
  for (const A& m : mean) features.push_back(m);
  for (const A& v : var) features.push_back(log(v + kVarianceFloor));
  A h = concat_rows(std::span<const A>(features));
  const std::size_t n = value_shape(h).cols;

  const std::size_t layers = net.weight.size();
  for (std::size_t i = 0; i < layers; ++i) {
    A z = matmul(net.weight[i], h) + broadcast_cols(net.bias[i], n);
    h = (i + 1 < layers) ? tanh(z) : z;
  }

  MomentField<A> out;
  const std::size_t k = net.spec.outputs;
  for (std::size_t c = 0; c < k; ++c) {
    out.mean.push_back(slice_rows(h, c, c + 1));
    out.var.push_back(softplus(slice_rows(h, k + c, k + c + 1)));
  }
  return out;
}

template <class A>
MomentField<A> mlp_forward(const MomentMlpSpec& spec, const A& segment, const std::vector<A>& mean,
                           const std::vector<A>& var) {
  return mlp_forward(bind_mlp(spec, segment), mean, var);
}

}  // namespace diffhybrid
