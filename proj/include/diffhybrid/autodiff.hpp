#pragma once

// Tape-based reverse-mode differentiation over dense Arrays.
//
// A Tape owns every node; a Var is a (tape, id) handle. Nodes are appended in
// evaluation order, so every input id is smaller than its consumer's id and the
// backward sweep is a single pass over decreasing ids. Tapes are not shared
// between threads; build one per rollout.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "diffhybrid/array.hpp"
#include "diffhybrid/errors.hpp"

namespace diffhybrid::ad {

enum class Op : std::uint8_t {
  leaf,
  add,
  sub,
  mul,
  div,
  neg,
  matmul,
  sum,
  mean,
  square,
  sqrt,
  exp,
  log,
  sin,
  cos,
  tanh,
  softplus,
  pow,
  scale,
  shift,
  clamp_min,
  concat,
  slice,
  broadcast,
  reshape,
  linear_map,
  gather,
};

inline std::string_view op_name(Op op) {
  switch (op) {
    case Op::leaf: return "leaf";
    case Op::add: return "add";
    case Op::sub: return "sub";
    case Op::mul: return "mul";
    case Op::div: return "div";
    case Op::neg: return "neg";
    case Op::matmul: return "matmul";
    case Op::sum: return "sum";
    case Op::mean: return "mean";
    case Op::square: return "square";
    case Op::sqrt: return "sqrt";
    case Op::exp: return "exp";
    case Op::log: return "log";
    case Op::sin: return "sin";
    case Op::cos: return "cos";
    case Op::tanh: return "tanh";
    case Op::softplus: return "softplus";
    case Op::pow: return "pow";
    case Op::scale: return "scale";
    case Op::shift: return "shift";
    case Op::clamp_min: return "clamp_min";
    case Op::concat: return "concat";
    case Op::slice: return "slice";
    case Op::broadcast: return "broadcast";
    case Op::reshape: return "reshape";
    case Op::linear_map: return "linear_map";
    case Op::gather: return "gather";
  }
  return "unknown";
}

/// Non-array operands of an opcode. `k` is the constant of pow/scale/shift/
/// clamp_min; `i0`/`i1` are slice bounds, broadcast width or reshape dims.
struct OpArgs {
  double k = 0.0;
  std::size_t i0 = 0;
  std::size_t i1 = 0;
  std::shared_ptr<const SparseMatrix> map;
  std::shared_ptr<const std::vector<std::size_t>> index;

  static OpArgs constant(double k) {
    OpArgs a;
    a.k = k;
    return a;
  }
  static OpArgs range(std::size_t i0, std::size_t i1 = 0) {
    OpArgs a;
    a.i0 = i0;
    a.i1 = i1;
    return a;
  }
  static OpArgs with_map(std::shared_ptr<const SparseMatrix> m) {
    OpArgs a;
    a.map = std::move(m);
    return a;
  }
  static OpArgs with_index(std::shared_ptr<const std::vector<std::size_t>> idx) {
    OpArgs a;
    a.index = std::move(idx);
    return a;
  }
};

class Tape;

class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Array& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Gradients of a scalar root with respect to every node on the tape.
class Gradients {
 public:
  Gradients(std::vector<Array> grads, std::vector<Shape> shapes)
      : grads_(std::move(grads)), shapes_(std::move(shapes)) {}

  /// Gradient for `v`; zeros when `v` does not influence the root.
  Array wrt(const Var& v) const {
    const auto i = static_cast<std::size_t>(v.id());
    if (grads_[i].empty()) return Array(shapes_[i].rows, shapes_[i].cols, 0.0);
    return grads_[i];
  }

  bool reached(const Var& v) const { return !grads_[static_cast<std::size_t>(v.id())].empty(); }

 private:
  std::vector<Array> grads_;
  std::vector<Shape> shapes_;
};

class Tape {
 public:
  Tape() { nodes_.reserve(1024); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = delete;
  Tape& operator=(Tape&&) = delete;

  Var leaf(Array value) {
    nodes_.push_back(Node{Op::leaf, {}, std::move(value), {}});
    return Var(this, static_cast<int>(nodes_.size() - 1));
  }

  /// Appends a node, computing its forward value from the inputs' values.
  Var record(Op op, std::span<const Var> inputs, OpArgs args = {});

  Var record(Op op, std::initializer_list<Var> inputs, OpArgs args = {}) {
    return record(op, std::span<const Var>(inputs.begin(), inputs.size()), std::move(args));
  }

  Gradients backward(const Var& root) const;

  std::size_t size() const { return nodes_.size(); }
  const Array& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  Op op(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }
  std::span<const int> inputs(int id) const { return nodes_[static_cast<std::size_t>(id)].inputs; }

 private:
  struct Node {
    Op op;
    std::vector<int> inputs;
    Array value;
    OpArgs args;
  };

  const Array& in(const Node& n, std::size_t k) const {
    return nodes_[static_cast<std::size_t>(n.inputs[k])].value;
  }

  std::vector<Node> nodes_;
};

inline const Array& Var::value() const {
  if (tape_ == nullptr) throw ConfigError("Var: use of an unbound variable");
  return tape_->value(id_);
}

namespace detail {

inline std::string shapes_of(std::span<const Var> inputs) {
  std::string s;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (i) s += ", ";
    s += to_string(inputs[i].shape());
  }
  return s;
}

inline void expect_arity(Op op, std::span<const Var> inputs, std::size_t n) {
  if (inputs.size() != n) {
    throw ConfigError(std::string(op_name(op)) + ": expects " + std::to_string(n) +
                      " inputs, got " + std::to_string(inputs.size()));
  }
}

inline void accumulate(Array& slot, const Array& g) {
  if (slot.empty()) {
    slot = g;
  } else {
    slot += g;
  }
}

inline Array& slot_for(std::vector<Array>& grads, int id, const Shape& shape) {
  Array& s = grads[static_cast<std::size_t>(id)];
  if (s.empty()) s = Array(shape.rows, shape.cols, 0.0);
  return s;
}

}  // namespace detail

inline Var Tape::record(Op op, std::span<const Var> inputs, OpArgs args) {
  for (const Var& v : inputs) {
    if (v.tape() != this) {
      throw ConfigError(std::string(op_name(op)) + ": input belongs to a different tape");
    }
  }
  auto value_of = [&](std::size_t k) -> const Array& { return inputs[k].value(); };
  auto binary = [&]() {
    detail::expect_arity(op, inputs, 2);
    if (op != Op::matmul && !(value_of(0).shape() == value_of(1).shape())) {
      throw ConfigError(std::string(op_name(op)) + ": shape mismatch " +
                        detail::shapes_of(inputs));
    }
  };

  Array out;
  switch (op) {
    case Op::leaf:
      throw ConfigError("leaf: use Tape::leaf");
    case Op::add: binary(); out = value_of(0) + value_of(1); break;
    case Op::sub: binary(); out = value_of(0) - value_of(1); break;
    case Op::mul: binary(); out = value_of(0) * value_of(1); break;
    case Op::div: binary(); out = value_of(0) / value_of(1); break;
    case Op::matmul:
      binary();
      if (value_of(0).cols() != value_of(1).rows()) {
        throw ConfigError("matmul: shape mismatch " + detail::shapes_of(inputs));
      }
      out = kernel::matmul(value_of(0), value_of(1));
      break;
    case Op::concat: {
      if (inputs.empty()) throw ConfigError("concat: no inputs");
      std::vector<const Array*> parts;
      parts.reserve(inputs.size());
      for (const Var& v : inputs) parts.push_back(&v.value());
      out = kernel::concat_rows(parts);
      break;
    }
    default: {
      detail::expect_arity(op, inputs, 1);
      const Array& x = value_of(0);
      switch (op) {
        case Op::neg: out = -x; break;
        case Op::sum: out = diffhybrid::sum(x); break;
        case Op::mean: out = diffhybrid::mean(x); break;
        case Op::square: out = diffhybrid::square(x); break;
        case Op::sqrt: out = diffhybrid::sqrt(x); break;
        case Op::exp: out = diffhybrid::exp(x); break;
        case Op::log: out = diffhybrid::log(x); break;
        case Op::sin: out = diffhybrid::sin(x); break;
        case Op::cos: out = diffhybrid::cos(x); break;
        case Op::tanh: out = diffhybrid::tanh(x); break;
        case Op::softplus: out = diffhybrid::softplus(x); break;
        case Op::pow: out = diffhybrid::pow(x, args.k); break;
        case Op::scale: out = x * args.k; break;
        case Op::shift: out = x + args.k; break;
        case Op::clamp_min: out = diffhybrid::clamp_min(x, args.k); break;
        case Op::slice: out = kernel::slice_rows(x, args.i0, args.i1); break;
        case Op::broadcast: out = kernel::broadcast_cols(x, args.i0); break;
        case Op::reshape: out = kernel::reshape(x, args.i0, args.i1); break;
        case Op::linear_map:
          if (!args.map) throw ConfigError("linear_map: missing map");
          out = kernel::apply(*args.map, x);
          break;
        case Op::gather:
          if (!args.index) throw ConfigError("gather: missing index");
          out = kernel::gather(x, *args.index);
          break;
        default:
          throw ConfigError(std::string(op_name(op)) + ": unsupported");
      }
    }
  }

  Node node{op, {}, std::move(out), std::move(args)};
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) node.inputs.push_back(v.id());
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

inline Gradients Tape::backward(const Var& root) const {
  if (root.tape() != this) throw ConfigError("backward: root belongs to a different tape");
  if (root.value().size() != 1) {
    throw ConfigError("backward: root must be scalar, got " + to_string(root.shape()));
  }
  std::vector<Array> grads(nodes_.size());
  grads[static_cast<std::size_t>(root.id())] = Array::scalar(1.0);

  for (int id = root.id(); id >= 0; --id) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Array& g = grads[static_cast<std::size_t>(id)];
    if (g.empty() || n.op == Op::leaf) continue;

    auto grad_in = [&](std::size_t k) -> Array& {
      const int src = n.inputs[k];
      return detail::slot_for(grads, src, nodes_[static_cast<std::size_t>(src)].value.shape());
    };
    auto elementwise = [&](std::size_t k, auto&& dfdx) {
      Array& dst = grad_in(k);
      const Array& x = in(n, k);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * dfdx(x[i], n.value[i]);
    };

    switch (n.op) {
      case Op::leaf: break;
      case Op::add:
        detail::accumulate(grads[static_cast<std::size_t>(n.inputs[0])], g);
        detail::accumulate(grads[static_cast<std::size_t>(n.inputs[1])], g);
        break;
      case Op::sub:
        detail::accumulate(grads[static_cast<std::size_t>(n.inputs[0])], g);
        detail::accumulate(grads[static_cast<std::size_t>(n.inputs[1])], -g);
        break;
      case Op::mul: {
        const Array& a = in(n, 0);
        const Array& b = in(n, 1);
        Array& da = grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
        Array& db = grad_in(1);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
        break;
      }
      case Op::div: {
        const Array& a = in(n, 0);
        const Array& b = in(n, 1);
        Array& da = grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] / b[i];
        Array& db = grad_in(1);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i] * a[i] / (b[i] * b[i]);
        break;
      }
      case Op::neg:
        detail::accumulate(grads[static_cast<std::size_t>(n.inputs[0])], -g);
        break;
      case Op::matmul: {
        kernel::matmul_nt_add(g, in(n, 1), grad_in(0));
        kernel::matmul_tn_add(in(n, 0), g, grad_in(1));
        break;
      }
      case Op::sum: {
        Array& dst = grad_in(0);
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[0];
        break;
      }
      case Op::mean: {
        Array& dst = grad_in(0);
        const double s = g[0] / static_cast<double>(dst.size());
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += s;
        break;
      }
      case Op::square:
        elementwise(0, [](double x, double) { return 2.0 * x; });
        break;
      case Op::sqrt:
        elementwise(0, [](double x, double y) { return x >= kVarianceFloor ? 0.5 / y : 0.0; });
        break;
      case Op::exp:
        elementwise(0, [](double, double y) { return y; });
        break;
      case Op::log:
        elementwise(0, [](double x, double) { return x >= kVarianceFloor ? 1.0 / x : 0.0; });
        break;
      case Op::sin:
        elementwise(0, [](double x, double) { return std::cos(x); });
        break;
      case Op::cos:
        elementwise(0, [](double x, double) { return -std::sin(x); });
        break;
      case Op::tanh:
        elementwise(0, [](double, double y) { return 1.0 - y * y; });
        break;
      case Op::softplus:
        elementwise(0, [](double x, double) { return kernel::sigmoid(x); });
        break;
      case Op::pow: {
        const double p = n.args.k;
        elementwise(0, [p](double x, double) { return p * std::pow(x, p - 1.0); });
        break;
      }
      case Op::scale: {
        const double k = n.args.k;
        elementwise(0, [k](double, double) { return k; });
        break;
      }
      case Op::shift:
        detail::accumulate(grads[static_cast<std::size_t>(n.inputs[0])], g);
        break;
      case Op::clamp_min: {
        const double lo = n.args.k;
        elementwise(0, [lo](double x, double) { return x >= lo ? 1.0 : 0.0; });
        break;
      }
      case Op::concat: {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          Array& dst = grad_in(k);
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[offset + i];
          offset += dst.size();
        }
        break;
      }
      case Op::slice: {
        Array& dst = grad_in(0);
        const std::size_t base = n.args.i0 * dst.cols();
        for (std::size_t i = 0; i < g.size(); ++i) dst[base + i] += g[i];
        break;
      }
      case Op::broadcast: {
        Array& dst = grad_in(0);
        const std::size_t width = n.args.i0;
        for (std::size_t r = 0; r < dst.rows(); ++r) {
          double acc = 0.0;
          for (std::size_t c = 0; c < width; ++c) acc += g(r, c);
          dst[r] += acc;
        }
        break;
      }
      case Op::reshape: {
        Array& dst = grad_in(0);
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        break;
      }
      case Op::linear_map: {
        Array& dst = grad_in(0);
        const SparseMatrix& m = *n.args.map;
        for (std::size_t r = 0; r < dst.rows(); ++r) {
          m.multiply_transpose_add(g.values().data() + r * m.rows(),
                                   dst.values().data() + r * m.cols());
        }
        break;
      }
      case Op::gather: {
        Array& dst = grad_in(0);
        const auto& idx = *n.args.index;
        for (std::size_t r = 0; r < dst.rows(); ++r) {
          for (std::size_t j = 0; j < idx.size(); ++j) dst(r, idx[j]) += g(r, j);
        }
        break;
      }
    }
  }

  std::vector<Shape> shapes;
  shapes.reserve(nodes_.size());
  for (const Node& n : nodes_) shapes.push_back(n.value.shape());
  return Gradients(std::move(grads), std::move(shapes));
}

// Operator overloads and free functions mirroring the eager Array API.

namespace detail {
inline Tape& tape_of(const Var& v) {
  if (!v.valid()) throw ConfigError("Var: use of an unbound variable");
  return *v.tape();
}
inline Var unary(Op op, const Var& x, OpArgs args = {}) {
  return tape_of(x).record(op, {x}, std::move(args));
}
inline Var binary(Op op, const Var& a, const Var& b) { return tape_of(a).record(op, {a, b}); }
}  // namespace detail

inline Var operator+(const Var& a, const Var& b) { return detail::binary(Op::add, a, b); }
inline Var operator-(const Var& a, const Var& b) { return detail::binary(Op::sub, a, b); }
inline Var operator*(const Var& a, const Var& b) { return detail::binary(Op::mul, a, b); }
inline Var operator/(const Var& a, const Var& b) { return detail::binary(Op::div, a, b); }
inline Var operator-(const Var& a) { return detail::unary(Op::neg, a); }
inline Var operator*(const Var& a, double k) { return detail::unary(Op::scale, a, OpArgs::constant(k)); }
inline Var operator*(double k, const Var& a) { return a * k; }
inline Var operator/(const Var& a, double k) { return a * (1.0 / k); }
inline Var operator+(const Var& a, double k) { return detail::unary(Op::shift, a, OpArgs::constant(k)); }
inline Var operator+(double k, const Var& a) { return a + k; }
inline Var operator-(const Var& a, double k) { return a + (-k); }
inline Var operator-(double k, const Var& a) { return (-a) + k; }

inline Var matmul(const Var& a, const Var& b) { return detail::binary(Op::matmul, a, b); }
inline Var sum(const Var& x) { return detail::unary(Op::sum, x); }
inline Var mean(const Var& x) { return detail::unary(Op::mean, x); }
inline Var square(const Var& x) { return detail::unary(Op::square, x); }
inline Var sqrt(const Var& x) { return detail::unary(Op::sqrt, x); }
inline Var exp(const Var& x) { return detail::unary(Op::exp, x); }
inline Var log(const Var& x) { return detail::unary(Op::log, x); }
inline Var sin(const Var& x) { return detail::unary(Op::sin, x); }
inline Var cos(const Var& x) { return detail::unary(Op::cos, x); }
inline Var tanh(const Var& x) { return detail::unary(Op::tanh, x); }
inline Var softplus(const Var& x) { return detail::unary(Op::softplus, x); }
inline Var pow(const Var& x, double p) { return detail::unary(Op::pow, x, OpArgs::constant(p)); }
inline Var clamp_min(const Var& x, double lo) { return detail::unary(Op::clamp_min, x, OpArgs::constant(lo)); }
inline Var slice_rows(const Var& x, std::size_t r0, std::size_t r1) {
  return detail::unary(Op::slice, x, OpArgs::range(r0, r1));
}
inline Var broadcast_cols(const Var& x, std::size_t n) {
  return detail::unary(Op::broadcast, x, OpArgs::range(n));
}
inline Var reshape(const Var& x, std::size_t rows, std::size_t cols) {
  return detail::unary(Op::reshape, x, OpArgs::range(rows, cols));
}
inline Var apply(const std::shared_ptr<const SparseMatrix>& m, const Var& x) {
  return detail::unary(Op::linear_map, x, OpArgs::with_map(m));
}
inline Var gather(const Var& x, const std::shared_ptr<const std::vector<std::size_t>>& idx) {
  return detail::unary(Op::gather, x, OpArgs::with_index(idx));
}
inline Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("concat: no inputs");
  return detail::tape_of(parts.front()).record(Op::concat, parts);
}

/// A constant on the same tape as `like`.
inline Var constant_like(const Var& like, Array value) {
  return detail::tape_of(like).leaf(std::move(value));
}

// ---------------------------------------------------------------------------
// Finite-difference gradient audit.

struct GradcheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t n_params = 0;
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Scalar objective built on a fresh tape from a column of parameters.
using ScalarObjective = std::function<Var(Tape&, const Var& theta)>;

inline double evaluate_objective(const ScalarObjective& f, std::span<const double> theta) {
  Tape tape;
  const Var t = tape.leaf(Array::column(theta));
  const Var y = f(tape, t);
  if (y.value().size() != 1) throw ConfigError("gradcheck: objective must be scalar");
  return y.value()[0];
}

/// Compares reverse-mode gradients with a fourth-order central difference of
/// step h. Error per parameter is |analytic - numeric| / (|numeric| + 1e-12).
inline GradcheckReport gradcheck(const ScalarObjective& f, std::span<const double> theta,
                                 double h = 1e-3) {
  if (!(h > 0.0)) throw ConfigError("gradcheck: step must be positive");
  GradcheckReport report;
  report.n_params = theta.size();
  {
    Tape tape;
    const Var t = tape.leaf(Array::column(theta));
    const Var y = f(tape, t);
    if (y.value().size() != 1) throw ConfigError("gradcheck: objective must be scalar");
    if (!std::isfinite(y.value()[0])) throw NumericalError("gradcheck: objective is non-finite");
    const Array g = tape.backward(y).wrt(t);
    report.analytic.assign(g.values().begin(), g.values().end());
  }
  std::vector<double> probe(theta.begin(), theta.end());
  report.numeric.resize(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double saved = probe[i];
    double at[4];
    const double offsets[4] = {2.0, 1.0, -1.0, -2.0};
    for (int k = 0; k < 4; ++k) {
      probe[i] = saved + offsets[k] * h;
      at[k] = evaluate_objective(f, probe);
      if (!std::isfinite(at[k])) {
        throw NumericalError("gradcheck: objective non-finite when perturbing parameter " +
                             std::to_string(i));
      }
    }
    probe[i] = saved;
    const double fd = (8.0 * (at[1] - at[2]) - (at[0] - at[3])) / (12.0 * h);
    report.numeric[i] = fd;
    const double err = std::abs(report.analytic[i] - fd) / (std::abs(fd) + 1e-12);
    if (i == 0 || err > report.max_rel_error) {
      report.max_rel_error = err;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace diffhybrid::ad
