#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>
#include <string>

#include "diffhybrid/autodiff.hpp"
#include "diffhybrid/neural.hpp"

using namespace diffhybrid;
using ad::Tape;
using ad::Var;

namespace {

Array random_array(std::mt19937_64& rng, std::size_t r, std::size_t c, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Array a(r, c);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = u(rng);
  return a;
}

/// Scalarizes an elementwise op with fixed random weights so every output
/// entry contributes to the gradient.
double op_gradcheck(const std::function<Var(const Var&)>& op, const Array& x, const Array& w) {
  const ad::ScalarObjective f = [&](Tape& t, const Var& th) {
    const Var xv = reshape(th, x.rows(), x.cols());
    const Var y = op(xv);
    const Var wv = t.leaf(reshape(w, y.shape().rows, y.shape().cols));
    return sum(y * wv);
  };
  return ad::gradcheck(f, x.values(), 1e-4).max_rel_error;
}

}  // namespace

TEST(Tape, ForwardValues) {
  Tape t;
  const Var x = t.leaf(Array::scalar(3.0));
  EXPECT_DOUBLE_EQ(t.record(ad::Op::square, {x}).value().item(), 9.0);

  Array eye(2, 2, 0.0);
  eye(0, 0) = eye(1, 1) = 1.0;
  const Var v = t.leaf(Array::column(std::vector<double>{4.0, -5.0}));
  const Var y = matmul(t.leaf(eye), v);
  EXPECT_DOUBLE_EQ(y.value()[0], 4.0);
  EXPECT_DOUBLE_EQ(y.value()[1], -5.0);

  EXPECT_NEAR(softplus(t.leaf(Array::scalar(0.0))).value().item(), std::log(2.0), 1e-15);
}

TEST(Tape, BasicDerivatives) {
  Tape t;
  const Var x = t.leaf(Array::scalar(3.0));
  EXPECT_DOUBLE_EQ(t.backward(square(x)).wrt(x).item(), 6.0);
  Tape t2;
  const Var z = t2.leaf(Array::scalar(0.0));
  EXPECT_DOUBLE_EQ(t2.backward(tanh(z)).wrt(z).item(), 1.0);
}

TEST(Tape, ShapeMismatchNamesOpcodeAndShapes) {
  Tape t;
  const Var a = t.leaf(Array(1, 2, 1.0));
  const Var b = t.leaf(Array(1, 3, 1.0));
  try {
    (void)(a + b);
    FAIL() << "expected a shape error";
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("add"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1x2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("1x3"), std::string::npos) << msg;
  }
}

TEST(Tape, NonScalarRootRejected) {
  Tape t;
  const Var a = t.leaf(Array(1, 2, 1.0));
  EXPECT_THROW((void)t.backward(a), ConfigError);
}

TEST(Tape, NodesAreTopologicallyOrdered) {
  Tape t;
  const Var x = t.leaf(Array::row({0.3, -0.7}));
  const Var y = sum(tanh(x) * x + exp(x));
  (void)y;
  for (int id = 0; id < static_cast<int>(t.size()); ++id) {
    for (int in : t.inputs(id)) EXPECT_LT(in, id);
  }
}

TEST(Tape, IndependentSubgraphsConcatenate) {
  const Array av = Array::row({0.4, -1.2, 0.9});
  const Array bv = Array::row({1.5, 0.2});
  Tape joint;
  const Var a = joint.leaf(av), b = joint.leaf(bv);
  const auto g = joint.backward(sum(sin(a) * a) + sum(exp(b)));
  Tape ta, tb;
  const Var a1 = ta.leaf(av);
  const Var b1 = tb.leaf(bv);
  const Array ga = ta.backward(sum(sin(a1) * a1)).wrt(a1);
  const Array gb = tb.backward(sum(exp(b1))).wrt(b1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g.wrt(a)[i], ga[i]);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_EQ(g.wrt(b)[i], gb[i]);
}

TEST(Tape, ReplayIsBitIdentical) {
  auto run = [] {
    Tape t;
    const Var x = t.leaf(Array::row({0.1, 0.2, -0.3}));
    const Var y = sum(softplus(x * 3.0) / (cos(x) + 2.0));
    return std::make_pair(y.value().item(), t.backward(y).wrt(x).storage());
  };
  const auto r1 = run(), r2 = run();
  EXPECT_EQ(r1.first, r2.first);
  EXPECT_EQ(r1.second, r2.second);
}

TEST(Gradcheck, QuadraticIsExact) {
  const std::vector<double> theta{1.0, 2.0};
  const auto r = ad::gradcheck([](Tape&, const Var& th) { return sum(square(th)); }, theta);
  EXPECT_LT(r.max_rel_error, 1e-10);
  EXPECT_EQ(r.n_params, 2u);
  EXPECT_DOUBLE_EQ(r.analytic[1], 4.0);
}

TEST(Gradcheck, ClampedSqrtHasFiniteGradient) {
  Tape t;
  const Var v = t.leaf(Array::row({0.0, 1e-20, 4.0}));
  const Array g = t.backward(sum(sqrt(v))).wrt(v);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_TRUE(std::isfinite(g[i]));
  EXPECT_DOUBLE_EQ(g[0], 0.0);
  EXPECT_DOUBLE_EQ(g[1], 0.0);
  EXPECT_DOUBLE_EQ(g[2], 0.25);
  const Var l = t.leaf(Array::scalar(0.0));
  EXPECT_TRUE(std::isfinite(log(l).value().item()));
  EXPECT_DOUBLE_EQ(t.backward(log(l)).wrt(l).item(), 0.0);
}

TEST(Gradcheck, NonFiniteObjectiveNamesParameter) {
  const std::vector<double> theta{1.0, 2e-3};
  try {
    (void)ad::gradcheck([](Tape& t, const Var& th) { return sum(t.leaf(Array(2, 1, 1.0)) / th); },
                        theta, 1e-3);
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter 1"), std::string::npos) << e.what();
  }
}

// Every opcode against finite differences on 100 random inputs.
TEST(GradcheckProperty, EveryOpcodeMatchesFiniteDifferences) {
  std::mt19937_64 rng(42);
  const auto sm = std::make_shared<const SparseMatrix>(
      3, std::vector<std::vector<SparseMatrix::Entry>>{{{0, 1.0}, {2, -2.0}}, {{1, 0.5}}});
  const auto idx = std::make_shared<const std::vector<std::size_t>>(std::vector<std::size_t>{2, 0, 2});
  struct Case {
    std::string name;
    double lo, hi;
    std::size_t rows, cols;
    std::function<Var(const Var&)> op;
  };
  const std::vector<Case> cases = {
      {"add", -2, 2, 1, 4, [](const Var& x) { return x + x * x; }},
      {"sub", -2, 2, 1, 4, [](const Var& x) { return x * x - x; }},
      {"mul", -2, 2, 1, 4, [](const Var& x) { return x * sin(x); }},
      {"div", -2, 2, 1, 4, [](const Var& x) { return sin(x) / (square(x) + 1.0); }},
      {"neg", -2, 2, 1, 4, [](const Var& x) { return -x; }},
      {"matmul", -2, 2, 2, 2, [](const Var& x) { return matmul(x, x); }},
      {"sum", -2, 2, 2, 3, [](const Var& x) { return sum(x * x); }},
      {"mean", -2, 2, 2, 3, [](const Var& x) { return mean(x * x); }},
      {"square", -2, 2, 1, 4, [](const Var& x) { return square(x); }},
      {"sqrt", 0.1, 2, 1, 4, [](const Var& x) { return sqrt(x); }},
      {"exp", -2, 2, 1, 4, [](const Var& x) { return exp(x); }},
      {"log", 0.1, 2, 1, 4, [](const Var& x) { return log(x); }},
      {"sin", -2, 2, 1, 4, [](const Var& x) { return sin(x); }},
      {"cos", -2, 2, 1, 4, [](const Var& x) { return cos(x); }},
      {"tanh", -2, 2, 1, 4, [](const Var& x) { return tanh(x); }},
      {"softplus", -2, 2, 1, 4, [](const Var& x) { return softplus(x); }},
      {"pow", -2, 2, 1, 4, [](const Var& x) { return pow(x, 3.0); }},
      {"scale", -2, 2, 1, 4, [](const Var& x) { return square(x) * 2.5; }},
      {"shift", -2, 2, 1, 4, [](const Var& x) { return square(x + 0.5); }},
      {"clamp_min", -2, 2, 1, 4, [](const Var& x) { return square(clamp_min(x, -3.0)); }},
      {"concat", -2, 2, 1, 3,
       [](const Var& x) {
         const Var parts[] = {x, square(x)};
         return concat_rows(parts);
       }},
      {"slice", -2, 2, 3, 2, [](const Var& x) { return square(slice_rows(x, 1, 3)); }},
      {"broadcast", -2, 2, 2, 1, [](const Var& x) { return square(broadcast_cols(x, 3)); }},
      {"reshape", -2, 2, 2, 3, [](const Var& x) { return square(reshape(x, 3, 2)); }},
      {"linear_map", -2, 2, 2, 3, [sm](const Var& x) { return square(apply(sm, x)); }},
      {"gather", -2, 2, 2, 3, [idx](const Var& x) { return square(gather(x, idx)); }},
  };
  for (const auto& c : cases) {
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const Array x = random_array(rng, c.rows, c.cols, c.lo, c.hi);
      Tape probe;
      const Shape out = c.op(probe.leaf(x)).shape();
      const Array w = random_array(rng, out.rows, out.cols, 0.5, 1.5);
      worst = std::max(worst, op_gradcheck(c.op, x, w));
    }
    EXPECT_LT(worst, 1e-6) << c.name;
  }
}

// Two-layer moment MLP under a Gaussian NLL.
TEST(GradcheckProperty, MlpNegativeLogLikelihood) {
  const MomentMlpSpec spec{2, 1, {6, 5}};
  const std::vector<double> theta = init_params(spec, 9);
  std::mt19937_64 rng(3);
  const Array m0 = random_array(rng, 1, 4, -1, 1), m1 = random_array(rng, 1, 4, -1, 1);
  const Array v0 = random_array(rng, 1, 4, 0.1, 0.6), v1 = random_array(rng, 1, 4, 0.1, 0.6);
  const Array y = random_array(rng, 1, 4, -1, 1);
  const ad::ScalarObjective f = [&](Tape& t, const Var& th) {
    const std::vector<Var> mean{t.leaf(m0), t.leaf(m1)}, var{t.leaf(v0), t.leaf(v1)};
    const auto out = mlp_forward(spec, th, mean, var);
    const Var r = t.leaf(y) - out.mean[0];
    return sum(log(out.var[0]) * 0.5 + square(r) / (out.var[0] * 2.0));
  };
  const auto r = ad::gradcheck(f, theta);
  EXPECT_LT(r.max_rel_error, 1e-6) << "worst index " << r.worst_index;
}
