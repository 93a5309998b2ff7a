// Copyright 2026 The nfspeech Authors.
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include <cmath>
#include <functional>

#include "gtest/gtest.h"
#include "nfs/autodiff.hpp"
#include "test_util.hpp"

using namespace nfs;
using namespace nfs::ad;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

// Builds scalar = sum(weights * op(x)) so every output entry gets a distinct
// upstream gradient, then compares backward() to central differences in x.
double op_gradient_error(const std::function<NodeId(Graph&, NodeId)>& op, Shape shape, double lo, double hi,
                         std::uint64_t seed) {
  Rng rng(seed);
  Graph g;
  NodeId x = g.parameter("x", shape);
  NodeId y = op(g, x);
  NodeId wts = g.constant(random_tensor(rng, g.shape(y), 0.5, 1.5));
  NodeId loss = g.sum(g.mul(y, wts));
  TensorMap bind{{"x", random_tensor(rng, shape, lo, hi)}};
  auto grads = backward(g, forward(g, bind), loss);
  auto f = [&](const std::vector<double>& xv) {
    TensorMap b{{"x", Tensor(shape, xv)}};
    return forward(g, b)[loss].item();
  };
  auto numeric = test::central_differences(f, bind["x"].values());
  return test::max_relative_error(grads["x"].values(), numeric);
}

}  // namespace

TEST(Forward, IdentityGraphEchoesInput) {
  Graph g;
  NodeId x = g.input("x", {2, 3});
  Rng rng(1);
  Tensor t = random_tensor(rng, {2, 3});
  auto ev = forward(g, {{"x", t}});
  EXPECT_EQ(ev[x], t);
}

TEST(Forward, SoftplusAtZeroIsLogTwo) {
  Graph g;
  NodeId x = g.input("x", {});
  NodeId y = g.softplus(x);
  auto ev = forward(g, {{"x", Tensor::scalar(0.0)}});
  EXPECT_NEAR(ev[y].item(), std::log(2.0), 1e-12);
}

TEST(Forward, ThreeLayerMlpMatchesStraightLineOracle) {
  Rng rng(42);
  const std::size_t batch = 5, d0 = 4, d1 = 7, d2 = 6, d3 = 3;
  Graph g;
  NodeId x = g.input("x", {batch, d0});
  NodeId h = g.leaky_relu(g.linear(x, "l0", d0, d1));
  h = g.softplus(g.linear(h, "l1", d1, d2));
  NodeId y = g.sigmoid(g.linear(h, "l2", d2, d3));

  TensorMap bind{{"x", random_tensor(rng, {batch, d0})}};
  const std::size_t dims[] = {d0, d1, d2, d3};
  for (int l = 0; l < 3; ++l) {
    bind["l" + std::to_string(l) + ".weight"] = random_tensor(rng, {dims[l], dims[l + 1]});
    bind["l" + std::to_string(l) + ".bias"] = random_tensor(rng, {1, dims[l + 1]});
  }
  auto ev = forward(g, bind);

  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> a(bind["x"].values().begin() + b * d0, bind["x"].values().begin() + (b + 1) * d0);
    for (int l = 0; l < 3; ++l) {
      const Tensor& w = bind["l" + std::to_string(l) + ".weight"];
      const Tensor& bias = bind["l" + std::to_string(l) + ".bias"];
      std::vector<double> next(dims[l + 1]);
      for (std::size_t j = 0; j < dims[l + 1]; ++j) {
        double s = bias[j];
        for (std::size_t i = 0; i < dims[l]; ++i) s += a[i] * w[i * dims[l + 1] + j];
        if (l == 0) s = s > 0 ? s : 0.2 * s;
        if (l == 1) s = std::log1p(std::exp(s));
        if (l == 2) s = 1.0 / (1.0 + std::exp(-s));
        next[j] = s;
      }
      a = next;
    }
    for (std::size_t j = 0; j < d3; ++j) EXPECT_NEAR(ev[y].at(b, j), a[j], 1e-12);
  }
}

TEST(Forward, ShapeMismatchNamesNodeAndShapes) {
  Graph g;
  NodeId a = g.input("a", {2, 3});
  NodeId b = g.input("b", {2, 3});
  try {
    g.matmul(a, b);
    FAIL() << "expected error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul node 2"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[2,3] x [2,3]"), std::string::npos) << msg;
  }
  NodeId c = g.add(a, b);
  (void)c;
  try {
    forward(g, {{"a", Tensor({3, 2})}, {"b", Tensor({2, 3})}});
    FAIL() << "expected error";
  } catch (const Error& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("\"a\""), std::string::npos) << msg;
    EXPECT_NE(msg.find("[3,2]"), std::string::npos) << msg;
  }
}

TEST(Forward, NonFiniteValueIsAnError) {
  Graph g;
  NodeId x = g.input("x", {1, 1});
  g.log(x);
  EXPECT_THROW(forward(g, {{"x", Tensor({1, 1}, -1.0)}}), Error);
}

TEST(Forward, UnboundLeafIsAnError) {
  Graph g;
  g.parameter("w", {1, 1});
  EXPECT_THROW(forward(g, {}), Error);
}

TEST(Backward, SquareAtThree) {
  Graph g;
  NodeId x = g.parameter("x", {});
  NodeId y = g.square(x);
  auto grads = backward(g, forward(g, {{"x", Tensor::scalar(3.0)}}), y);
  EXPECT_NEAR(grads["x"].item(), 6.0, 1e-12);
}

TEST(Backward, SumOfSinIsCos) {
  Rng rng(3);
  Graph g;
  NodeId x = g.parameter("x", {4, 5});
  NodeId y = g.sum(g.sin(x));
  TensorMap bind{{"x", random_tensor(rng, {4, 5}, -3, 3)}};
  auto grads = backward(g, forward(g, bind), y);
  for (std::size_t i = 0; i < 20; ++i) EXPECT_NEAR(grads["x"][i], std::cos(bind["x"][i]), 1e-12);
}

TEST(Backward, NonScalarOutputIsAnError) {
  Graph g;
  NodeId x = g.parameter("x", {2, 2});
  NodeId y = g.exp(x);
  auto ev = forward(g, {{"x", Tensor({2, 2})}});
  EXPECT_THROW(backward(g, ev, y), Error);
}

TEST(Backward, UnusedParameterGetsZeroGradient) {
  Graph g;
  NodeId x = g.parameter("x", {});
  g.parameter("unused", {2, 2});
  NodeId y = g.square(x);
  auto grads = backward(g, forward(g, {{"x", Tensor::scalar(1.0)}, {"unused", Tensor({2, 2}, 5.0)}}), y);
  EXPECT_EQ(grads["unused"], Tensor({2, 2}));
}

// Every supported op against central differences, away from kinks.
TEST(Backward, EveryOpMatchesFiniteDifferences) {
  using Build = std::function<NodeId(Graph&, NodeId)>;
  struct Case {
    const char* name;
    Build build;
    double lo, hi;
  };
  const Shape s{3, 4};
  std::vector<Case> cases = {
      {"sin", [](Graph& g, NodeId x) { return g.sin(x); }, -2, 2},
      {"cos", [](Graph& g, NodeId x) { return g.cos(x); }, -2, 2},
      {"exp", [](Graph& g, NodeId x) { return g.exp(x); }, -1, 1},
      {"log", [](Graph& g, NodeId x) { return g.log(x); }, 0.5, 2},
      {"softplus", [](Graph& g, NodeId x) { return g.softplus(x); }, -3, 3},
      {"sigmoid", [](Graph& g, NodeId x) { return g.sigmoid(x); }, -3, 3},
      {"leaky_relu", [](Graph& g, NodeId x) { return g.leaky_relu(x); }, 0.1, 1},
      {"leaky_relu_neg", [](Graph& g, NodeId x) { return g.leaky_relu(x); }, -1, -0.1},
      {"square", [](Graph& g, NodeId x) { return g.square(x); }, -2, 2},
      {"scale", [](Graph& g, NodeId x) { return g.scale(x, -1.7); }, -2, 2},
      {"sum", [](Graph& g, NodeId x) { return g.sum(g.square(x)); }, -2, 2},
      {"mean", [](Graph& g, NodeId x) { return g.mean(g.square(x)); }, -2, 2},
      {"sum_axis0", [](Graph& g, NodeId x) { return g.square(g.sum(x, 0)); }, -2, 2},
      {"sum_axis1", [](Graph& g, NodeId x) { return g.square(g.sum(x, 1)); }, -2, 2},
      {"add", [](Graph& g, NodeId x) { return g.add(x, g.square(x)); }, -2, 2},
      {"sub", [](Graph& g, NodeId x) { return g.sub(g.sin(x), g.square(x)); }, -2, 2},
      {"mul", [](Graph& g, NodeId x) { return g.mul(g.sin(x), g.cos(x)); }, -2, 2},
      {"matmul",
       [](Graph& g, NodeId x) {
         Rng r(9);
         NodeId w = g.constant(random_tensor(r, {4, 2}));
         return g.matmul(g.sin(x), w);
       },
       -2, 2},
      {"matmul_rhs",
       [](Graph& g, NodeId x) {
         Rng r(10);
         NodeId a = g.constant(random_tensor(r, {2, 3}));
         return g.matmul(a, g.square(x));
       },
       -2, 2},
      {"concat0", [](Graph& g, NodeId x) { return g.concat(g.sin(x), g.square(x), 0); }, -2, 2},
      {"concat1", [](Graph& g, NodeId x) { return g.concat(g.square(x), g.sin(x), 1); }, -2, 2},
      {"slice0", [](Graph& g, NodeId x) { return g.square(g.slice(x, 0, 1, 3)); }, -2, 2},
      {"slice1", [](Graph& g, NodeId x) { return g.square(g.slice(x, 1, 0, 2)); }, -2, 2},
      {"broadcast_row",
       [](Graph& g, NodeId x) { return g.square(g.broadcast(g.sum(x, 0), {5, 4})); }, -2, 2},
      {"broadcast_scalar", [](Graph& g, NodeId x) { return g.broadcast(g.mean(g.sin(x)), {2, 2}); }, -2, 2},
      {"gather",
       [](Graph& g, NodeId x) {
         return g.square(g.gather(x, {0, 5, 5, 11, 3, 2}, {2, 3}));
       },
       -2, 2},
  };
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    const double err = op_gradient_error(c.build, s, c.lo, c.hi, seed++);
    EXPECT_LT(err, 1e-6) << c.name;
  }
}

TEST(Backward, RandomCompositeGraphMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(seed);
    Graph g;
    NodeId x = g.input("x", {6, 3});
    NodeId h = g.softplus(g.linear(x, "a", 3, 8));
    h = g.mul(g.sin(h), g.sigmoid(g.linear(h, "b", 8, 8)));
    NodeId y = g.linear(h, "c", 8, 2);
    NodeId loss = g.mean(g.square(g.sub(y, g.constant(random_tensor(rng, {6, 2})))));
    TensorMap bind{{"x", random_tensor(rng, {6, 3})},
                   {"a.weight", random_tensor(rng, {3, 8})},
                   {"a.bias", random_tensor(rng, {1, 8})},
                   {"b.weight", random_tensor(rng, {8, 8})},
                   {"b.bias", random_tensor(rng, {1, 8})},
                   {"c.weight", random_tensor(rng, {8, 2})},
                   {"c.bias", random_tensor(rng, {1, 2})}};
    auto grads = backward(g, forward(g, bind), loss);
    for (const auto& [name, grad] : grads) {
      auto f = [&, name = name](const std::vector<double>& v) {
        TensorMap b = bind;
        b[name] = Tensor(b[name].shape(), v);
        return forward(g, b)[loss].item();
      };
      auto numeric = test::central_differences(f, bind[name].values());
      EXPECT_LT(test::max_relative_error(grad.values(), numeric), 1e-6) << name << " seed " << seed;
    }
  }
}

TEST(Backward, RepeatedRunsAreBitIdentical) {
  Rng rng(77);
  Graph g;
  NodeId x = g.input("x", {4, 4});
  NodeId y = g.mean(g.square(g.softplus(g.linear(x, "l", 4, 4))));
  TensorMap bind{{"x", random_tensor(rng, {4, 4})},
                 {"l.weight", random_tensor(rng, {4, 4})},
                 {"l.bias", random_tensor(rng, {1, 4})}};
  auto a = backward(g, forward(g, bind), y);
  auto b = backward(g, forward(g, bind), y);
  EXPECT_EQ(a, b);
}

TEST(Adam, ZeroGradientLeavesParametersUnchanged) {
  TensorMap p{{"w", Tensor({2, 2}, 0.7)}};
  TensorMap g{{"w", Tensor({2, 2}, 0.0)}};
  Adam opt({.lr = 1e-3});
  opt.step(p, g);
  EXPECT_EQ(p["w"], Tensor({2, 2}, 0.7));
  EXPECT_EQ(opt.steps(), 1);
}

TEST(Adam, FirstStepMatchesHandComputation) {
  // m1 = (1-b1) g, v1 = (1-b2) g^2; bias correction gives g / (|g| + eps').
  const double lr = 0.01, gv = -0.3, eps = 1e-8;
  TensorMap p{{"w", Tensor::scalar(2.0)}};
  TensorMap g{{"w", Tensor::scalar(gv)}};
  Adam opt({.lr = lr});
  opt.step(p, g);
  const double m_hat = (1 - 0.9) * gv / (1 - 0.9);
  const double v_hat = (1 - 0.999) * gv * gv / (1 - 0.999);
  EXPECT_NEAR(p["w"].item(), 2.0 - lr * m_hat / (std::sqrt(v_hat) + eps), 1e-15);
  EXPECT_NEAR(p["w"].item(), 2.0 + lr, 1e-9);
}

TEST(Adam, IdenticalGradientsGiveIdenticalUpdates) {
  TensorMap p{{"a", Tensor({3}, 1.0)}, {"b", Tensor({3}, 1.0)}};
  TensorMap g{{"a", Tensor({3}, 0.25)}, {"b", Tensor({3}, 0.25)}};
  Adam opt({.lr = 1e-2});
  for (int i = 0; i < 3; ++i) opt.step(p, g);
  EXPECT_EQ(p["a"], p["b"]);
}

TEST(Checkpoint, RoundTripPreservesNamedTensors) {
  Rng rng(5);
  TensorMap t{{"alpha", random_tensor(rng, {3, 4})}, {"beta.bias", random_tensor(rng, {1, 7})},
              {"scalar", Tensor::scalar(-2.5)}};
  auto dir = test::scratch_dir("checkpoint");
  const std::string path = (dir / "p.nfsp").string();
  save_checkpoint(path, t);
  EXPECT_EQ(load_checkpoint(path), t);
}

TEST(Checkpoint, RejectsBadMagic) {
  auto dir = test::scratch_dir("checkpoint_bad");
  const std::string path = (dir / "bad.nfsp").string();
  std::ofstream(path) << "NOPE....";
  EXPECT_THROW(load_checkpoint(path), Error);
}
