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

// Fast invariant checks shared by `nfspeech selftest` and the acceptance
// suite. Each returns a verdict with the measured numbers.

#pragma once

#include <chrono>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "nfs/autodiff.hpp"
#include "nfs/blending.hpp"
#include "nfs/core.hpp"
#include "nfs/deformation.hpp"
#include "nfs/face_model.hpp"
#include "nfs/field.hpp"
#include "nfs/inversion.hpp"
#include "nfs/render.hpp"
#include "nfs/upsampler.hpp"

namespace nfs::checks {

struct Verdict {
  bool pass = false;
  std::string detail;
  double seconds = 0;
};

/// Verdict text with numbers at 4 significant digits.
template <typename... Args>
std::string summary(const Args&... args) {
  std::ostringstream os;
  os.precision(4);
  nfs::detail::append_all(os, args...);
  return os.str();
}

/// Runs `fn`, timing it and turning exceptions into failures.
inline Verdict timed(const std::function<Verdict()>& fn) {
  const auto start = std::chrono::steady_clock::now();
  Verdict v;
  try {
    v = fn();
  } catch (const std::exception& e) {
    v = {false, std::string("error: ") + e.what()};
  }
  v.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return v;
}

namespace detail {

inline std::vector<double> central_differences(const std::function<double(const std::vector<double>&)>& f,
                                               std::vector<double> x, double step) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + step;
    const double up = f(x);
    x[i] = keep - step;
    const double down = f(x);
    x[i] = keep;
    out[i] = (up - down) / (2.0 * step);
  }
  return out;
}

inline double max_relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a[i] - b[i]) / std::max({std::abs(a[i]), std::abs(b[i]), floor}));
  return worst;
}

inline bool bit_equal(const FeatureMap& a, const FeatureMap& b) {
  return a.same_shape(b) && a.data.size() == b.data.size() && a.opacity.size() == b.opacity.size() &&
         std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0 &&
         std::memcmp(a.opacity.data(), b.opacity.data(), a.opacity.size() * sizeof(double)) == 0;
}

}  // namespace detail

/// Homogeneous slab against c0 (1 - exp(-sigma0 L)) at 256 samples, and
/// exact transmittance and weight bounds on 10^4 random rays.
inline Verdict renderer() {
  constexpr int kSamples = 256;
  constexpr double kTolerance = 1e-3;
  const double length = 1.7, c0 = 0.6;
  double worst = 0;
  for (double sigma0 : {0.1, 0.7, 2.0, 9.0}) {
    Eigen::MatrixXd f(kSamples, 2);
    f.col(0).setConstant(c0);
    f.col(1).setConstant(1.0);
    const auto r = integrate(f, std::vector<double>(kSamples, sigma0), std::vector<double>(kSamples, length / kSamples));
    worst = std::max(worst, std::abs(r.value(0) - c0 * (1.0 - std::exp(-sigma0 * length))));
  }
  Rng rng(31);
  int violations = 0;
  for (int ray = 0; ray < 10000; ++ray) {
    const int n = 2 + static_cast<int>(rng.index(80));
    Eigen::MatrixXd f(n, 1);
    std::vector<double> s(static_cast<std::size_t>(n)), d(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      f(i, 0) = rng.uniform();
      s[static_cast<std::size_t>(i)] = rng.uniform() < 0.2 ? 0.0 : std::exp(rng.uniform(-8, 8));
      d[static_cast<std::size_t>(i)] = rng.uniform(1e-3, 0.2);
    }
    const auto r = integrate(f, s, d);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
      const auto k = static_cast<std::size_t>(i);
      if (i > 0 && r.transmittance[k] > r.transmittance[k - 1]) ++violations;
      if (r.weights[k] < 0) ++violations;
      sum += r.weights[k];
    }
    if (sum > 1.0) ++violations;
  }
  return {worst <= kTolerance && violations == 0,
          summary("homogeneous max error ", worst, " (tol ", kTolerance, "), bound violations ", violations, "/10000 rays")};
}

/// Zero vertex displacements through the real binding must leave a 64x64
/// feature map bit-identical.
inline Verdict deformation_identity() {
  const FieldBundle b = init_bundle(2);
  const StyleLatent w = mean_latent(b, 100);
  RenderSpec spec;
  spec.sampling.num_samples = 32;
  const BlendshapeBasis basis = build_toy_basis(3, 600, 8, 6);
  const VertexSet v = evaluate_shape(basis, ShapeCoeffs::zeros(basis.k_id(), basis.k_exp()));
  const VertexBinding binding = bind_face(v, basis.bbox, spec.height, spec.width);
  const DisplacementField zero = build_displacement_field(binding, vertex_displacement(v, v));
  const bool same = detail::bit_equal(render_feature_map(b, w, spec), render_feature_map(b, w, spec, &zero));
  return {same, summary(same ? "bit-identical" : "differs", " over ", spec.height, "x", spec.width, " with ",
                       binding.size(), " bound anchors")};
}

/// Exhaustive minimum of the summed XY distance over one-to-one maps.
inline std::vector<int> exhaustive_assignment(const Points3& v, const Points3& g) {
  const int m = static_cast<int>(v.rows()), n = static_cast<int>(g.rows());
  std::vector<int> assign(static_cast<std::size_t>(m)), best_assign;
  std::vector<char> used(static_cast<std::size_t>(n), 0);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(int, double)> rec = [&](int i, double acc) {
    if (acc >= best) return;
    if (i == m) {
      best = acc;
      best_assign = assign;
      return;
    }
    for (int j = 0; j < n; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      used[static_cast<std::size_t>(j)] = 1;
      assign[static_cast<std::size_t>(i)] = j;
      rec(i + 1, acc + std::hypot(v(i, 0) - g(j, 0), v(i, 1) - g(j, 1)));
      used[static_cast<std::size_t>(j)] = 0;
    }
  };
  rec(0, 0.0);
  return best_assign;
}

/// bind_vertices against exhaustive search on 50 random instances of up to
/// 8 vertices.
inline Verdict binding_oracle() {
  Rng rng(21);
  int mismatches = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const int m = 1 + static_cast<int>(rng.index(8));
    const int n = m + static_cast<int>(rng.index(3));
    auto points = [&](int count) {
      Points3 p(count, 3);
      for (int i = 0; i < count; ++i) p.row(i) << rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1);
      return p;
    };
    const Points3 v = points(m), g = points(n);
    const auto want = exhaustive_assignment(v, g);
    const VertexBinding b = bind_vertices(v, g);
    for (int i = 0; i < m; ++i)
      if (static_cast<int>(b.grid_index[static_cast<std::size_t>(i)]) != want[static_cast<std::size_t>(i)]) {
        ++mismatches;
        break;
      }
  }
  return {mismatches == 0, summary(mismatches, "/50 instances differ from exhaustive search")};
}

/// Central differences for every graph op (max relative error < 1e-6) and
/// for a composite render, upsample and image-loss chain (< 1e-4).
inline Verdict gradients() {
  using namespace ad;
  constexpr double kOpTolerance = 1e-6, kCompositeTolerance = 1e-4;
  auto random_tensor = [](Rng& rng, Shape shape, double lo, double hi) {
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = rng.uniform(lo, hi);
    return t;
  };
  using Build = std::function<NodeId(Graph&, NodeId)>;
  struct Case {
    const char* name;
    Build build;
    double lo, hi;
  };
  const std::vector<Case> cases = {
      {"sin", [](Graph& g, NodeId x) { return g.sin(x); }, -2, 2},
      {"cos", [](Graph& g, NodeId x) { return g.cos(x); }, -2, 2},
      {"exp", [](Graph& g, NodeId x) { return g.exp(x); }, -1, 1},
      {"log", [](Graph& g, NodeId x) { return g.log(x); }, 0.5, 2},
      {"softplus", [](Graph& g, NodeId x) { return g.softplus(x); }, -3, 3},
      {"sigmoid", [](Graph& g, NodeId x) { return g.sigmoid(x); }, -3, 3},
      {"leaky_relu+", [](Graph& g, NodeId x) { return g.leaky_relu(x); }, 0.1, 1},
      {"leaky_relu-", [](Graph& g, NodeId x) { return g.leaky_relu(x); }, -1, -0.1},
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
       [&](Graph& g, NodeId x) {
         Rng r(9);
         return g.matmul(g.sin(x), g.constant(random_tensor(r, {4, 2}, -1, 1)));
       },
       -2, 2},
      {"matmul_rhs",
       [&](Graph& g, NodeId x) {
         Rng r(10);
         return g.matmul(g.constant(random_tensor(r, {2, 3}, -1, 1)), g.square(x));
       },
       -2, 2},
      {"concat", [](Graph& g, NodeId x) { return g.concat(g.square(x), g.sin(x), 1); }, -2, 2},
      {"slice", [](Graph& g, NodeId x) { return g.square(g.slice(x, 0, 1, 3)); }, -2, 2},
      {"broadcast", [](Graph& g, NodeId x) { return g.square(g.broadcast(g.sum(x, 0), {5, 4})); }, -2, 2},
      {"gather", [](Graph& g, NodeId x) { return g.square(g.gather(x, {0, 5, 5, 11, 3, 2}, {2, 3})); }, -2, 2},
      {"linear", [](Graph& g, NodeId x) { return g.sin(g.linear(x, "lin", 4, 3)); }, -2, 2},
  };
  const Shape shape{3, 4};
  double worst_op = 0;
  std::string worst_name;
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    Rng rng(seed++);
    Graph g;
    NodeId x = g.parameter("x", shape);
    NodeId y = c.build(g, x);
    NodeId loss = g.sum(g.mul(y, g.constant(random_tensor(rng, g.shape(y), 0.5, 1.5))));
    TensorMap bind{{"x", random_tensor(rng, shape, c.lo, c.hi)}};
    if (std::string(c.name) == "linear") {
      bind["lin.weight"] = random_tensor(rng, {4, 3}, -1, 1);
      bind["lin.bias"] = random_tensor(rng, {1, 3}, -1, 1);
    }
    const auto grads = backward(g, forward(g, bind), loss);
    for (const auto& [name, grad] : grads) {
      const auto numeric = detail::central_differences(
          [&, name = name](const std::vector<double>& v) {
            TensorMap b = bind;
            b[name] = Tensor(b[name].shape(), v);
            return forward(g, b)[loss].item();
          },
          bind[name].values(), 1e-5);
      const double err = detail::max_relative_error(grad.values(), numeric, 1e-4);
      if (err > worst_op) worst_op = err, worst_name = std::string(c.name) + ":" + name;
    }
  }

  // composite: MSE(upsample(render(bundle, w)), target) w.r.t. w and field weights
  FieldDims dims;
  dims.z_dim = dims.w_dim = 4;
  dims.mapping_hidden = 8;
  dims.width = 8;
  dims.depth = 2;
  dims.feature_dim = 3;
  dims.upsample_factor = 2;
  dims.upsampler_hidden = 3;
  FieldBundle b = init_bundle(6, dims, {2, 1});
  StyleLatent w = mean_latent(b, 50);
  RenderSpec spec;
  spec.height = 3;
  spec.width = 4;
  spec.sampling.num_samples = 12;
  spec.threads = 1;
  Image target(6, 8, 3);
  Rng trng(8);
  for (auto& v : target.data) v = trng.uniform();
  auto loss = [&] { return nfs::detail::image_mse(render_image(b, w, spec), target, nullptr); };
  Image g_img;
  nfs::detail::image_mse(render_image(b, w, spec), target, &g_img);
  RenderGrad grad = RenderGrad::zeros(b);
  render_image_backward(b, w, spec, nullptr, g_img, grad);
  std::vector<double> analytic(grad.w.data(), grad.w.data() + grad.w.size());
  std::vector<double> numeric = detail::central_differences(
      [&](const std::vector<double>& x) {
        const StyleLatent keep = w;
        w = Eigen::Map<const Eigen::VectorXd>(x.data(), w.size());
        const double r = loss();
        w = keep;
        return r;
      },
      std::vector<double>(w.data(), w.data() + w.size()), 1e-6);
  auto& layer = b.layers[1].w;
  const auto fd = detail::central_differences(
      [&](const std::vector<double>& x) {
        const auto keep = layer;
        layer = x;
        const double r = loss();
        layer = keep;
        return r;
      },
      layer, 1e-6);
  analytic.insert(analytic.end(), grad.params.layers[1].w.begin(), grad.params.layers[1].w.end());
  numeric.insert(numeric.end(), fd.begin(), fd.end());
  const double composite = detail::max_relative_error(analytic, numeric, 1e-6);
  return {worst_op < kOpTolerance && composite < kCompositeTolerance,
          summary(cases.size(), " ops worst ", worst_op, " (", worst_name, ", tol ", kOpTolerance,
                 "); render-loss composite ", composite, " (tol ", kCompositeTolerance, ")")};
}

/// Convex blend exactness at masks 0 and 1, and the seven-frame mask mean
/// against a direct oracle.
inline Verdict blending() {
  constexpr double kTolerance = 1e-12;
  constexpr int kWindow = 7;
  Rng rng(12);
  FeatureMap a(9, 7, 5), b(9, 7, 5);
  for (auto& v : a.data) v = rng.uniform();
  for (auto& v : b.data) v = rng.uniform();
  MouthMask zeros(9, 7), ones(9, 7);
  std::fill(ones.values.begin(), ones.values.end(), 1.0);
  const bool exact = detail::bit_equal(blend(a, b, zeros), a) && detail::bit_equal(blend(a, b, ones), b);

  MaskHistory history(kWindow);
  std::vector<MouthMask> all;
  double worst = 0;
  for (int t = 0; t < 20; ++t) {
    MouthMask m(9, 7);
    for (auto& v : m.values) v = rng.uniform();
    all.push_back(m);
    history.push(m);
    const MouthMask avg = average_mask(history);
    const int from = std::max(0, t + 1 - kWindow);
    for (std::size_t p = 0; p < avg.values.size(); ++p) {
      long double acc = 0;
      for (int s = from; s <= t; ++s) acc += all[static_cast<std::size_t>(s)].values[p];
      worst = std::max(worst, static_cast<double>(std::abs(acc / (t + 1 - from) - avg.values[p])));
    }
  }
  return {exact && worst <= kTolerance,
          summary(exact ? "extremes exact" : "extremes differ", "; window-7 mean max error ", worst, " (tol ",
                 kTolerance, ")")};
}

}  // namespace nfs::checks
