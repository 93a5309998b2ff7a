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

// Volume rendering of the style field into feature maps.
//
// Two evaluation paths produce bit-identical maps: a straight-line reference
// that calls query_field per sample, and a batched path that evaluates the
// MLP on chunks of samples with the same fma chains. The batched path
// parallelises over 8x8 pixel tiles; each tile writes its own pixels and,
// in the backward pass, its own gradient buffer, which are then summed in
// tile order. Output therefore never depends on the worker count.

#pragma once

#include <atomic>
#include <cmath>
#include <functional>
#include <optional>
#include <thread>
#include <utility>
#include <vector>

#include "nfs/core.hpp"
#include "nfs/deformation.hpp"
#include "nfs/field.hpp"

namespace nfs {

struct CameraPose {
  double yaw = 0.0;
  double pitch = 0.0;
  double radius = 2.5;
  double fov_y = 0.9;
  Vec3 look_at = Vec3::Zero();

  void validate() const {
    NFS_CHECK(radius > 0 && std::isfinite(radius), "camera radius must be positive, got ", radius);
    NFS_CHECK(std::abs(pitch) < kPi / 2, "camera pitch must be inside (-pi/2, pi/2), got ", pitch);
    NFS_CHECK(fov_y > 0 && fov_y < kPi, "fov_y must be in (0, pi), got ", fov_y);
    NFS_CHECK(std::isfinite(yaw) && look_at.allFinite(), "camera pose is not finite");
  }

  Vec3 eye() const {
    return look_at + radius * Vec3(std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch));
  }
};

struct Ray {
  Vec3 origin;
  Vec3 direction;
};

/// Pinhole rays through pixel centres, row-major from the top-left pixel.
inline std::vector<Ray> generate_rays(const CameraPose& pose, int h, int w) {
  pose.validate();
  NFS_CHECK(h >= 1 && w >= 1, "image size must be positive, got ", h, "x", w);
  const Vec3 eye = pose.eye();
  const Vec3 f = (pose.look_at - eye).normalized();
  const Vec3 right = f.cross(Vec3(0, 1, 0)).normalized();
  const Vec3 up = right.cross(f);
  const double tan_half = std::tan(0.5 * pose.fov_y);
  const double aspect = static_cast<double>(w) / h;
  std::vector<Ray> rays(static_cast<std::size_t>(h) * static_cast<std::size_t>(w));
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j) {
      const double x = (2.0 * (j + 0.5) / w - 1.0) * aspect * tan_half;
      const double y = (1.0 - 2.0 * (i + 0.5) / h) * tan_half;
      rays[static_cast<std::size_t>(i) * static_cast<std::size_t>(w) + static_cast<std::size_t>(j)] = {
          eye, (f + x * right + y * up).normalized()};
    }
  return rays;
}

/// Continuous pixel coordinates (column, row) of a world point, with pixel
/// (i, j) covering [j, j + 1) x [i, i + 1). Inverse of generate_rays; empty
/// for points on or behind the image plane through the eye.
inline std::optional<std::pair<double, double>> project_point(const CameraPose& pose, int h, int w, const Vec3& p) {
  const Vec3 eye = pose.eye();
  const Vec3 f = (pose.look_at - eye).normalized();
  const Vec3 right = f.cross(Vec3(0, 1, 0)).normalized();
  const Vec3 up = right.cross(f);
  const Vec3 v = p - eye;
  const double depth = v.dot(f);
  if (!(depth > 1e-9)) return std::nullopt;
  const double tan_half = std::tan(0.5 * pose.fov_y);
  const double aspect = static_cast<double>(w) / h;
  const double x = v.dot(right) / depth / (aspect * tan_half);
  const double y = v.dot(up) / depth / tan_half;
  return std::pair{0.5 * (x + 1.0) * w, 0.5 * (1.0 - y) * h};
}

struct SamplingConfig {
  int num_samples = 64;
  double t_near = 0.5;
  double t_far = 3.5;

  void validate() const {
    NFS_CHECK(num_samples >= 2, "num_samples must be >= 2, got ", num_samples);
    NFS_CHECK(t_near >= 0 && t_near < t_far, "need 0 <= t_near < t_far, got ", t_near, ", ", t_far);
  }
  double delta() const { return (t_far - t_near) / num_samples; }
  double t(int i) const { return t_near + (i + 0.5) * delta(); }
};

inline Vec3 sample_position(const Ray& ray, double t) { return ray.origin + t * ray.direction; }

struct RaySamples {
  std::vector<double> t;
  std::vector<double> delta;
  Points3 positions;
};

/// Midpoints of N equal strata over [t_near, t_far].
inline RaySamples sample_points(const Ray& ray, const SamplingConfig& cfg) {
  cfg.validate();
  RaySamples s;
  s.positions.resize(cfg.num_samples, 3);
  for (int i = 0; i < cfg.num_samples; ++i) {
    s.t.push_back(cfg.t(i));
    s.delta.push_back(cfg.delta());
    s.positions.row(i) = sample_position(ray, s.t.back()).transpose();
  }
  return s;
}

// ---------------------------------------------------------------------------
// Compositing

/// Front-to-back compositing of n samples with c channels (sample-major).
/// Writes the accumulated value into `out` and returns the opacity. Weights
/// are capped so that their running sum never exceeds 1.
inline double integrate_ray(const double* features, int c, const double* sigma, const double* delta, int n, double* out,
                            double* weights = nullptr, double* transmittance = nullptr) {
  for (int k = 0; k < c; ++k) out[k] = 0.0;
  double trans = 1.0, acc = 0.0;
  for (int i = 0; i < n; ++i) {
    NFS_CHECK(sigma[i] >= 0.0, "negative density ", sigma[i], " at sample ", i);
    if (transmittance) transmittance[i] = trans;
    const double x = sigma[i] * delta[i];
    const double wi = std::min(trans * -std::expm1(-x), 1.0 - acc);
    trans *= std::exp(-x);
    acc += wi;
    if (weights) weights[i] = wi;
    const double* f = features + static_cast<std::size_t>(i) * static_cast<std::size_t>(c);
    for (int k = 0; k < c; ++k) out[k] += wi * f[k];
  }
  return acc;
}

/// Reverse pass of integrate_ray for upstream gradient g (c-vector).
inline void integrate_ray_backward(const double* features, int c, const double* sigma, const double* delta, int n,
                                   const double* g, double* g_sigma, double* g_features) {
  std::vector<double> w(static_cast<std::size_t>(n)), gc(static_cast<std::size_t>(n));
  std::vector<double> out(static_cast<std::size_t>(c));
  integrate_ray(features, c, sigma, delta, n, out.data(), w.data());
  double trans = 1.0;
  std::vector<double> t_next(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    trans *= std::exp(-sigma[i] * delta[i]);
    t_next[static_cast<std::size_t>(i)] = trans;
    const double* f = features + static_cast<std::size_t>(i) * static_cast<std::size_t>(c);
    double dot = 0.0;
    for (int k = 0; k < c; ++k) dot += g[k] * f[k];
    gc[static_cast<std::size_t>(i)] = dot;
    if (g_features)
      for (int k = 0; k < c; ++k) g_features[static_cast<std::size_t>(i) * static_cast<std::size_t>(c) + static_cast<std::size_t>(k)] = w[static_cast<std::size_t>(i)] * g[k];
  }
  double suffix = 0.0;  // sum_{j>i} w_j (g . c_j)
  for (int i = n - 1; i >= 0; --i) {
    g_sigma[i] = delta[i] * (t_next[static_cast<std::size_t>(i)] * gc[static_cast<std::size_t>(i)] - suffix);
    suffix += w[static_cast<std::size_t>(i)] * gc[static_cast<std::size_t>(i)];
  }
}

struct IntegrationResult {
  Eigen::VectorXd value;
  double opacity = 0.0;
  std::vector<double> weights;
  std::vector<double> transmittance;
};

inline IntegrationResult integrate(const Eigen::MatrixXd& features, const std::vector<double>& sigmas,
                                   const std::vector<double>& deltas) {
  const int n = static_cast<int>(features.rows()), c = static_cast<int>(features.cols());
  NFS_CHECK(sigmas.size() == static_cast<std::size_t>(n) && deltas.size() == static_cast<std::size_t>(n),
            "integrate: ", n, " feature rows but ", sigmas.size(), " densities and ", deltas.size(), " deltas");
  for (double d : deltas) NFS_CHECK(d > 0, "segment lengths must be positive, got ", d);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> f = features;
  IntegrationResult r;
  r.value.resize(c);
  r.weights.resize(static_cast<std::size_t>(n));
  r.transmittance.resize(static_cast<std::size_t>(n));
  r.opacity = integrate_ray(f.data(), c, sigmas.data(), deltas.data(), n, r.value.data(), r.weights.data(),
                            r.transmittance.data());
  return r;
}

// ---------------------------------------------------------------------------
// Feature maps

/// Row-major H x W x C array; also used for RGB images.
struct FeatureMap {
  int height = 0, width = 0, channels = 0;
  std::vector<double> data;
  std::vector<double> opacity;  // H x W, empty for images

  FeatureMap() = default;
  FeatureMap(int h, int w, int c)
      : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c), 0.0) {}

  std::size_t index(int i, int j, int k = 0) const {
    return (static_cast<std::size_t>(i) * static_cast<std::size_t>(width) + static_cast<std::size_t>(j)) * static_cast<std::size_t>(channels) + static_cast<std::size_t>(k);
  }
  double& at(int i, int j, int k) { return data[index(i, j, k)]; }
  double at(int i, int j, int k) const { return data[index(i, j, k)]; }
  double* pixel(int i, int j) { return data.data() + index(i, j); }
  const double* pixel(int i, int j) const { return data.data() + index(i, j); }
  bool same_shape(const FeatureMap& o) const { return height == o.height && width == o.width && channels == o.channels; }
};

using Image = FeatureMap;

struct RenderSpec {
  CameraPose pose;
  SamplingConfig sampling;
  int height = 64;
  int width = 64;
  int threads = 0;  // <= 0: hardware concurrency

  void validate() const {
    pose.validate();
    sampling.validate();
    NFS_CHECK(height >= 1 && width >= 1, "render size must be positive, got ", height, "x", width);
  }
};

/// Parameter and style gradients of a scalar loss.
struct RenderGrad {
  FieldBundle params;
  Eigen::VectorXd w;

  static RenderGrad zeros(const FieldBundle& b) { return {zeros_like(b), Eigen::VectorXd::Zero(b.dims.w_dim)}; }
};

namespace detail {

inline int worker_count(int requested, int jobs) {
  int n = requested > 0 ? requested : static_cast<int>(std::thread::hardware_concurrency());
  return std::clamp(n, 1, std::max(jobs, 1));
}

/// Runs fn(job) for job in [0, jobs) on a small pool; jobs are claimed in
/// any order, so fn must only write job-private state.
inline void parallel_for(int jobs, int threads, const std::function<void(int)>& fn) {
  const int n = worker_count(threads, jobs);
  if (n == 1) {
    for (int j = 0; j < jobs; ++j) fn(j);
    return;
  }
  std::atomic<int> next{0};
  std::exception_ptr error;
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (int j = next++; j < jobs && !failed; j = next++) {
      try {
        fn(j);
      } catch (...) {
        if (!failed.exchange(true)) error = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

/// Point at which the canonical field is queried for a sample.
inline Vec3 warped_position(const Ray& ray, double t, const DisplacementField* deform) {
  const Vec3 p = sample_position(ray, t);
  if (!deform || deform->is_zero()) return p;
  return p + deform->at(p);
}

inline constexpr int kTile = 8;
inline constexpr int kChunk = 256;
inline constexpr int kLanes = 8;

/// out[j][s] = fma chain over k of w[j][k] * in[k][s], starting from the
/// value already in out. Rows are strided by kChunk; n is a multiple of 8.
inline void dense_chain(const double* w, int ldw, int nout, int nin, const double* in, double* out, int n) {
  int j = 0;
  for (; j + 4 <= nout; j += 4) {
    const double* w0 = w + static_cast<std::size_t>(j) * ldw;
    for (int s = 0; s < n; s += kLanes) {
      double acc[4][kLanes];
      for (int r = 0; r < 4; ++r)
        for (int t = 0; t < kLanes; ++t) acc[r][t] = out[(j + r) * kChunk + s + t];
      for (int k = 0; k < nin; ++k) {
        const double* x = in + k * kChunk + s;
        const double a0 = w0[k], a1 = w0[ldw + k], a2 = w0[2 * ldw + k], a3 = w0[3 * ldw + k];
        for (int t = 0; t < kLanes; ++t) {
          acc[0][t] = std::fma(a0, x[t], acc[0][t]);
          acc[1][t] = std::fma(a1, x[t], acc[1][t]);
          acc[2][t] = std::fma(a2, x[t], acc[2][t]);
          acc[3][t] = std::fma(a3, x[t], acc[3][t]);
        }
      }
      for (int r = 0; r < 4; ++r)
        for (int t = 0; t < kLanes; ++t) out[(j + r) * kChunk + s + t] = acc[r][t];
    }
  }
  for (; j < nout; ++j) {
    const double* wr = w + static_cast<std::size_t>(j) * ldw;
    for (int s = 0; s < n; s += kLanes) {
      double acc[kLanes];
      for (int t = 0; t < kLanes; ++t) acc[t] = out[j * kChunk + s + t];
      for (int k = 0; k < nin; ++k) {
        const double* x = in + k * kChunk + s;
        for (int t = 0; t < kLanes; ++t) acc[t] = std::fma(wr[k], x[t], acc[t]);
      }
      for (int t = 0; t < kLanes; ++t) out[j * kChunk + s + t] = acc[t];
    }
  }
}

/// acc_j[k] += sum_s g[j][s] * xt[s][k] in ascending s, for the first
/// `count` samples. xt is sample-major with row stride nin.
inline void weight_grad(const double* g, int nout, const double* xt, int nin, int count, double* dw, int ldw) {
  std::vector<double> acc(static_cast<std::size_t>(nin));
  for (int j = 0; j < nout; ++j) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int s = 0; s < count; ++s) {
      const double gs = g[j * kChunk + s];
      const double* x = xt + static_cast<std::size_t>(s) * nin;
      for (int k = 0; k < nin; ++k) acc[static_cast<std::size_t>(k)] = std::fma(gs, x[k], acc[static_cast<std::size_t>(k)]);
    }
    double* d = dw + static_cast<std::size_t>(j) * ldw;
    for (int k = 0; k < nin; ++k) d[k] += acc[static_cast<std::size_t>(k)];
  }
}

/// One chunk of samples evaluated feature-major.
struct Chunk {
  int count = 0;
  std::vector<int> ray, step;
  std::vector<double> r2;
  std::vector<double> x0;                 // pos_size x kChunk
  std::vector<std::vector<double>> z, h;  // per layer, width x kChunk
  std::vector<double> out;                // (1 + C) x kChunk head logits
};

/// Precomputed per-render state shared by all tiles.
struct RenderPlan {
  const FieldBundle* b = nullptr;
  const StyleLatent* w = nullptr;
  std::vector<std::vector<double>> sb;
  std::vector<Ray> rays;
  RenderSpec spec;
  const DisplacementField* deform = nullptr;
  int tiles_x = 0, tiles_y = 0;

  RenderPlan(const FieldBundle& bundle, const StyleLatent& latent, const RenderSpec& s, const DisplacementField* d)
      : b(&bundle), w(&latent), sb(style_biases(bundle, latent)), rays(generate_rays(s.pose, s.height, s.width)),
        spec(s), deform(d) {
    s.validate();
    tiles_x = (s.width + kTile - 1) / kTile;
    tiles_y = (s.height + kTile - 1) / kTile;
  }
  int tiles() const { return tiles_x * tiles_y; }
};

/// Forward evaluation of one pixel tile. Keeps every chunk's activations
/// when `keep` is set (needed by the backward pass).
struct TileEval {
  std::vector<int> pixels;             // flat pixel index per tile ray
  std::vector<std::vector<double>> rb; // per ray layer-0 bias
  std::vector<std::vector<double>> zd; // per ray direction encoding
  std::vector<double> sigma;           // rays x N
  std::vector<double> feat;            // rays x N x C
  std::vector<Chunk> chunks;

  void run(const RenderPlan& plan, int tile, bool keep) {
    const FieldBundle& b = *plan.b;
    const int n = plan.spec.sampling.num_samples, c = b.dims.feature_dim;
    const int ty = tile / plan.tiles_x, tx = tile % plan.tiles_x;
    pixels.clear();
    for (int i = ty * kTile; i < std::min((ty + 1) * kTile, plan.spec.height); ++i)
      for (int j = tx * kTile; j < std::min((tx + 1) * kTile, plan.spec.width); ++j) pixels.push_back(i * plan.spec.width + j);
    const int nr = static_cast<int>(pixels.size());
    rb.assign(static_cast<std::size_t>(nr), std::vector<double>(static_cast<std::size_t>(b.dims.width)));
    zd.assign(static_cast<std::size_t>(nr), {});
    for (int r = 0; r < nr; ++r) {
      zd[static_cast<std::size_t>(r)] = encode(plan.rays[static_cast<std::size_t>(pixels[static_cast<std::size_t>(r)])].direction, b.enc.num_frequencies_direction);
      ray_bias(b, plan.sb[0], zd[static_cast<std::size_t>(r)].data(), rb[static_cast<std::size_t>(r)].data());
    }
    sigma.assign(static_cast<std::size_t>(nr) * static_cast<std::size_t>(n), 0.0);
    feat.assign(static_cast<std::size_t>(nr) * static_cast<std::size_t>(n) * static_cast<std::size_t>(c), 0.0);
    chunks.clear();

    Chunk chunk;
    auto flush = [&] {
      if (chunk.count == 0) return;
      evaluate(plan, chunk);
      scatter(plan, chunk);
      if (keep) chunks.push_back(std::move(chunk));
      chunk = Chunk();
    };
    const int np = static_cast<int>(b.pos_size());
    std::vector<double> enc(static_cast<std::size_t>(np));
    for (int r = 0; r < nr; ++r) {
      const Ray& ray = plan.rays[static_cast<std::size_t>(pixels[static_cast<std::size_t>(r)])];
      for (int i = 0; i < n; ++i) {
        const Vec3 p = warped_position(ray, plan.spec.sampling.t(i), plan.deform);
        const double r2 = squared_radius(p.data());
        if (!(r2 < 1.0)) continue;  // sigma is exactly zero outside the ball
        if (chunk.count == 0) {
          chunk.x0.assign(static_cast<std::size_t>(np) * kChunk, 0.0);
          chunk.ray.clear();
          chunk.step.clear();
          chunk.r2.clear();
        }
        encode(p.data(), b.enc.num_frequencies_position, enc.data());
        for (int k = 0; k < np; ++k) chunk.x0[static_cast<std::size_t>(k) * kChunk + static_cast<std::size_t>(chunk.count)] = enc[k];
        chunk.ray.push_back(r);
        chunk.step.push_back(i);
        chunk.r2.push_back(r2);
        if (++chunk.count == kChunk) flush();
      }
    }
    flush();
  }

  void evaluate(const RenderPlan& plan, Chunk& ch) const {
    const FieldBundle& b = *plan.b;
    const int width = b.dims.width, depth = static_cast<int>(b.layers.size());
    const int lanes = (ch.count + kLanes - 1) / kLanes * kLanes;
    ch.z.assign(static_cast<std::size_t>(depth), std::vector<double>(static_cast<std::size_t>(width) * kChunk, 0.0));
    ch.h.assign(static_cast<std::size_t>(depth), std::vector<double>(static_cast<std::size_t>(width) * kChunk, 0.0));
    for (int l = 0; l < depth; ++l) {
      auto& z = ch.z[static_cast<std::size_t>(l)];
      for (int j = 0; j < width; ++j)
        for (int s = 0; s < lanes; ++s) {
          const int r = s < ch.count ? ch.ray[static_cast<std::size_t>(s)] : 0;
          z[static_cast<std::size_t>(j) * kChunk + static_cast<std::size_t>(s)] =
              l == 0 ? rb[static_cast<std::size_t>(r)][static_cast<std::size_t>(j)] : plan.sb[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)];
        }
      const Dense& d = b.layers[static_cast<std::size_t>(l)];
      const double* in = l == 0 ? ch.x0.data() : ch.h[static_cast<std::size_t>(l - 1)].data();
      dense_chain(d.w.data(), d.in, width, b.main_in(l), in, z.data(), lanes);
      auto& h = ch.h[static_cast<std::size_t>(l)];
      for (std::size_t k = 0; k < z.size(); ++k) h[k] = leaky(z[k]);
    }
    const int nh = b.head.out;
    ch.out.assign(static_cast<std::size_t>(nh) * kChunk, 0.0);
    for (int c = 0; c < nh; ++c)
      for (int s = 0; s < lanes; ++s) ch.out[static_cast<std::size_t>(c) * kChunk + static_cast<std::size_t>(s)] = b.head.b[static_cast<std::size_t>(c)];
    dense_chain(b.head.w.data(), width, nh, width, ch.h.back().data(), ch.out.data(), lanes);
  }

  void scatter(const RenderPlan& plan, const Chunk& ch) {
    const int n = plan.spec.sampling.num_samples, c = plan.b->dims.feature_dim;
    for (int s = 0; s < ch.count; ++s) {
      const std::size_t slot = static_cast<std::size_t>(ch.ray[static_cast<std::size_t>(s)]) * static_cast<std::size_t>(n) + static_cast<std::size_t>(ch.step[static_cast<std::size_t>(s)]);
      const double r2 = ch.r2[static_cast<std::size_t>(s)];
      sigma[slot] = softplus(ch.out[static_cast<std::size_t>(s)] + density_prior(r2)) * density_window(r2);
      for (int k = 0; k < c; ++k)
        feat[slot * static_cast<std::size_t>(c) + static_cast<std::size_t>(k)] = sigmoid(ch.out[static_cast<std::size_t>(k + 1) * kChunk + static_cast<std::size_t>(s)]);
    }
  }
};

}  // namespace detail

/// Batched, tiled renderer.
inline FeatureMap render_feature_map(const FieldBundle& b, const StyleLatent& w, const RenderSpec& spec,
                                     const DisplacementField* deform = nullptr) {
  const detail::RenderPlan plan(b, w, spec, deform);
  const int n = spec.sampling.num_samples, c = b.dims.feature_dim;
  FeatureMap out(spec.height, spec.width, c);
  out.opacity.assign(static_cast<std::size_t>(spec.height) * static_cast<std::size_t>(spec.width), 0.0);
  const std::vector<double> deltas(static_cast<std::size_t>(n), spec.sampling.delta());
  detail::parallel_for(plan.tiles(), spec.threads, [&](int tile) {
    detail::TileEval te;
    te.run(plan, tile, false);
    for (std::size_t r = 0; r < te.pixels.size(); ++r) {
      const int px = te.pixels[r];
      out.opacity[static_cast<std::size_t>(px)] =
          integrate_ray(te.feat.data() + r * static_cast<std::size_t>(n) * static_cast<std::size_t>(c), c, te.sigma.data() + r * static_cast<std::size_t>(n), deltas.data(), n,
                        out.data.data() + static_cast<std::size_t>(px) * static_cast<std::size_t>(c));
    }
  });
  return out;
}

/// Straight-line single-threaded renderer: query_field per sample.
inline FeatureMap render_feature_map_reference(const FieldBundle& b, const StyleLatent& w, const RenderSpec& spec,
                                               const DisplacementField* deform = nullptr) {
  spec.validate();
  const auto rays = generate_rays(spec.pose, spec.height, spec.width);
  const int n = spec.sampling.num_samples, c = b.dims.feature_dim;
  FeatureMap out(spec.height, spec.width, c);
  out.opacity.assign(rays.size(), 0.0);
  std::vector<double> feat(static_cast<std::size_t>(n) * static_cast<std::size_t>(c)), sigma(static_cast<std::size_t>(n)), deltas(static_cast<std::size_t>(n), spec.sampling.delta());
  for (std::size_t px = 0; px < rays.size(); ++px) {
    for (int i = 0; i < n; ++i) {
      const Vec3 p = detail::warped_position(rays[px], spec.sampling.t(i), deform);
      const FieldSample f = query_field(b, p, rays[px].direction, w);
      sigma[static_cast<std::size_t>(i)] = f.sigma;
      std::copy(f.feature.begin(), f.feature.end(), feat.begin() + static_cast<std::ptrdiff_t>(i) * c);
    }
    out.opacity[px] = integrate_ray(feat.data(), c, sigma.data(), deltas.data(), n, out.data.data() + px * static_cast<std::size_t>(c));
  }
  return out;
}

/// Accumulates d(loss)/d(params, w) into `grad` given d(loss)/d(feature map).
inline void render_feature_map_backward(const FieldBundle& b, const StyleLatent& w, const RenderSpec& spec,
                                        const DisplacementField* deform, const FeatureMap& grad_out, RenderGrad& grad) {
  using detail::kChunk;
  const detail::RenderPlan plan(b, w, spec, deform);
  const int n = spec.sampling.num_samples, c = b.dims.feature_dim, width = b.dims.width;
  const int depth = static_cast<int>(b.layers.size()), nh = b.head.out;
  NFS_CHECK(grad_out.height == spec.height && grad_out.width == spec.width && grad_out.channels == c,
            "feature-map gradient has shape ", grad_out.height, "x", grad_out.width, "x", grad_out.channels);
  const std::vector<double> deltas(static_cast<std::size_t>(n), spec.sampling.delta());

  // transposed weights for the input-gradient chains
  std::vector<std::vector<double>> wt(static_cast<std::size_t>(depth + 1));
  auto transpose = [](const Dense& d, int cols) {
    std::vector<double> t(static_cast<std::size_t>(cols) * static_cast<std::size_t>(d.out));
    for (int j = 0; j < d.out; ++j)
      for (int k = 0; k < cols; ++k) t[static_cast<std::size_t>(k) * static_cast<std::size_t>(d.out) + static_cast<std::size_t>(j)] = d.weight(j, k);
    return t;
  };
  for (int l = 1; l < depth; ++l) wt[static_cast<std::size_t>(l)] = transpose(b.layers[static_cast<std::size_t>(l)], width);
  wt[static_cast<std::size_t>(depth)] = transpose(b.head, width);

  struct TileGrad {
    std::vector<Dense> layers;
    Dense head;
    std::vector<double> gw;
  };
  std::vector<TileGrad> tiles(static_cast<std::size_t>(plan.tiles()));

  detail::parallel_for(plan.tiles(), spec.threads, [&](int tile) {
    detail::TileEval te;
    te.run(plan, tile, true);
    TileGrad& tg = tiles[static_cast<std::size_t>(tile)];
    for (const auto& l : b.layers) tg.layers.emplace_back(l.out, l.in);
    tg.head = Dense(b.head.out, b.head.in);
    tg.gw.assign(static_cast<std::size_t>(b.dims.w_dim), 0.0);

    const int nr = static_cast<int>(te.pixels.size());
    std::vector<double> g_sigma(static_cast<std::size_t>(nr) * static_cast<std::size_t>(n)), g_feat(static_cast<std::size_t>(nr) * static_cast<std::size_t>(n) * static_cast<std::size_t>(c));
    for (int r = 0; r < nr; ++r)
      integrate_ray_backward(te.feat.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(n) * static_cast<std::size_t>(c), c, te.sigma.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(n),
                             deltas.data(), n, grad_out.data.data() + static_cast<std::size_t>(te.pixels[static_cast<std::size_t>(r)]) * static_cast<std::size_t>(c),
                             g_sigma.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(n), g_feat.data() + static_cast<std::size_t>(r) * static_cast<std::size_t>(n) * static_cast<std::size_t>(c));

    std::vector<double> g(static_cast<std::size_t>(std::max(nh, width)) * kChunk), gin(static_cast<std::size_t>(width) * kChunk), xt;
    std::vector<double> rowsum(static_cast<std::size_t>(width));
    std::vector<std::vector<double>> ray_sum(static_cast<std::size_t>(nr));
    for (const detail::Chunk& ch : te.chunks) {
      const int lanes = (ch.count + detail::kLanes - 1) / detail::kLanes * detail::kLanes;
      // head logits gradient
      std::fill(g.begin(), g.end(), 0.0);
      for (int s = 0; s < ch.count; ++s) {
        const std::size_t slot = static_cast<std::size_t>(ch.ray[static_cast<std::size_t>(s)]) * static_cast<std::size_t>(n) + static_cast<std::size_t>(ch.step[static_cast<std::size_t>(s)]);
        const double r2 = ch.r2[static_cast<std::size_t>(s)];
        g[static_cast<std::size_t>(s)] = g_sigma[slot] * sigmoid(ch.out[static_cast<std::size_t>(s)] + density_prior(r2)) * density_window(r2);
        for (int k = 0; k < c; ++k) {
          const double f = te.feat[slot * static_cast<std::size_t>(c) + static_cast<std::size_t>(k)];
          g[static_cast<std::size_t>(k + 1) * kChunk + static_cast<std::size_t>(s)] = g_feat[slot * static_cast<std::size_t>(c) + static_cast<std::size_t>(k)] * f * (1.0 - f);
        }
      }
      auto to_sample_major = [&](const double* x, int rows) {
        xt.assign(static_cast<std::size_t>(ch.count) * static_cast<std::size_t>(rows), 0.0);
        for (int k = 0; k < rows; ++k)
          for (int s = 0; s < ch.count; ++s) xt[static_cast<std::size_t>(s) * static_cast<std::size_t>(rows) + static_cast<std::size_t>(k)] = x[static_cast<std::size_t>(k) * kChunk + static_cast<std::size_t>(s)];
      };
      to_sample_major(ch.h.back().data(), width);
      detail::weight_grad(g.data(), nh, xt.data(), width, ch.count, tg.head.w.data(), width);
      for (int k = 0; k < nh; ++k)
        for (int s = 0; s < ch.count; ++s) tg.head.b[static_cast<std::size_t>(k)] += g[static_cast<std::size_t>(k) * kChunk + static_cast<std::size_t>(s)];
      std::fill(gin.begin(), gin.end(), 0.0);
      detail::dense_chain(wt[static_cast<std::size_t>(depth)].data(), nh, width, nh, g.data(), gin.data(), lanes);

      for (int l = depth - 1; l >= 0; --l) {
        const Dense& d = b.layers[static_cast<std::size_t>(l)];
        Dense& dd = tg.layers[static_cast<std::size_t>(l)];
        const auto& z = ch.z[static_cast<std::size_t>(l)];
        // g <- gin * leaky'(z)
        for (int j = 0; j < width; ++j)
          for (int s = 0; s < kChunk; ++s) {
            const std::size_t q = static_cast<std::size_t>(j) * kChunk + static_cast<std::size_t>(s);
            g[q] = s < ch.count ? gin[q] * (z[q] > 0 ? 1.0 : kLeakySlope) : 0.0;
          }
        const int nx = b.main_in(l), off = b.style_offset(l);
        to_sample_major(l == 0 ? ch.x0.data() : ch.h[static_cast<std::size_t>(l - 1)].data(), nx);
        detail::weight_grad(g.data(), width, xt.data(), nx, ch.count, dd.w.data(), d.in);
        for (int j = 0; j < width; ++j) {
          double acc = 0.0;
          for (int s = 0; s < ch.count; ++s) acc += g[static_cast<std::size_t>(j) * kChunk + static_cast<std::size_t>(s)];
          rowsum[static_cast<std::size_t>(j)] = acc;
          dd.b[static_cast<std::size_t>(j)] += acc;
          for (int k = 0; k < b.dims.w_dim; ++k) {
            dd.w[static_cast<std::size_t>(j) * static_cast<std::size_t>(d.in) + static_cast<std::size_t>(off + k)] += acc * (*plan.w)(k);
            tg.gw[static_cast<std::size_t>(k)] += acc * d.weight(j, off + k);
          }
        }
        if (l == 0) {
          for (int s = 0; s < ch.count; ++s) {
            auto& rs = ray_sum[static_cast<std::size_t>(ch.ray[static_cast<std::size_t>(s)])];
            if (rs.empty()) rs.assign(static_cast<std::size_t>(width), 0.0);
            for (int j = 0; j < width; ++j) rs[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(j) * kChunk + static_cast<std::size_t>(s)];
          }
        } else {
          std::fill(gin.begin(), gin.end(), 0.0);
          detail::dense_chain(wt[static_cast<std::size_t>(l)].data(), width, width, width, g.data(), gin.data(), lanes);
        }
      }
    }
    // direction columns of layer 0, one outer product per ray
    const int np = static_cast<int>(b.pos_size()), nd = static_cast<int>(b.dir_size());
    Dense& d0 = tg.layers[0];
    for (int r = 0; r < nr; ++r) {
      const auto& rs = ray_sum[static_cast<std::size_t>(r)];
      if (rs.empty()) continue;
      for (int j = 0; j < width; ++j)
        for (int k = 0; k < nd; ++k)
          d0.w[static_cast<std::size_t>(j) * static_cast<std::size_t>(d0.in) + static_cast<std::size_t>(np + k)] += rs[static_cast<std::size_t>(j)] * te.zd[static_cast<std::size_t>(r)][static_cast<std::size_t>(k)];
    }
  });

  for (const TileGrad& tg : tiles) {
    for (int l = 0; l < depth; ++l) {
      auto& dst = grad.params.layers[static_cast<std::size_t>(l)];
      for (std::size_t k = 0; k < dst.w.size(); ++k) dst.w[k] += tg.layers[static_cast<std::size_t>(l)].w[k];
      for (std::size_t k = 0; k < dst.b.size(); ++k) dst.b[k] += tg.layers[static_cast<std::size_t>(l)].b[k];
    }
    for (std::size_t k = 0; k < tg.head.w.size(); ++k) grad.params.head.w[k] += tg.head.w[k];
    for (std::size_t k = 0; k < tg.head.b.size(); ++k) grad.params.head.b[k] += tg.head.b[k];
    for (int k = 0; k < b.dims.w_dim; ++k) grad.w(k) += tg.gw[static_cast<std::size_t>(k)];
  }
}

/// Per-sample reverse pass built on field_point_backward; the oracle for
/// the batched version.
inline void render_feature_map_backward_reference(const FieldBundle& b, const StyleLatent& w, const RenderSpec& spec,
                                                  const DisplacementField* deform, const FeatureMap& grad_out,
                                                  RenderGrad& grad) {
  spec.validate();
  const auto rays = generate_rays(spec.pose, spec.height, spec.width);
  const int n = spec.sampling.num_samples, c = b.dims.feature_dim;
  const auto sb = style_biases(b, w);
  std::vector<double> feat(static_cast<std::size_t>(n) * static_cast<std::size_t>(c)), sigma(static_cast<std::size_t>(n)), deltas(static_cast<std::size_t>(n), spec.sampling.delta());
  std::vector<double> gs(static_cast<std::size_t>(n)), gf(static_cast<std::size_t>(n) * static_cast<std::size_t>(c));
  std::vector<Vec3> pts(static_cast<std::size_t>(n));
  for (std::size_t px = 0; px < rays.size(); ++px) {
    for (int i = 0; i < n; ++i) {
      pts[static_cast<std::size_t>(i)] = detail::warped_position(rays[px], spec.sampling.t(i), deform);
      const FieldSample f = query_field(b, pts[static_cast<std::size_t>(i)], rays[px].direction, w);
      sigma[static_cast<std::size_t>(i)] = f.sigma;
      std::copy(f.feature.begin(), f.feature.end(), feat.begin() + static_cast<std::ptrdiff_t>(i) * c);
    }
    integrate_ray_backward(feat.data(), c, sigma.data(), deltas.data(), n, grad_out.data.data() + px * static_cast<std::size_t>(c), gs.data(),
                           gf.data());
    const auto zd = encode(rays[px].direction, b.enc.num_frequencies_direction);
    for (int i = 0; i < n; ++i)
      field_point_backward(b, sb, pts[static_cast<std::size_t>(i)], zd.data(), w, gs[static_cast<std::size_t>(i)], gf.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(c), &grad.params,
                           grad.w.data());
  }
}

}  // namespace nfs
