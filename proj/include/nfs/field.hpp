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

// Style-conditioned radiance field: positional encoding, the z -> w mapping
// network and the field MLP F(zeta(p), zeta(d), w) -> (feature, sigma).
//
// The field lives in the cube [-1, 1]^3. Density is softplus of the network
// output plus a smooth head-shaped prior, multiplied by a compact window that
// vanishes outside the unit ball; the renderer skips samples there.

#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "nfs/autodiff.hpp"
#include "nfs/core.hpp"

namespace nfs {

struct EncodingConfig {
  int num_frequencies_position = 6;
  int num_frequencies_direction = 2;

  void validate() const {
    NFS_CHECK(num_frequencies_position >= 1, "num_frequencies_position must be >= 1, got ", num_frequencies_position);
    NFS_CHECK(num_frequencies_direction >= 0, "num_frequencies_direction must be >= 0, got ",
              num_frequencies_direction);
  }
};

inline constexpr std::size_t encoded_size(int frequencies) { return 3 + 6 * static_cast<std::size_t>(frequencies); }

/// zeta(x) = [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]
///
/// Kept out of line: when inlined, the compiler may fuse sin/cos into
/// sincos at some call sites only, and the two can differ in the last bit.
[[gnu::noinline]] inline void encode(const double* x, int frequencies, double* out) {
  out[0] = x[0];
  out[1] = x[1];
  out[2] = x[2];
  double scale = kPi;
  for (int l = 0; l < frequencies; ++l, scale *= 2.0) {
    double* o = out + 3 + 6 * l;
    for (int c = 0; c < 3; ++c) {
      o[c] = std::sin(scale * x[c]);
      o[3 + c] = std::cos(scale * x[c]);
    }
  }
}

inline std::vector<double> encode(const Vec3& x, int frequencies) {
  std::vector<double> out(encoded_size(frequencies));
  encode(x.data(), frequencies, out.data());
  return out;
}

struct FieldDims {
  int z_dim = 32;
  int w_dim = 32;
  int mapping_hidden = 64;
  int width = 64;
  int depth = 4;
  int feature_dim = 16;
  int upsample_factor = 4;
  int upsampler_hidden = 8;

  void validate() const {
    NFS_CHECK(z_dim >= 1 && w_dim >= 1 && mapping_hidden >= 1 && width >= 1 && depth >= 1,
              "field dimensions must be positive");
    NFS_CHECK(feature_dim >= 3, "feature_dim must be >= 3, got ", feature_dim);
    NFS_CHECK(upsample_factor >= 1 && upsampler_hidden >= 1, "invalid upsampler dimensions");
  }
};

/// Fully connected layer, weights row-major (out x in).
struct Dense {
  int out = 0, in = 0;
  std::vector<double> w, b;

  Dense() = default;
  Dense(int out_, int in_) : out(out_), in(in_), w(static_cast<std::size_t>(out_ * in_), 0.0), b(static_cast<std::size_t>(out_), 0.0) {}
  double weight(int j, int k) const { return w[static_cast<std::size_t>(j * in + k)]; }
  const double* row(int j) const { return w.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(in); }
};

/// 3x3 convolution, weights (out x in x 3 x 3).
struct Conv3 {
  int out = 0, in = 0;
  std::vector<double> w, b;

  Conv3() = default;
  Conv3(int out_, int in_) : out(out_), in(in_), w(static_cast<std::size_t>(out_ * in_ * 9), 0.0), b(static_cast<std::size_t>(out_), 0.0) {}
};

/// Every learned parameter of the generator: mapping network, field MLP and
/// upsampler. Also used as the gradient container.
struct FieldBundle {
  FieldDims dims;
  EncodingConfig enc;
  Dense map0, map1;
  std::vector<Dense> layers;  // input columns: [main, (direction,) style]
  Dense head;                 // row 0 density logit, rows 1..C features
  Dense up_scale, up_shift;   // per-channel style affine (C x w_dim)
  Conv3 conv1, conv2, conv3;

  std::size_t pos_size() const { return encoded_size(enc.num_frequencies_position); }
  std::size_t dir_size() const { return encoded_size(enc.num_frequencies_direction); }
  /// Width of the non-style input of layer l.
  int main_in(int l) const { return l == 0 ? static_cast<int>(pos_size()) : dims.width; }
  /// Column offset of the style block of layer l.
  int style_offset(int l) const { return l == 0 ? static_cast<int>(pos_size() + dir_size()) : dims.width; }
};

/// Allocates a bundle with every parameter zero.
inline FieldBundle zero_bundle(const FieldDims& dims, const EncodingConfig& enc) {
  dims.validate();
  enc.validate();
  FieldBundle b;
  b.dims = dims;
  b.enc = enc;
  b.map0 = Dense(dims.mapping_hidden, dims.z_dim);
  b.map1 = Dense(dims.w_dim, dims.mapping_hidden);
  for (int l = 0; l < dims.depth; ++l) {
    const int in = l == 0 ? static_cast<int>(encoded_size(enc.num_frequencies_position) +
                                             encoded_size(enc.num_frequencies_direction))
                          : dims.width;
    b.layers.emplace_back(dims.width, in + dims.w_dim);
  }
  b.head = Dense(1 + dims.feature_dim, dims.width);
  b.up_scale = Dense(dims.feature_dim, dims.w_dim);
  b.up_shift = Dense(dims.feature_dim, dims.w_dim);
  b.conv1 = Conv3(dims.upsampler_hidden, dims.feature_dim);
  b.conv2 = Conv3(dims.upsampler_hidden, dims.upsampler_hidden);
  b.conv3 = Conv3(3, dims.upsampler_hidden);
  return b;
}

inline FieldBundle zeros_like(const FieldBundle& b) { return zero_bundle(b.dims, b.enc); }

enum class ParamGroup { kMapping, kField, kUpsampler };

/// Visits every parameter vector with a stable name.
template <typename Bundle, typename Fn>
void for_each_param(Bundle& b, Fn&& fn) {
  auto dense = [&](auto& d, const std::string& name, ParamGroup g) {
    fn(name + ".weight", d.w, g);
    fn(name + ".bias", d.b, g);
  };
  dense(b.map0, "mapping.0", ParamGroup::kMapping);
  dense(b.map1, "mapping.1", ParamGroup::kMapping);
  for (std::size_t l = 0; l < b.layers.size(); ++l) dense(b.layers[l], "field." + std::to_string(l), ParamGroup::kField);
  dense(b.head, "field.head", ParamGroup::kField);
  dense(b.up_scale, "upsampler.scale", ParamGroup::kUpsampler);
  dense(b.up_shift, "upsampler.shift", ParamGroup::kUpsampler);
  dense(b.conv1, "upsampler.conv1", ParamGroup::kUpsampler);
  dense(b.conv2, "upsampler.conv2", ParamGroup::kUpsampler);
  dense(b.conv3, "upsampler.conv3", ParamGroup::kUpsampler);
}

/// FNV-1a over the raw bits of every parameter.
inline std::uint64_t checksum(const FieldBundle& b) {
  std::uint64_t h = 1469598103934665603ull;
  for_each_param(b, [&](const std::string&, const std::vector<double>& v, ParamGroup) {
    for (double x : v) {
      h ^= std::bit_cast<std::uint64_t>(x);
      h *= 1099511628211ull;
    }
  });
  return h;
}

// ---------------------------------------------------------------------------
// Pointwise pieces shared by the reference query and the batched kernels

inline constexpr double kLeakySlope = 0.2;
inline constexpr double kPriorScale = 4.0;
inline constexpr double kPriorRadius2 = 0.64;

inline double leaky(double x) { return x > 0 ? x : kLeakySlope * x; }

/// Additive density logit of a head-sized blob at the origin.
inline double density_prior(double r2) { return kPriorScale * (1.0 - r2 / kPriorRadius2); }

/// (1 - |p|^2)^2 inside the unit ball, 0 outside.
inline double density_window(double r2) {
  if (!(r2 < 1.0)) return 0.0;
  const double u = 1.0 - r2;
  return u * u;
}

inline double squared_radius(const double* p) { return p[0] * p[0] + p[1] * p[1] + p[2] * p[2]; }

// fma chain acc = fma(w[k], x[k], acc) for k = 0..n-1
inline double dot_fma(const double* w, const double* x, int n, double acc) {
  for (int k = 0; k < n; ++k) acc = std::fma(w[k], x[k], acc);
  return acc;
}

// ---------------------------------------------------------------------------
// Mapping network

using StyleLatent = Eigen::VectorXd;

inline StyleLatent map_latent(const FieldBundle& b, const Eigen::VectorXd& z) {
  NFS_CHECK(z.size() == b.dims.z_dim, "latent z has dimension ", z.size(), ", expected ", b.dims.z_dim);
  std::vector<double> h(static_cast<std::size_t>(b.map0.out));
  for (int j = 0; j < b.map0.out; ++j) h[static_cast<std::size_t>(j)] = leaky(dot_fma(b.map0.row(j), z.data(), b.map0.in, b.map0.b[static_cast<std::size_t>(j)]));
  StyleLatent w(b.map1.out);
  for (int j = 0; j < b.map1.out; ++j) w(j) = dot_fma(b.map1.row(j), h.data(), b.map1.in, b.map1.b[static_cast<std::size_t>(j)]);
  return w;
}

inline Eigen::VectorXd sample_z(const FieldDims& dims, Rng& rng) {
  Eigen::VectorXd z(dims.z_dim);
  for (auto& v : z) v = rng.normal();
  return z;
}

/// Mean of `count` mapped latents drawn from N(0, I) with the given seed.
inline StyleLatent mean_latent(const FieldBundle& b, int count = 1000, std::uint64_t seed = 0x5eed) {
  Rng rng(seed);
  StyleLatent acc = StyleLatent::Zero(b.dims.w_dim);
  for (int i = 0; i < count; ++i) acc += map_latent(b, sample_z(b.dims, rng));
  return acc / count;
}

// ---------------------------------------------------------------------------
// Field evaluation

/// Layer biases with the style contribution folded in:
/// s_l[j] = b_l[j] + sum_k W_l[j, style_k] w_k, as an fma chain over k.
inline std::vector<std::vector<double>> style_biases(const FieldBundle& b, const StyleLatent& w) {
  NFS_CHECK(w.size() == b.dims.w_dim, "style latent has dimension ", w.size(), ", expected ", b.dims.w_dim);
  NFS_CHECK(w.allFinite(), "style latent has non-finite entries");
  std::vector<std::vector<double>> out(b.layers.size());
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    const Dense& d = b.layers[l];
    const int off = b.style_offset(static_cast<int>(l));
    out[l].resize(static_cast<std::size_t>(d.out));
    for (int j = 0; j < d.out; ++j) out[l][static_cast<std::size_t>(j)] = dot_fma(d.row(j) + off, w.data(), b.dims.w_dim, d.b[static_cast<std::size_t>(j)]);
  }
  return out;
}

/// First-layer bias for one ray: style bias followed by the fma chain over
/// the direction encoding.
inline void ray_bias(const FieldBundle& b, const std::vector<double>& style0, const double* zeta_d, double* out) {
  const Dense& d = b.layers[0];
  const int off = static_cast<int>(b.pos_size());
  const int nd = static_cast<int>(b.dir_size());
  for (int j = 0; j < d.out; ++j) out[j] = dot_fma(d.row(j) + off, zeta_d, nd, style0[static_cast<std::size_t>(j)]);
}

struct FieldSample {
  std::vector<double> feature;
  double sigma = 0.0;
};

/// Raw head outputs (density logit without prior, feature logits) at one
/// point, given precomputed style biases and direction encoding.
inline void head_logits(const FieldBundle& b, const std::vector<std::vector<double>>& sb, const Vec3& p,
                        const double* zeta_d, double* out) {
  const auto zp = encode(p, b.enc.num_frequencies_position);
  std::vector<double> h(static_cast<std::size_t>(b.dims.width)), next(h.size());
  ray_bias(b, sb[0], zeta_d, next.data());
  for (int j = 0; j < b.dims.width; ++j)
    h[static_cast<std::size_t>(j)] = leaky(dot_fma(b.layers[0].row(j), zp.data(), static_cast<int>(zp.size()), next[static_cast<std::size_t>(j)]));
  for (std::size_t l = 1; l < b.layers.size(); ++l) {
    for (int j = 0; j < b.dims.width; ++j)
      next[static_cast<std::size_t>(j)] = leaky(dot_fma(b.layers[l].row(j), h.data(), b.dims.width, sb[l][static_cast<std::size_t>(j)]));
    std::swap(h, next);
  }
  for (int c = 0; c < b.head.out; ++c) out[c] = dot_fma(b.head.row(c), h.data(), b.dims.width, b.head.b[static_cast<std::size_t>(c)]);
}

/// F(zeta(p), zeta(d), w) -> (feature, sigma), one point at a time. The
/// batched renderer performs the identical arithmetic.
inline FieldSample query_field(const FieldBundle& b, const Vec3& p, const Vec3& d, const StyleLatent& w) {
  NFS_CHECK(std::abs(d.norm() - 1.0) <= 1e-6, "view direction must be unit length, |d| = ", d.norm());
  NFS_CHECK(p.allFinite(), "query point is not finite");
  const auto sb = style_biases(b, w);
  const auto zd = encode(d, b.enc.num_frequencies_direction);
  std::vector<double> raw(static_cast<std::size_t>(b.head.out));
  head_logits(b, sb, p, zd.data(), raw.data());
  FieldSample out;
  const double r2 = squared_radius(p.data());
  out.sigma = softplus(raw[0] + density_prior(r2)) * density_window(r2);
  out.feature.resize(static_cast<std::size_t>(b.dims.feature_dim));
  for (int c = 0; c < b.dims.feature_dim; ++c) out.feature[static_cast<std::size_t>(c)] = sigmoid(raw[static_cast<std::size_t>(c + 1)]);
  return out;
}

/// Reverse pass through one field evaluation. `g_sigma` and `g_feature`
/// are upstream gradients; parameter gradients are accumulated into `grad`
/// and the style gradient into `g_w` (both optional).
inline void field_point_backward(const FieldBundle& b, const std::vector<std::vector<double>>& sb, const Vec3& p,
                                 const double* zeta_d, const StyleLatent& w, double g_sigma, const double* g_feature,
                                 FieldBundle* grad, double* g_w) {
  const int width = b.dims.width, depth = static_cast<int>(b.layers.size());
  const auto zp = encode(p, b.enc.num_frequencies_position);
  // forward, keeping inputs and pre-activations
  std::vector<std::vector<double>> in(static_cast<std::size_t>(depth + 1)), pre(static_cast<std::size_t>(depth));
  in[0] = zp;
  std::vector<double> rb(static_cast<std::size_t>(width));
  ray_bias(b, sb[0], zeta_d, rb.data());
  for (int l = 0; l < depth; ++l) {
    const Dense& d = b.layers[static_cast<std::size_t>(l)];
    const auto& x = in[static_cast<std::size_t>(l)];
    auto& z = pre[static_cast<std::size_t>(l)];
    z.resize(static_cast<std::size_t>(width));
    auto& h = in[static_cast<std::size_t>(l + 1)];
    h.resize(static_cast<std::size_t>(width));
    for (int j = 0; j < width; ++j) {
      const double bias = l == 0 ? rb[static_cast<std::size_t>(j)] : sb[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)];
      z[static_cast<std::size_t>(j)] = dot_fma(d.row(j), x.data(), static_cast<int>(x.size()), bias);
      h[static_cast<std::size_t>(j)] = leaky(z[static_cast<std::size_t>(j)]);
    }
  }
  const auto& hl = in[static_cast<std::size_t>(depth)];
  std::vector<double> graw(static_cast<std::size_t>(b.head.out));
  {
    const double logit = dot_fma(b.head.row(0), hl.data(), width, b.head.b[0]);
    const double r2 = squared_radius(p.data());
    graw[0] = g_sigma * sigmoid(logit + density_prior(r2)) * density_window(r2);
    for (int c = 1; c < b.head.out; ++c) {
      const double f = sigmoid(dot_fma(b.head.row(c), hl.data(), width, b.head.b[static_cast<std::size_t>(c)]));
      graw[static_cast<std::size_t>(c)] = g_feature ? g_feature[c - 1] * f * (1.0 - f) : 0.0;
    }
  }
  std::vector<double> gh(static_cast<std::size_t>(width), 0.0);
  for (int c = 0; c < b.head.out; ++c) {
    const double g = graw[static_cast<std::size_t>(c)];
    if (grad) {
      double* gw_row = grad->head.w.data() + static_cast<std::size_t>(c) * static_cast<std::size_t>(width);
      for (int k = 0; k < width; ++k) gw_row[k] += g * hl[static_cast<std::size_t>(k)];
      grad->head.b[static_cast<std::size_t>(c)] += g;
    }
    for (int k = 0; k < width; ++k) gh[static_cast<std::size_t>(k)] += g * b.head.weight(c, k);
  }
  const int nd = static_cast<int>(b.dir_size());
  for (int l = depth - 1; l >= 0; --l) {
    const Dense& d = b.layers[static_cast<std::size_t>(l)];
    const auto& x = in[static_cast<std::size_t>(l)];
    const int nx = static_cast<int>(x.size()), off = b.style_offset(l);
    std::vector<double> gprev(static_cast<std::size_t>(nx), 0.0);
    for (int j = 0; j < width; ++j) {
      const double g = gh[static_cast<std::size_t>(j)] * (pre[static_cast<std::size_t>(l)][static_cast<std::size_t>(j)] > 0 ? 1.0 : kLeakySlope);
      const double* row = d.row(j);
      if (grad) {
        double* gr = grad->layers[static_cast<std::size_t>(l)].w.data() + static_cast<std::size_t>(j) * static_cast<std::size_t>(d.in);
        for (int k = 0; k < nx; ++k) gr[k] += g * x[static_cast<std::size_t>(k)];
        if (l == 0)
          for (int k = 0; k < nd; ++k) gr[nx + k] += g * zeta_d[k];
        for (int k = 0; k < b.dims.w_dim; ++k) gr[off + k] += g * w[k];
        grad->layers[static_cast<std::size_t>(l)].b[static_cast<std::size_t>(j)] += g;
      }
      if (g_w)
        for (int k = 0; k < b.dims.w_dim; ++k) g_w[k] += g * row[off + k];
      for (int k = 0; k < nx; ++k) gprev[static_cast<std::size_t>(k)] += g * row[k];
    }
    gh = std::move(gprev);
  }
}

// ---------------------------------------------------------------------------
// Initialisation and checkpoints

namespace detail {

inline void kaiming_uniform(std::vector<double>& w, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
  for (auto& v : w) v = rng.uniform(-bound, bound);
}

}  // namespace detail

/// Deterministic initialisation. The density bias is chosen by bisection so
/// that mean(sigma) * 2 sqrt(3) = 1 over uniform points of the cube, for the
/// mean mapped latent.
inline FieldBundle init_bundle(std::uint64_t seed, const FieldDims& dims = {}, const EncodingConfig& enc = {}) {
  FieldBundle b = zero_bundle(dims, enc);
  Rng rng(seed);
  Rng wr = rng.fork(1);
  detail::kaiming_uniform(b.map0.w, b.map0.in, wr);
  detail::kaiming_uniform(b.map1.w, b.map1.in, wr);
  for (auto& l : b.layers) detail::kaiming_uniform(l.w, l.in, wr);
  detail::kaiming_uniform(b.head.w, b.head.in, wr);
  detail::kaiming_uniform(b.conv1.w, b.conv1.in * 9, wr);
  detail::kaiming_uniform(b.conv2.w, b.conv2.in * 9, wr);

  const StyleLatent w = mean_latent(b);
  const auto sb = style_biases(b, w);
  Rng pr = rng.fork(2);
  const int n = 4096;
  std::vector<double> logits(n), prior(n), window(n), raw(static_cast<std::size_t>(b.head.out));
  for (int i = 0; i < n; ++i) {
    const Vec3 p(pr.uniform(-1, 1), pr.uniform(-1, 1), pr.uniform(-1, 1));
    Vec3 d(pr.normal(), pr.normal(), pr.normal());
    d.normalize();
    const double r2 = squared_radius(p.data());
    window[static_cast<std::size_t>(i)] = density_window(r2);
    prior[static_cast<std::size_t>(i)] = density_prior(r2);
    if (window[static_cast<std::size_t>(i)] == 0.0) continue;
    const auto zd = encode(d, b.enc.num_frequencies_direction);
    head_logits(b, sb, p, zd.data(), raw.data());
    logits[static_cast<std::size_t>(i)] = raw[0];  // density bias is still 0
  }
  const double target = 1.0 / (2.0 * std::sqrt(3.0));
  auto mean_sigma = [&](double bias) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i)
      if (window[static_cast<std::size_t>(i)] > 0)
        acc += softplus(logits[static_cast<std::size_t>(i)] + bias + prior[static_cast<std::size_t>(i)]) * window[static_cast<std::size_t>(i)];
    return acc / n;
  };
  double lo = -40.0, hi = 40.0;
  for (int it = 0; it < 80; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_sigma(mid) < target ? lo : hi) = mid;
  }
  b.head.b[0] = 0.5 * (lo + hi);
  return b;
}

/// Makes the field even in x: F(Mp, Md) = F(p, d) with M = diag(-1, 1, 1).
/// The first layer drops every input that is odd in x (x itself and its sine
/// features, for position and direction) and the upsampler kernels are
/// averaged with their left-right reflections.
inline void make_mirror_symmetric(FieldBundle& b) {
  Dense& l0 = b.layers[0];
  auto drop_odd = [&](int offset, int frequencies) {
    std::vector<int> cols{offset};
    for (int l = 0; l < frequencies; ++l) cols.push_back(offset + 3 + 6 * l);
    for (int j = 0; j < l0.out; ++j)
      for (int c : cols) l0.w[static_cast<std::size_t>(j * l0.in + c)] = 0.0;
  };
  drop_odd(0, b.enc.num_frequencies_position);
  drop_odd(static_cast<int>(b.pos_size()), b.enc.num_frequencies_direction);
  for (Conv3* c : {&b.conv1, &b.conv2, &b.conv3})
    for (std::size_t k = 0; k < c->w.size(); k += 9)
      for (int r = 0; r < 3; ++r) {
        double& a = c->w[k + static_cast<std::size_t>(3 * r)];
        double& z = c->w[k + static_cast<std::size_t>(3 * r + 2)];
        a = z = 0.5 * (a + z);
      }
}

inline ad::TensorMap bundle_to_tensors(const FieldBundle& b) {
  ad::TensorMap out;
  const auto& d = b.dims;
  out["config.dims"] = ad::Tensor({10}, {double(d.z_dim), double(d.w_dim), double(d.mapping_hidden), double(d.width),
                                         double(d.depth), double(d.feature_dim), double(d.upsample_factor),
                                         double(d.upsampler_hidden), double(b.enc.num_frequencies_position),
                                         double(b.enc.num_frequencies_direction)});
  for_each_param(b, [&](const std::string& name, const std::vector<double>& v, ParamGroup) {
    out[name] = ad::Tensor({v.size()}, v);
  });
  return out;
}

inline FieldBundle bundle_from_tensors(const ad::TensorMap& t) {
  const auto it = t.find("config.dims");
  NFS_CHECK(it != t.end() && it->second.size() == 10, "checkpoint is missing config.dims");
  const auto& c = it->second;
  FieldDims d;
  d.z_dim = int(c[0]);
  d.w_dim = int(c[1]);
  d.mapping_hidden = int(c[2]);
  d.width = int(c[3]);
  d.depth = int(c[4]);
  d.feature_dim = int(c[5]);
  d.upsample_factor = int(c[6]);
  d.upsampler_hidden = int(c[7]);
  EncodingConfig e{int(c[8]), int(c[9])};
  FieldBundle b = zero_bundle(d, e);
  for_each_param(b, [&](const std::string& name, std::vector<double>& v, ParamGroup) {
    const auto p = t.find(name);
    NFS_CHECK(p != t.end(), "checkpoint is missing tensor \"", name, "\"");
    NFS_CHECK(p->second.size() == v.size(), "tensor \"", name, "\" has ", p->second.size(), " values, expected ",
              v.size());
    v = p->second.values();
  });
  return b;
}

inline void save_bundle(const std::string& path, const FieldBundle& b) { ad::save_checkpoint(path, bundle_to_tensors(b)); }
inline FieldBundle load_bundle(const std::string& path) { return bundle_from_tensors(ad::load_checkpoint(path)); }

}  // namespace nfs
