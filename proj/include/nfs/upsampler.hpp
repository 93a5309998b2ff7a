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

// Feature map -> RGB image.
//
//   U   = bilinear x s of every channel (half-pixel centres, edge clamped)
//   V_c = U_c * (1 + A_s w + b_s)_c + (A_b w + b_b)_c
//   R   = conv3(leaky(conv2(leaky(conv1(V)))))          3x3, replicate pad
//   out = sigmoid(logit(q(V_rgb)) + R),  q(v) = eps + (1 - 2 eps) clamp(v, 0, 1)
//
// With the zero-initialised affine and conv3 the output equals the bilinear
// upsampling of the first three channels.

#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "nfs/field.hpp"
#include "nfs/render.hpp"

namespace nfs {

namespace detail {

inline constexpr double kLogitEps = 1e-12;

struct Planes {
  int c = 0, h = 0, w = 0;
  std::vector<double> v;

  Planes() = default;
  Planes(int c_, int h_, int w_) : c(c_), h(h_), w(w_), v(static_cast<std::size_t>(c_) * static_cast<std::size_t>(h_) * static_cast<std::size_t>(w_), 0.0) {}
  double* plane(int k) { return v.data() + static_cast<std::size_t>(k) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  const double* plane(int k) const { return v.data() + static_cast<std::size_t>(k) * static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
};

/// Source taps of a half-pixel bilinear resize along one axis.
struct Taps {
  std::vector<int> i0, i1;
  std::vector<double> f;
};

inline Taps resize_taps(int in, int out) {
  Taps t;
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    const double src = std::clamp((o + 0.5) * scale - 0.5, 0.0, static_cast<double>(in - 1));
    const int a = std::min(static_cast<int>(std::floor(src)), in - 1);
    t.i0.push_back(a);
    t.i1.push_back(std::min(a + 1, in - 1));
    t.f.push_back(src - a);
  }
  return t;
}

inline Planes bilinear(const FeatureMap& fm, int oh, int ow) {
  const Taps ty = resize_taps(fm.height, oh), tx = resize_taps(fm.width, ow);
  Planes out(fm.channels, oh, ow);
  for (int k = 0; k < fm.channels; ++k) {
    double* o = out.plane(k);
    for (int y = 0; y < oh; ++y) {
      const int y0 = ty.i0[static_cast<std::size_t>(y)], y1 = ty.i1[static_cast<std::size_t>(y)];
      const double fy = ty.f[static_cast<std::size_t>(y)];
      for (int x = 0; x < ow; ++x) {
        const int x0 = tx.i0[static_cast<std::size_t>(x)], x1 = tx.i1[static_cast<std::size_t>(x)];
        const double fx = tx.f[static_cast<std::size_t>(x)];
        const double top = (1 - fx) * fm.at(y0, x0, k) + fx * fm.at(y0, x1, k);
        const double bot = (1 - fx) * fm.at(y1, x0, k) + fx * fm.at(y1, x1, k);
        o[static_cast<std::size_t>(y) * static_cast<std::size_t>(ow) + static_cast<std::size_t>(x)] = (1 - fy) * top + fy * bot;
      }
    }
  }
  return out;
}

inline void bilinear_backward(const Planes& g, FeatureMap& gfm) {
  const Taps ty = resize_taps(gfm.height, g.h), tx = resize_taps(gfm.width, g.w);
  for (int k = 0; k < g.c; ++k) {
    const double* gp = g.plane(k);
    for (int y = 0; y < g.h; ++y) {
      const int y0 = ty.i0[static_cast<std::size_t>(y)], y1 = ty.i1[static_cast<std::size_t>(y)];
      const double fy = ty.f[static_cast<std::size_t>(y)];
      for (int x = 0; x < g.w; ++x) {
        const int x0 = tx.i0[static_cast<std::size_t>(x)], x1 = tx.i1[static_cast<std::size_t>(x)];
        const double fx = tx.f[static_cast<std::size_t>(x)];
        const double v = gp[static_cast<std::size_t>(y) * static_cast<std::size_t>(g.w) + static_cast<std::size_t>(x)];
        gfm.at(y0, x0, k) += (1 - fy) * (1 - fx) * v;
        gfm.at(y0, x1, k) += (1 - fy) * fx * v;
        gfm.at(y1, x0, k) += fy * (1 - fx) * v;
        gfm.at(y1, x1, k) += fy * fx * v;
      }
    }
  }
}

/// Source row/column index for tap d in {0, 1, 2} with replicate padding.
inline int clamp_index(int i, int d, int n) { return std::clamp(i + d - 1, 0, n - 1); }

inline Planes conv3x3(const Planes& in, const Conv3& cv) {
  NFS_CHECK(in.c == cv.in, "conv expects ", cv.in, " channels, got ", in.c);
  Planes out(cv.out, in.h, in.w);
  for (int o = 0; o < cv.out; ++o) {
    double* op = out.plane(o);
    std::fill(op, op + static_cast<std::ptrdiff_t>(in.h) * in.w, cv.b[static_cast<std::size_t>(o)]);
    for (int i = 0; i < cv.in; ++i) {
      const double* ip = in.plane(i);
      for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx) {
          const double a = cv.w[((static_cast<std::size_t>(o) * cv.in + static_cast<std::size_t>(i)) * 3 + static_cast<std::size_t>(dy)) * 3 + static_cast<std::size_t>(dx)];
          if (a == 0.0) continue;
          for (int y = 0; y < in.h; ++y) {
            const double* src = ip + static_cast<std::size_t>(clamp_index(y, dy, in.h)) * static_cast<std::size_t>(in.w);
            double* dst = op + static_cast<std::size_t>(y) * static_cast<std::size_t>(in.w);
            dst[0] += a * src[clamp_index(0, dx, in.w)];
            for (int x = 1; x < in.w - 1; ++x) dst[x] += a * src[x + dx - 1];
            if (in.w > 1) dst[in.w - 1] += a * src[clamp_index(in.w - 1, dx, in.w)];
          }
        }
    }
  }
  return out;
}

/// Weight/bias gradients (optional) and input gradient (optional).
inline void conv3x3_backward(const Planes& in, const Conv3& cv, const Planes& g, Conv3* gcv, Planes* gin) {
  for (int o = 0; o < cv.out; ++o) {
    const double* gp = g.plane(o);
    if (gcv) {
      double acc = 0;
      for (std::size_t q = 0; q < static_cast<std::size_t>(g.h) * static_cast<std::size_t>(g.w); ++q) acc += gp[q];
      gcv->b[static_cast<std::size_t>(o)] += acc;
    }
    for (int i = 0; i < cv.in; ++i) {
      const double* ip = in.plane(i);
      double* gi = gin ? gin->plane(i) : nullptr;
      for (int dy = 0; dy < 3; ++dy)
        for (int dx = 0; dx < 3; ++dx) {
          const std::size_t widx = ((static_cast<std::size_t>(o) * cv.in + static_cast<std::size_t>(i)) * 3 + static_cast<std::size_t>(dy)) * 3 + static_cast<std::size_t>(dx);
          const double a = cv.w[widx];
          double acc = 0;
          for (int y = 0; y < in.h; ++y) {
            const std::size_t srow = static_cast<std::size_t>(clamp_index(y, dy, in.h)) * static_cast<std::size_t>(in.w);
            const double* grow = gp + static_cast<std::size_t>(y) * static_cast<std::size_t>(in.w);
            for (int x = 0; x < in.w; ++x) {
              const std::size_t s = srow + static_cast<std::size_t>(clamp_index(x, dx, in.w));
              acc += grow[x] * ip[s];
              if (gi && a != 0.0) gi[s] += a * grow[x];
            }
          }
          if (gcv) gcv->w[widx] += acc;
        }
    }
  }
}

inline bool all_zero(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

struct StyleAffine {
  std::vector<double> scale, shift;  // per channel
};

inline StyleAffine style_affine(const FieldBundle& b, const StyleLatent& w) {
  NFS_CHECK(w.size() == b.dims.w_dim, "style latent has dimension ", w.size(), ", expected ", b.dims.w_dim);
  StyleAffine a;
  for (int c = 0; c < b.dims.feature_dim; ++c) {
    a.scale.push_back(1.0 + dot_fma(b.up_scale.row(c), w.data(), b.dims.w_dim, b.up_scale.b[static_cast<std::size_t>(c)]));
    a.shift.push_back(dot_fma(b.up_shift.row(c), w.data(), b.dims.w_dim, b.up_shift.b[static_cast<std::size_t>(c)]));
  }
  return a;
}

/// Forward intermediates kept for the reverse pass.
struct UpsampleTrace {
  Planes u, v, h1, h2, r;
  bool residual = false;
};

inline Planes leaky_planes(Planes p) {
  for (auto& x : p.v) x = leaky(x);
  return p;
}

inline double squash(double v) { return kLogitEps + (1.0 - 2.0 * kLogitEps) * std::clamp(v, 0.0, 1.0); }

inline Image upsample_traced(const FieldBundle& b, const FeatureMap& fm, const StyleLatent& w, UpsampleTrace& tr,
                             bool need_hidden) {
  NFS_CHECK(fm.channels == b.dims.feature_dim && fm.channels >= 3, "upsample expects ", b.dims.feature_dim,
            " channels, got ", fm.channels);
  const int s = b.dims.upsample_factor, oh = fm.height * s, ow = fm.width * s;
  tr.u = bilinear(fm, oh, ow);
  const StyleAffine a = style_affine(b, w);
  tr.v = tr.u;
  for (int c = 0; c < tr.v.c; ++c) {
    double* p = tr.v.plane(c);
    for (std::size_t q = 0; q < static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow); ++q) p[q] = p[q] * a.scale[static_cast<std::size_t>(c)] + a.shift[static_cast<std::size_t>(c)];
  }
  tr.residual = !all_zero(b.conv3.w);
  if (tr.residual || need_hidden) {
    tr.h1 = leaky_planes(conv3x3(tr.v, b.conv1));
    tr.h2 = leaky_planes(conv3x3(tr.h1, b.conv2));
  }
  if (tr.residual) {
    tr.r = conv3x3(tr.h2, b.conv3);
  } else {
    tr.r = Planes(3, oh, ow);
    for (int c = 0; c < 3; ++c) std::fill(tr.r.plane(c), tr.r.plane(c) + static_cast<std::ptrdiff_t>(oh) * ow, b.conv3.b[static_cast<std::size_t>(c)]);
  }
  Image img(oh, ow, 3);
  for (int c = 0; c < 3; ++c) {
    const double* vp = tr.v.plane(c);
    const double* rp = tr.r.plane(c);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const std::size_t q = static_cast<std::size_t>(y) * static_cast<std::size_t>(ow) + static_cast<std::size_t>(x);
        const double sq = squash(vp[q]);
        img.at(y, x, c) = sigmoid(std::log(sq / (1.0 - sq)) + rp[q]);
      }
  }
  return img;
}

}  // namespace detail

/// Style-modulated x s upsampler producing an RGB image in [0, 1].
inline Image upsample(const FieldBundle& b, const FeatureMap& fm, const StyleLatent& w) {
  detail::UpsampleTrace tr;
  return detail::upsample_traced(b, fm, w, tr, false);
}

/// Reverse pass. Upsampler parameter gradients go to `grad` (if set), the
/// style gradient to `g_w` (if set) and the feature-map gradient to
/// `grad_fm` (if set, accumulated).
inline void upsample_backward(const FieldBundle& b, const FeatureMap& fm, const StyleLatent& w, const Image& grad_out,
                              FieldBundle* grad, double* g_w, FeatureMap* grad_fm) {
  using detail::Planes;
  detail::UpsampleTrace tr;
  const Image img = detail::upsample_traced(b, fm, w, tr, grad != nullptr);
  NFS_CHECK(grad_out.same_shape(img), "image gradient has shape ", grad_out.height, "x", grad_out.width, "x",
            grad_out.channels, ", expected ", img.height, "x", img.width, "x", img.channels);
  const int oh = img.height, ow = img.width, c_all = fm.channels;
  const std::size_t n = static_cast<std::size_t>(oh) * static_cast<std::size_t>(ow);
  Planes gz(3, oh, ow);  // gradient at the pre-sigmoid sum
  Planes gv(c_all, oh, ow);
  for (int c = 0; c < 3; ++c) {
    const double* vp = tr.v.plane(c);
    double* gzp = gz.plane(c);
    double* gvp = gv.plane(c);
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        const std::size_t q = static_cast<std::size_t>(y) * static_cast<std::size_t>(ow) + static_cast<std::size_t>(x);
        const double o = img.at(y, x, c);
        const double g = grad_out.at(y, x, c) * o * (1.0 - o);
        gzp[q] = g;
        const double v = vp[q];
        if (v > 0.0 && v < 1.0) {
          const double sq = detail::squash(v);
          gvp[q] = g * (1.0 - 2.0 * detail::kLogitEps) / (sq * (1.0 - sq));
        }
      }
  }
  // residual branch
  if (grad) {
    for (int c = 0; c < 3; ++c) {
      double acc = 0;
      for (std::size_t q = 0; q < n; ++q) acc += gz.plane(c)[q];
      grad->conv3.b[static_cast<std::size_t>(c)] += acc;
    }
  }
  if (tr.residual || grad) {
    Planes gh2(tr.h2.c, oh, ow);
    Conv3 tmp3(b.conv3.out, b.conv3.in);
    detail::conv3x3_backward(tr.h2, b.conv3, gz, &tmp3, tr.residual ? &gh2 : nullptr);
    if (grad)
      for (std::size_t k = 0; k < tmp3.w.size(); ++k) grad->conv3.w[k] += tmp3.w[k];
    if (tr.residual) {
      // leaky' from the stored activations: leaky(z) > 0 iff z > 0
      for (std::size_t q = 0; q < gh2.v.size(); ++q) gh2.v[q] *= tr.h2.v[q] > 0 ? 1.0 : kLeakySlope;
      Planes gh1(tr.h1.c, oh, ow);
      detail::conv3x3_backward(tr.h1, b.conv2, gh2, grad ? &grad->conv2 : nullptr, &gh1);
      for (std::size_t q = 0; q < gh1.v.size(); ++q) gh1.v[q] *= tr.h1.v[q] > 0 ? 1.0 : kLeakySlope;
      Planes gv_conv(c_all, oh, ow);
      detail::conv3x3_backward(tr.v, b.conv1, gh1, grad ? &grad->conv1 : nullptr, &gv_conv);
      for (std::size_t q = 0; q < gv.v.size(); ++q) gv.v[q] += gv_conv.v[q];
    }
  }
  // style affine
  const detail::StyleAffine a = detail::style_affine(b, w);
  Planes gu(c_all, oh, ow);
  for (int c = 0; c < c_all; ++c) {
    const double* up = tr.u.plane(c);
    const double* gvp = gv.plane(c);
    double g_scale = 0, g_shift = 0;
    for (std::size_t q = 0; q < n; ++q) {
      g_scale += gvp[q] * up[q];
      g_shift += gvp[q];
      gu.plane(c)[q] = gvp[q] * a.scale[static_cast<std::size_t>(c)];
    }
    for (int k = 0; k < b.dims.w_dim; ++k) {
      if (grad) {
        grad->up_scale.w[static_cast<std::size_t>(c) * static_cast<std::size_t>(b.dims.w_dim) + static_cast<std::size_t>(k)] += g_scale * w(k);
        grad->up_shift.w[static_cast<std::size_t>(c) * static_cast<std::size_t>(b.dims.w_dim) + static_cast<std::size_t>(k)] += g_shift * w(k);
      }
      if (g_w) g_w[k] += g_scale * b.up_scale.weight(c, k) + g_shift * b.up_shift.weight(c, k);
    }
    if (grad) {
      grad->up_scale.b[static_cast<std::size_t>(c)] += g_scale;
      grad->up_shift.b[static_cast<std::size_t>(c)] += g_shift;
    }
  }
  if (grad_fm) {
    NFS_CHECK(grad_fm->same_shape(fm), "feature-map gradient buffer has the wrong shape");
    detail::bilinear_backward(gu, *grad_fm);
  }
}

/// Feature render followed by the upsampler.
inline Image render_image(const FieldBundle& b, const StyleLatent& w, const RenderSpec& spec,
                          const DisplacementField* deform = nullptr) {
  return upsample(b, render_feature_map(b, w, spec, deform), w);
}

/// Gradients of a scalar image loss through upsampler and renderer,
/// accumulated into `grad`.
inline void render_image_backward(const FieldBundle& b, const StyleLatent& w, const RenderSpec& spec,
                                  const DisplacementField* deform, const Image& grad_out, RenderGrad& grad) {
  const FeatureMap fm = render_feature_map(b, w, spec, deform);
  FeatureMap gfm(fm.height, fm.width, fm.channels);
  upsample_backward(b, fm, w, grad_out, &grad.params, grad.w.data(), &gfm);
  render_feature_map_backward(b, w, spec, deform, gfm, grad);
}

}  // namespace nfs
