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

// Mouth masks, their temporal smoothing, and feature-space blending.

#pragma once

#include <algorithm>
#include <cmath>
#include <deque>
#include <vector>

#include "nfs/core.hpp"
#include "nfs/render.hpp"
#include "nfs/upsampler.hpp"

namespace nfs {

struct MouthMask {
  int height = 0;
  int width = 0;
  std::vector<double> values;  // row-major, in [0, 1]

  MouthMask() = default;
  MouthMask(int h, int w, double fill = 0.0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {
    NFS_CHECK(h >= 1 && w >= 1, "mask size must be positive, got ", h, "x", w);
  }
  double& at(int i, int j) { return values[static_cast<std::size_t>(i) * static_cast<std::size_t>(width) + static_cast<std::size_t>(j)]; }
  double at(int i, int j) const { return values[static_cast<std::size_t>(i) * static_cast<std::size_t>(width) + static_cast<std::size_t>(j)]; }
  bool same_shape(const MouthMask& o) const { return height == o.height && width == o.width; }

  /// One-channel image for dumping.
  Image to_image() const {
    Image img(height, width, 1);
    img.data = values;
    return img;
  }
};

namespace detail {

using Point2 = std::pair<double, double>;

inline double cross2(const Point2& o, const Point2& a, const Point2& b) {
  return (a.first - o.first) * (b.second - o.second) - (a.second - o.second) * (b.first - o.first);
}

/// Andrew's monotone chain, counter-clockwise (in x-right, y-down pixel
/// coordinates the orientation is mirrored, which does not matter here).
inline std::vector<Point2> convex_hull(std::vector<Point2> pts) {
  std::sort(pts.begin(), pts.end());
  pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
  if (pts.size() < 3) return pts;
  std::vector<Point2> hull(2 * pts.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    while (k >= 2 && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
    while (k >= t && cross2(hull[k - 2], hull[k - 1], pts[i]) <= 0) --k;
    hull[k++] = pts[i];
  }
  hull.resize(k - 1);
  return hull;
}

inline bool inside_hull(const std::vector<Point2>& hull, const Point2& p) {
  for (std::size_t i = 0; i < hull.size(); ++i)
    if (cross2(hull[i], hull[(i + 1) % hull.size()], p) < 0) return false;
  return true;
}

inline void dilate(MouthMask& m) {
  const MouthMask src = m;
  for (int i = 0; i < m.height; ++i)
    for (int j = 0; j < m.width; ++j) {
      double v = 0;
      for (int di = -1; di <= 1; ++di)
        for (int dj = -1; dj <= 1; ++dj) {
          const int y = i + di, x = j + dj;
          if (y >= 0 && y < m.height && x >= 0 && x < m.width) v = std::max(v, src.at(y, x));
        }
      m.at(i, j) = v;
    }
}

// Separable Gaussian with edge replication.
inline void gaussian_blur(MouthMask& m, double sigma) {
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double total = 0;
  for (int d = -r; d <= r; ++d) total += k[static_cast<std::size_t>(d + r)] = std::exp(-0.5 * d * d / (sigma * sigma));
  for (double& v : k) v /= total;
  auto pass = [&](bool horizontal) {
    const MouthMask src = m;
    for (int i = 0; i < m.height; ++i)
      for (int j = 0; j < m.width; ++j) {
        double acc = 0;
        for (int d = -r; d <= r; ++d) {
          const int y = horizontal ? i : std::clamp(i + d, 0, m.height - 1);
          const int x = horizontal ? std::clamp(j + d, 0, m.width - 1) : j;
          acc += k[static_cast<std::size_t>(d + r)] * src.at(y, x);
        }
        m.at(i, j) = std::clamp(acc, 0.0, 1.0);
      }
  };
  pass(true);
  pass(false);
}

}  // namespace detail

/// Rasterises the convex hull of the projected mouth vertices (pixel centres
/// inside or on the hull), dilates by one pixel and feathers with a Gaussian
/// of `feather` pixels. Vertices behind the camera are dropped; a hull with
/// fewer than three points gives an empty mask.
inline MouthMask project_mouth_mask(const Points3& mouth_vertices, const CameraPose& pose, int h, int w,
                                    double feather) {
  NFS_CHECK(mouth_vertices.rows() >= 3, "mouth mask needs at least 3 vertices, got ", mouth_vertices.rows());
  NFS_CHECK(feather >= 0 && std::isfinite(feather), "feather must be >= 0, got ", feather);
  NFS_CHECK(mouth_vertices.allFinite(), "mouth vertices are not finite");
  pose.validate();
  MouthMask mask(h, w);
  std::vector<detail::Point2> pts;
  for (Eigen::Index v = 0; v < mouth_vertices.rows(); ++v)
    if (auto uv = project_point(pose, h, w, mouth_vertices.row(v).transpose())) pts.push_back(*uv);
  const auto hull = detail::convex_hull(std::move(pts));
  if (hull.size() < 3) return mask;

  double x0 = hull[0].first, x1 = x0, y0 = hull[0].second, y1 = y0;
  for (const auto& [x, y] : hull) {
    x0 = std::min(x0, x), x1 = std::max(x1, x);
    y0 = std::min(y0, y), y1 = std::max(y1, y);
  }
  const int i0 = std::max(0, static_cast<int>(std::floor(y0 - 0.5))), i1 = std::min(h - 1, static_cast<int>(std::ceil(y1)));
  const int j0 = std::max(0, static_cast<int>(std::floor(x0 - 0.5))), j1 = std::min(w - 1, static_cast<int>(std::ceil(x1)));
  for (int i = i0; i <= i1; ++i)
    for (int j = j0; j <= j1; ++j)
      if (detail::inside_hull(hull, {j + 0.5, i + 0.5})) mask.at(i, j) = 1.0;
  detail::dilate(mask);
  if (feather > 0) detail::gaussian_blur(mask, feather);
  return mask;
}

/// The last `capacity` masks, oldest first.
class MaskHistory {
 public:
  explicit MaskHistory(std::size_t capacity) : capacity_(capacity) {
    NFS_CHECK(capacity >= 1, "mask history capacity must be >= 1");
  }

  void push(MouthMask m) {
    if (!masks_.empty()) NFS_CHECK(m.same_shape(masks_.front()), "mask shape changed inside a history");
    if (masks_.size() == capacity_) masks_.pop_front();
    masks_.push_back(std::move(m));
  }

  std::size_t size() const { return masks_.size(); }
  std::size_t capacity() const { return capacity_; }
  bool empty() const { return masks_.empty(); }
  const std::deque<MouthMask>& masks() const { return masks_; }

 private:
  std::size_t capacity_;
  std::deque<MouthMask> masks_;
};

/// Pixelwise mean over the stored masks; during warm-up only the masks that
/// exist are averaged.
inline MouthMask average_mask(const MaskHistory& history) {
  NFS_CHECK(!history.empty(), "cannot average an empty mask history");
  const auto& ms = history.masks();
  MouthMask out(ms.front().height, ms.front().width);
  for (std::size_t p = 0; p < out.values.size(); ++p) {
    double acc = 0;
    for (const auto& m : ms) acc += m.values[p];
    out.values[p] = std::clamp(acc / static_cast<double>(ms.size()), 0.0, 1.0);
  }
  return out;
}

/// phi_d * (1 - m) + phi_exp * m, with the mask broadcast over channels.
inline FeatureMap blend(const FeatureMap& phi_deformed, const FeatureMap& phi_exp, const MouthMask& mask) {
  NFS_CHECK(phi_deformed.same_shape(phi_exp), "blend: feature maps differ in shape");
  NFS_CHECK(mask.height == phi_deformed.height && mask.width == phi_deformed.width, "blend: mask is ", mask.height,
            "x", mask.width, ", features are ", phi_deformed.height, "x", phi_deformed.width);
  FeatureMap out = phi_deformed;
  for (int i = 0; i < out.height; ++i)
    for (int j = 0; j < out.width; ++j) {
      const double m = mask.at(i, j);
      NFS_CHECK(m >= 0 && m <= 1, "mask value ", m, " outside [0, 1]");
      for (int k = 0; k < out.channels; ++k)
        out.at(i, j, k) = phi_deformed.at(i, j, k) * (1.0 - m) + phi_exp.at(i, j, k) * m;
      if (!out.opacity.empty() && !phi_exp.opacity.empty()) {
        const auto p = static_cast<std::size_t>(i) * static_cast<std::size_t>(out.width) + static_cast<std::size_t>(j);
        out.opacity[p] = phi_deformed.opacity[p] * (1.0 - m) + phi_exp.opacity[p] * m;
      }
    }
  return out;
}

/// Final RGB frame from blended features.
inline Image compose_final(const FieldBundle& bundle, const FeatureMap& phi_blended, const StyleLatent& w) {
  return upsample(bundle, phi_blended, w);
}

}  // namespace nfs
