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

// Ray deformation: face-model vertices are bound one-to-one to field-space
// anchors on the frontal XY plane, and per-vertex displacements are spread
// to arbitrary sample points by compactly supported inverse-distance
// weighting.
//
// Sign convention (backward warp): the stored displacement is
// V_init - V_audio, and a sample point p is looked up in the canonical field
// at p + displacement_at(p).

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "nfs/core.hpp"
#include "nfs/face_model.hpp"

namespace nfs {

/// p_field = (p_model - center) * scale.
struct FieldTransform {
  Vec3 center = Vec3::Zero();
  double scale = 1.0;

  Vec3 apply(const Vec3& p) const { return (p - center) * scale; }
  Vec3 invert(const Vec3& q) const { return q / scale + center; }
  Vec3 apply_linear(const Vec3& v) const { return v * scale; }
};

inline constexpr double kFieldExtent = 1.6;

/// Sends the bbox centre to the origin and its largest extent to 1.6.
inline FieldTransform field_transform(const BoundingBox& bbox) {
  const double extent = bbox.extent().maxCoeff();
  NFS_CHECK(std::isfinite(extent) && extent > 1e-12, "degenerate bounding box (largest extent ", extent, ")");
  return {bbox.center(), kFieldExtent / extent};
}

inline Points3 scale_to_field(const VertexSet& vertices, const BoundingBox& bbox) {
  const FieldTransform t = field_transform(bbox);
  Points3 out(vertices.size(), 3);
  for (Eigen::Index i = 0; i < vertices.size(); ++i) out.row(i) = t.apply(vertices.positions.row(i).transpose()).transpose();
  return out;
}

/// XY pixel-centre lattice over [-1, 1]^2 (z = 0), row-major from the top.
inline Points3 anchor_lattice(int h, int w) {
  NFS_CHECK(h >= 1 && w >= 1, "lattice size must be positive");
  Points3 g(static_cast<Eigen::Index>(h) * w, 3);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      g.row(static_cast<Eigen::Index>(i) * w + j) << -1.0 + (j + 0.5) * 2.0 / w, 1.0 - (i + 0.5) * 2.0 / h, 0.0;
  return g;
}

struct VertexBinding {
  std::vector<std::uint32_t> vertices;  // vertex index per pair
  Points3 anchors;                      // field-space anchor per pair
  std::vector<std::uint32_t> grid_index;
  FieldTransform transform;

  std::size_t size() const { return vertices.size(); }
};

namespace detail {

inline double xy_distance(const Points3& a, Eigen::Index i, const Points3& b, Eigen::Index j) {
  return std::hypot(a(i, 0) - b(j, 0), a(i, 1) - b(j, 1));
}

/// Minimum-cost assignment of n rows to distinct columns (n <= m), O(n^2 m)
/// shortest augmenting paths with potentials.
inline std::vector<int> hungarian(const std::vector<double>& cost, int n, int m) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost[static_cast<std::size_t>(i0 - 1) * static_cast<std::size_t>(m) + static_cast<std::size_t>(j - 1)] -
                           u[static_cast<std::size_t>(i0)] - v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) minv[static_cast<std::size_t>(j)] = cur, way[static_cast<std::size_t>(j)] = j0;
        if (minv[static_cast<std::size_t>(j)] < delta) delta = minv[static_cast<std::size_t>(j)], j1 = j;
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> assign(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<std::size_t>(j)] != 0) assign[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
  return assign;
}

}  // namespace detail

inline constexpr std::size_t kOptimalBindingLimit = 256;

/// One-to-one XY matching of field-space vertices to grid points. Up to 256
/// vertices the assignment minimises the total XY distance exactly; above
/// that, vertices are taken in ascending order of their nearest-grid distance
/// and each claims its nearest unused grid point. Anchors keep the vertex z.
inline VertexBinding bind_vertices(const Points3& vertices_field, const Points3& grid,
                                   const std::vector<std::uint32_t>& vertex_ids = {},
                                   std::size_t optimal_limit = kOptimalBindingLimit) {
  const Eigen::Index m = vertices_field.rows(), g = grid.rows();
  NFS_CHECK(vertex_ids.empty() || static_cast<Eigen::Index>(vertex_ids.size()) == m, "vertex id count ",
            vertex_ids.size(), " does not match ", m, " vertices");
  NFS_CHECK(g >= m, "grid exhausted: ", g, " grid points for ", m, " vertices");
  std::vector<int> assign(static_cast<std::size_t>(m), -1);
  if (static_cast<std::size_t>(m) <= optimal_limit) {
    std::vector<double> cost(static_cast<std::size_t>(m * g));
    for (Eigen::Index i = 0; i < m; ++i)
      for (Eigen::Index j = 0; j < g; ++j) cost[static_cast<std::size_t>(i * g + j)] = detail::xy_distance(vertices_field, i, grid, j);
    if (m > 0) assign = detail::hungarian(cost, static_cast<int>(m), static_cast<int>(g));
  } else {
    // nearest-distance per vertex, then greedy claims in ascending order
    std::vector<std::pair<double, Eigen::Index>> order;
    for (Eigen::Index i = 0; i < m; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < g; ++j) best = std::min(best, detail::xy_distance(vertices_field, i, grid, j));
      order.emplace_back(best, i);
    }
    std::sort(order.begin(), order.end());
    std::vector<char> used(static_cast<std::size_t>(g), 0);
    for (const auto& [dist, i] : order) {
      double best = std::numeric_limits<double>::infinity();
      Eigen::Index arg = -1;
      for (Eigen::Index j = 0; j < g; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double d = detail::xy_distance(vertices_field, i, grid, j);
        if (d < best) best = d, arg = j;
      }
      NFS_CHECK(arg >= 0, "grid exhausted while binding vertex ", i);
      used[static_cast<std::size_t>(arg)] = 1;
      assign[static_cast<std::size_t>(i)] = static_cast<int>(arg);
    }
  }
  VertexBinding b;
  b.anchors.resize(m, 3);
  for (Eigen::Index i = 0; i < m; ++i) {
    const int j = assign[static_cast<std::size_t>(i)];
    b.vertices.push_back(vertex_ids.empty() ? static_cast<std::uint32_t>(i) : vertex_ids[static_cast<std::size_t>(i)]);
    b.grid_index.push_back(static_cast<std::uint32_t>(j));
    b.anchors.row(i) << grid(j, 0), grid(j, 1), vertices_field(i, 2);
  }
  return b;
}

/// Binds the front-facing vertices (model z > 0) of `vertices` to the
/// lattice of an h x w feature map.
inline VertexBinding bind_face(const VertexSet& vertices, const BoundingBox& bbox, int h, int w,
                               std::size_t optimal_limit = kOptimalBindingLimit) {
  const FieldTransform t = field_transform(bbox);
  const Points3 field = scale_to_field(vertices, bbox);
  std::vector<std::uint32_t> ids;
  for (Eigen::Index i = 0; i < vertices.size(); ++i)
    if (vertices.positions(i, 2) > 0.0) ids.push_back(static_cast<std::uint32_t>(i));
  Points3 subset(static_cast<Eigen::Index>(ids.size()), 3);
  for (std::size_t i = 0; i < ids.size(); ++i) subset.row(static_cast<Eigen::Index>(i)) = field.row(ids[i]);
  VertexBinding b = bind_vertices(subset, anchor_lattice(h, w), ids, optimal_limit);
  b.transform = t;
  return b;
}

/// Anchors with displacements, plus a uniform grid index for radius queries.
class DisplacementField {
 public:
  DisplacementField() = default;

  DisplacementField(Points3 anchors, Points3 displacements, int k, double radius)
      : anchors_(std::move(anchors)), disp_(std::move(displacements)), k_(k), radius_(radius) {
    NFS_CHECK(anchors_.rows() == disp_.rows(), "anchor/displacement count mismatch");
    NFS_CHECK(k_ >= 1, "k_neighbors must be >= 1, got ", k_);
    NFS_CHECK(radius_ > 0, "support radius must be positive, got ", radius_);
    NFS_CHECK(anchors_.allFinite() && disp_.allFinite(), "displacement field has non-finite values");
    for (Eigen::Index i = 0; i < disp_.rows(); ++i) {
      const double n = disp_.row(i).norm();
      if (n > radius_) disp_.row(i) *= radius_ / n;
      if (disp_.row(i).squaredNorm() > 0) nonzero_ = true;
    }
    build_index();
  }

  const Points3& anchors() const { return anchors_; }
  const Points3& displacements() const { return disp_; }
  int k_neighbors() const { return k_; }
  double support_radius() const { return radius_; }
  /// True when every displacement is zero, so lookups can be skipped.
  bool is_zero() const { return !nonzero_; }
  double max_displacement() const { return disp_.rows() ? disp_.rowwise().norm().maxCoeff() : 0.0; }

  /// Modified Shepard interpolation over the k nearest anchors within the
  /// support radius: w_i = ((R - d_i)_+ / (R d_i))^2 with R the distance of
  /// the (k+1)-th candidate (or the radius), each term scaled by the falloff
  /// (1 - (d_i / r)^2)^2. Returns an anchor's displacement exactly at it.
  Vec3 at(const Vec3& p) const {
    Vec3 out = Vec3::Zero();
    if (!nonzero_) return out;
    thread_local std::vector<std::pair<double, Eigen::Index>> cand;
    cand.clear();
    const double r2 = radius_ * radius_;
    const int cx = cell(p.x(), 0), cy = cell(p.y(), 1), cz = cell(p.z(), 2);
    for (int x = std::max(cx - 1, 0); x <= std::min(cx + 1, dims_[0] - 1); ++x)
      for (int y = std::max(cy - 1, 0); y <= std::min(cy + 1, dims_[1] - 1); ++y)
        for (int z = std::max(cz - 1, 0); z <= std::min(cz + 1, dims_[2] - 1); ++z) {
          const std::size_t c = (static_cast<std::size_t>(x) * dims_[1] + y) * dims_[2] + z;
          for (std::uint32_t s = start_[c]; s < start_[c + 1]; ++s) {
            const Eigen::Index i = order_[s];
            const double d2 = (anchors_.row(i).transpose() - p).squaredNorm();
            if (d2 < r2) cand.emplace_back(d2, i);
          }
        }
    if (cand.empty()) return out;
    const std::size_t keep = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(k_) + 1);
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(keep), cand.end());
    if (cand[0].first == 0.0) return disp_.row(cand[0].second).transpose();
    const std::size_t use = std::min<std::size_t>(cand.size(), static_cast<std::size_t>(k_));
    const double big_r = cand.size() > use ? std::sqrt(cand[use].first) : radius_;
    double wsum = 0.0;
    for (std::size_t n = 0; n < use; ++n) {
      const double d = std::sqrt(cand[n].first);
      const double t = std::max(big_r - d, 0.0) / (big_r * d);
      const double w = t * t;
      const double q = 1.0 - cand[n].first / r2;
      out += (w * q * q) * disp_.row(cand[n].second).transpose();
      wsum += w;
    }
    if (wsum <= 0.0) return Vec3::Zero();
    return out / wsum;
  }

 private:
  int cell(double v, int axis) const {
    return std::clamp(static_cast<int>(std::floor((v - origin_[axis]) / radius_)), 0, dims_[axis] - 1);
  }

  void build_index() {
    if (anchors_.rows() == 0) {
      dims_ = {1, 1, 1};
      start_.assign(2, 0);
      return;
    }
    for (int a = 0; a < 3; ++a) {
      origin_[a] = anchors_.col(a).minCoeff() - radius_;
      dims_[a] = static_cast<int>(std::floor((anchors_.col(a).maxCoeff() + radius_ - origin_[a]) / radius_)) + 1;
    }
    const std::size_t cells = static_cast<std::size_t>(dims_[0]) * dims_[1] * dims_[2];
    std::vector<std::uint32_t> count(cells + 1, 0);
    std::vector<std::size_t> key(static_cast<std::size_t>(anchors_.rows()));
    for (Eigen::Index i = 0; i < anchors_.rows(); ++i) {
      const std::size_t c = (static_cast<std::size_t>(cell(anchors_(i, 0), 0)) * dims_[1] + cell(anchors_(i, 1), 1)) * dims_[2] +
                            cell(anchors_(i, 2), 2);
      key[static_cast<std::size_t>(i)] = c;
      ++count[c + 1];
    }
    start_.assign(cells + 1, 0);
    for (std::size_t c = 0; c < cells; ++c) start_[c + 1] = start_[c] + count[c + 1];
    order_.assign(static_cast<std::size_t>(anchors_.rows()), 0);
    std::vector<std::uint32_t> fill(start_.begin(), start_.end() - 1);
    for (Eigen::Index i = 0; i < anchors_.rows(); ++i) order_[fill[key[static_cast<std::size_t>(i)]]++] = static_cast<std::uint32_t>(i);
  }

  Points3 anchors_;
  Points3 disp_;
  int k_ = 4;
  double radius_ = 0.15;
  bool nonzero_ = false;
  std::array<double, 3> origin_{};
  std::array<int, 3> dims_{1, 1, 1};
  std::vector<std::uint32_t> start_;
  std::vector<std::uint32_t> order_;
};

inline Vec3 displacement_at(const DisplacementField& field, const Vec3& p) { return field.at(p); }

/// Maps per-vertex displacements (model units, V_init - V_audio) through the
/// linear part of the binding transform onto the bound anchors.
inline DisplacementField build_displacement_field(const VertexBinding& binding, const Points3& delta_v, int k = 4,
                                                  double radius = 0.15) {
  Points3 disp(static_cast<Eigen::Index>(binding.size()), 3);
  for (std::size_t i = 0; i < binding.size(); ++i) {
    const auto v = binding.vertices[i];
    NFS_CHECK(static_cast<Eigen::Index>(v) < delta_v.rows(), "displacement array has ", delta_v.rows(),
              " rows but binding references vertex ", v);
    disp.row(static_cast<Eigen::Index>(i)) = binding.transform.apply_linear(delta_v.row(v).transpose()).transpose();
  }
  return DisplacementField(binding.anchors, disp, k, radius);
}

}  // namespace nfs
