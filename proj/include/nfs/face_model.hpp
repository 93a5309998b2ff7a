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

// Linear blendshape face model S = mean + S_id * alpha + S_exp * beta.
//
// The bases come from a procedural head family (ellipsoid cranium, a hinged
// jaw and two lip rings) sampled many times and reduced with PCA, so the
// model has the same linear structure as a scan-derived morphable model.

#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nfs/core.hpp"

namespace nfs {

struct BoundingBox {
  Vec3 min = Vec3::Zero();
  Vec3 max = Vec3::Zero();

  Vec3 center() const { return 0.5 * (min + max); }
  Vec3 extent() const { return max - min; }
  bool contains(const Vec3& p, double tol = 0.0) const {
    return (p.array() >= min.array() - tol).all() && (p.array() <= max.array() + tol).all();
  }
};

inline BoundingBox bounding_box(const Points3& points) {
  NFS_CHECK(points.rows() > 0, "bounding box of an empty point set");
  return {points.colwise().minCoeff().transpose(), points.colwise().maxCoeff().transpose()};
}

struct ShapeCoeffs {
  Eigen::VectorXd alpha;  // identity weights
  Eigen::VectorXd beta;   // expression weights

  static ShapeCoeffs zeros(Eigen::Index k_id, Eigen::Index k_exp) {
    return {Eigen::VectorXd::Zero(k_id), Eigen::VectorXd::Zero(k_exp)};
  }
};

struct VertexSet {
  Points3 positions;
  Eigen::Index size() const { return positions.rows(); }
};

/// Mean shape plus orthonormal identity and expression bases.
///
/// Bases are stored as (3V x K) with row index 3*vertex + axis, which is the
/// row-major layout of a V x 3 x K array. Landmark 0 is the inner upper-lip
/// centre and landmark 1 the inner lower-lip centre.
struct BlendshapeBasis {
  Points3 mean_shape;
  Eigen::MatrixXd id_basis;
  Eigen::MatrixXd exp_basis;
  std::vector<std::uint32_t> landmark_indices;
  std::vector<std::uint32_t> mouth_indices;
  BoundingBox bbox;

  Eigen::Index num_vertices() const { return mean_shape.rows(); }
  Eigen::Index k_id() const { return id_basis.cols(); }
  Eigen::Index k_exp() const { return exp_basis.cols(); }
  std::size_t num_landmarks() const { return landmark_indices.size(); }

  static constexpr std::size_t kUpperLipLandmark = 0;
  static constexpr std::size_t kLowerLipLandmark = 1;

  void validate() const {
    const Eigen::Index v = num_vertices();
    NFS_CHECK(v > 0, "basis has no vertices");
    NFS_CHECK(id_basis.rows() == 3 * v && exp_basis.rows() == 3 * v, "basis row count does not match 3V = ", 3 * v);
    NFS_CHECK(mean_shape.allFinite() && id_basis.allFinite() && exp_basis.allFinite(), "basis has non-finite values");
    auto check_list = [&](const std::vector<std::uint32_t>& list, const char* what) {
      std::vector<std::uint32_t> sorted = list;
      std::sort(sorted.begin(), sorted.end());
      NFS_CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(), what, " contain duplicates");
      for (auto i : list) NFS_CHECK(i < static_cast<std::uint32_t>(v), what, " index ", i, " out of range ", v);
    };
    check_list(landmark_indices, "landmark indices");
    check_list(mouth_indices, "mouth indices");
    NFS_CHECK(landmark_indices.size() >= 2, "basis needs the two lip landmarks");
    for (Eigen::Index i = 0; i < v; ++i)
      NFS_CHECK(bbox.contains(mean_shape.row(i).transpose(), 1e-12), "bbox does not contain vertex ", i);
  }
};

inline Points3 as_points(const Eigen::VectorXd& flat) {
  NFS_CHECK(flat.size() % 3 == 0, "flat vector length ", flat.size(), " is not a multiple of 3");
  return Eigen::Map<const Points3>(flat.data(), flat.size() / 3, 3);
}

inline Eigen::VectorXd as_flat(const Points3& p) {
  Eigen::VectorXd out(p.size());
  Eigen::Map<Points3>(out.data(), p.rows(), 3) = p;
  return out;
}

// ---------------------------------------------------------------------------
// Procedural head family

struct ToyHeadOptions {
  std::size_t num_vertices = 1000;
  bool symmetric = false;  // zero the asymmetric identity and expression modes
};

/// Parameterised head meshes. Identity and expression parameters are
/// standard-normal draws (expression mode 0, the jaw, is a non-negative
/// opening angle in radians).
class ToyHeadFamily {
 public:
  static constexpr int kIdentityParams = 14;
  static constexpr int kExpressionParams = 8;
  static constexpr int kLipRing = 16;

  explicit ToyHeadFamily(ToyHeadOptions opts) : opts_(opts) {
    NFS_CHECK(opts.num_vertices >= 100, "num_vertices must be >= 100, got ", opts.num_vertices);
    build_template();
  }

  std::size_t num_vertices() const { return dirs_.size(); }
  const std::vector<std::uint32_t>& mouth_indices() const { return mouth_; }
  const std::vector<std::uint32_t>& landmark_indices() const { return landmarks_; }

  std::array<double, kIdentityParams> sample_identity(Rng& rng) const {
    std::array<double, kIdentityParams> p{};
    for (auto& v : p) v = rng.normal();
    if (opts_.symmetric) p[12] = p[13] = 0.0;
    return p;
  }

  std::array<double, kExpressionParams> sample_expression(Rng& rng) const {
    std::array<double, kExpressionParams> e{};
    e[0] = rng.uniform(0.0, 0.45);  // jaw opening angle
    for (int i = 1; i < kExpressionParams; ++i) e[i] = rng.normal();
    if (opts_.symmetric) e[7] = 0.0;
    return e;
  }

  Points3 shape(const std::array<double, kIdentityParams>& id, const std::array<double, kExpressionParams>& ex) const {
    const std::size_t n = dirs_.size();
    Points3 out(static_cast<Eigen::Index>(n), 3);
    const double rx = 0.70 * (1.0 + 0.05 * id[0]);
    const double ry = 0.86 * (1.0 + 0.04 * id[1]);
    const double rz = 0.76 * (1.0 + 0.05 * id[2]);
    const double mouth_y = kMouthY + 0.025 * id[8];
    const double mouth_w = 0.20 * (1.0 + 0.07 * id[9]);
    for (std::size_t i = 0; i < n; ++i) {
      Vec3 p;
      const Vec3& u = dirs_[i];
      if (lip_ring_[i] >= 0) {
        const double phi = lip_phi_[i];
        const bool inner = lip_ring_[i] == 1;
        const double a = (inner ? 0.78 : 1.0) * mouth_w * (1.0 + 0.12 * ex[2] - 0.08 * ex[3]);
        const double b = inner ? 0.010 : 0.075;
        double x = a * std::cos(phi);
        double y = mouth_y + b * std::sin(phi);
        // smile lifts the corners, upper-lip raise lifts the top half
        y += 0.018 * ex[2] * std::abs(std::cos(phi)) + 0.015 * ex[6] * std::max(0.0, std::sin(phi));
        y += 0.012 * ex[7] * std::cos(phi) * (x > 0 ? 1.0 : 0.0);
        const double zs = surface_z(x, y, rx, ry, rz);
        double z = zs + (inner ? 0.015 : 0.035) + 0.03 * ex[3];
        p = {x, y, z};
      } else {
        p = {rx * u.x(), ry * u.y(), rz * u.z()};
        const double front = smooth01((u.z() + 0.1) / 0.5);
        const double lower = smooth01((0.05 - u.y()) / 0.45);
        // jaw width and chin length act on the lower face
        p.x() *= 1.0 + 0.07 * id[3] * lower;
        p.y() -= 0.05 * id[4] * lower * front;
        // nose: a ridge in front, mean amplitude 0.09
        const double dn = sq(p.x() / 0.08) + sq((p.y() + 0.02) / 0.16);
        p.z() += 0.09 * (1.0 + 0.25 * id[5]) * std::exp(-dn) * front;
        // cheeks, forehead, brows, temples
        const double dc = sq((std::abs(p.x()) - 0.36) / 0.14) + sq((p.y() + 0.18) / 0.14);
        const double cheek = std::exp(-dc) * front;
        p.z() += 0.03 * id[6] * cheek;
        p.z() += 0.04 * id[7] * smooth01((u.y() - 0.25) / 0.3) * front;
        const double db = sq((std::abs(p.x()) - 0.2) / 0.12) + sq((p.y() - 0.24) / 0.05);
        const double brow = std::exp(-db) * front;
        p.z() += 0.02 * id[10] * brow;
        p.x() *= 1.0 + 0.04 * id[11] * std::exp(-sq(u.y() / 0.3)) * (1.0 - front);
        // asymmetric identity modes
        p.x() += 0.025 * id[12] * lower * front;
        p.z() += 0.02 * id[13] * cheek * (p.x() > 0 ? 1.0 : -1.0);
        // expressions other than the jaw
        p.y() += 0.025 * ex[4] * brow;
        p.x() += 0.03 * ex[5] * cheek * (p.x() > 0 ? 1.0 : -1.0);
        p.z() += 0.015 * ex[5] * cheek;
        const double eye = std::exp(-(sq((std::abs(p.x()) - 0.26) / 0.08) + sq((p.y() - 0.12) / 0.05))) * front;
        p.y() -= 0.01 * ex[1] * eye;
      }
      out.row(static_cast<Eigen::Index>(i)) = p.transpose();
    }
    // The jaw rotates the lower face about a hinge behind the mouth.
    const double theta = ex[0];
    if (theta != 0.0) {
      const double hy = mouth_y + 0.10, hz = -0.12;
      for (std::size_t i = 0; i < n; ++i) {
        const double w = jaw_weight(i, out(static_cast<Eigen::Index>(i), 1), mouth_y);
        if (w == 0.0) continue;
        const double a = theta * w;
        const double y = out(static_cast<Eigen::Index>(i), 1) - hy;
        const double z = out(static_cast<Eigen::Index>(i), 2) - hz;
        out(static_cast<Eigen::Index>(i), 1) = hy + std::cos(a) * y - std::sin(a) * z;
        out(static_cast<Eigen::Index>(i), 2) = hz + std::sin(a) * y + std::cos(a) * z;
      }
    }
    return out;
  }

 private:
  static constexpr double kMouthY = -0.40;

  static double sq(double x) { return x * x; }
  static double smooth01(double t) {
    t = std::clamp(t, 0.0, 1.0);
    return t * t * (3.0 - 2.0 * t);
  }

  static double surface_z(double x, double y, double rx, double ry, double rz) {
    const double r = 1.0 - sq(x / rx) - sq(y / ry);
    return rz * std::sqrt(std::max(r, 0.0));
  }

  double jaw_weight(std::size_t i, double y, double mouth_y) const {
    if (lip_ring_[i] >= 0) {
      const double s = std::sin(lip_phi_[i]);
      if (std::abs(s) < 1e-9) return 0.5;
      return s < 0 ? 1.0 : 0.0;
    }
    const Vec3& u = dirs_[i];
    return smooth01((mouth_y + 0.02 - y) / 0.10) * smooth01((u.z() + 0.2) / 0.5);
  }

  void build_template() {
    const std::size_t lips = 2 * kLipRing;
    const std::size_t total = opts_.num_vertices;
    const std::size_t surface = total - lips;
    const std::size_t half = surface / 2;
    dirs_.clear();
    lip_ring_.clear();
    lip_phi_.clear();
    // Hemisphere x > 0 on a Fibonacci spiral around the x axis, then mirrored.
    const double golden = kPi * (3.0 - std::sqrt(5.0));
    std::vector<Vec3> right;
    for (std::size_t i = 0; i < half; ++i) {
      const double x = (static_cast<double>(i) + 0.5) / static_cast<double>(half);
      const double r = std::sqrt(1.0 - x * x);
      const double a = golden * static_cast<double>(i);
      right.emplace_back(x, r * std::cos(a), r * std::sin(a));
    }
    for (const auto& d : right) push_surface(d);
    for (const auto& d : right) push_surface({-d.x(), d.y(), d.z()});
    if (surface % 2 == 1) push_surface({0.0, 1.0, 0.0});
    for (int ring = 0; ring < 2; ++ring)
      for (int k = 0; k < kLipRing; ++k) {
        mouth_.push_back(static_cast<std::uint32_t>(dirs_.size()));
        dirs_.emplace_back(0.0, 0.0, 1.0);
        lip_ring_.push_back(ring);
        lip_phi_.push_back(2.0 * kPi * k / kLipRing);
      }
    const auto lip = [&](int ring, int k) { return static_cast<std::uint32_t>(surface + ring * kLipRing + k); };
    const int q = kLipRing / 4;
    landmarks_ = {lip(1, q), lip(1, 3 * q), lip(0, 0), lip(0, 2 * q), lip(0, q), lip(0, 3 * q), lip(1, 0), lip(1, 2 * q)};
    const std::vector<Vec3> anchors = {
        {0, -0.02, 1},      {0, -0.8, 0.6},     {0.6, -0.55, 0.55}, {-0.6, -0.55, 0.55}, {0.75, -0.3, 0.55},
        {-0.75, -0.3, 0.55}, {0.45, -0.15, 0.85}, {-0.45, -0.15, 0.85}, {0.4, 0.15, 0.88},  {-0.4, 0.15, 0.88},
        {0.15, 0.15, 0.97}, {-0.15, 0.15, 0.97}, {0.3, 0.3, 0.9},    {-0.3, 0.3, 0.9},    {0, 0.5, 0.86},
        {0.75, 0.3, 0.55},  {-0.75, 0.3, 0.55},
    };
    std::vector<bool> used(dirs_.size(), false);
    for (auto l : landmarks_) used[l] = true;
    for (const auto& a : anchors) {
      const Vec3 t = a.normalized();
      std::size_t best = 0;
      double best_d = 1e300;
      for (std::size_t i = 0; i < surface; ++i) {
        if (used[i]) continue;
        const double d = (dirs_[i] - t).squaredNorm();
        if (d < best_d) best_d = d, best = i;
      }
      used[best] = true;
      landmarks_.push_back(static_cast<std::uint32_t>(best));
    }
  }

  void push_surface(const Vec3& d) {
    dirs_.push_back(d.normalized());
    lip_ring_.push_back(-1);
    lip_phi_.push_back(0.0);
  }

  ToyHeadOptions opts_;
  std::vector<Vec3> dirs_;
  std::vector<int> lip_ring_;
  std::vector<double> lip_phi_;
  std::vector<std::uint32_t> mouth_;
  std::vector<std::uint32_t> landmarks_;
};

namespace detail {

// Leading right singular vectors of `data` (samples x features), with a
// deterministic sign: the largest-magnitude entry of each column is positive.
// Rank counts singular values above 1e-4 of the largest; the smooth
// non-linear modes of the family leave a long tail below that level.
inline Eigen::MatrixXd principal_axes(const Eigen::MatrixXd& data, Eigen::Index k, const char* what) {
  Eigen::BDCSVD<Eigen::MatrixXd> svd(data, Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  const double tol = 1e-4 * (s.size() ? s(0) : 0.0);
  Eigen::Index rank = 0;
  while (rank < s.size() && s(rank) > tol) ++rank;
  if (k > rank) fail("requested ", k, " ", what, " components but the ", what, " samples have rank ", rank);
  Eigen::MatrixXd axes = svd.matrixV().leftCols(k);
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index arg;
    axes.col(c).cwiseAbs().maxCoeff(&arg);
    if (axes(arg, c) < 0) axes.col(c) = -axes.col(c);
  }
  return axes;
}

}  // namespace detail

/// Samples the procedural family and fits identity and expression PCA bases.
///
/// Identity PCA is centred on the sample mean, which becomes the mean shape.
/// Expression PCA runs on uncentred deltas from the neutral face so that
/// beta = 0 is the neutral expression; its first column is the jaw, signed so
/// that a positive weight opens the mouth.
inline BlendshapeBasis build_toy_basis(std::uint64_t seed, std::size_t num_vertices, Eigen::Index k_id,
                                       Eigen::Index k_exp, bool symmetric = false) {
  NFS_CHECK(num_vertices >= 100, "num_vertices must be >= 100, got ", num_vertices);
  NFS_CHECK(k_id >= 1 && k_exp >= 1, "k_id and k_exp must be >= 1, got ", k_id, ", ", k_exp);
  ToyHeadFamily family({num_vertices, symmetric});
  const Eigen::Index samples = std::max<Eigen::Index>(200, 10 * (k_id + k_exp));
  const Eigen::Index dim = 3 * static_cast<Eigen::Index>(num_vertices);
  Rng rng(seed);
  Rng id_rng = rng.fork(1);
  Rng exp_rng = rng.fork(2);

  const std::array<double, ToyHeadFamily::kIdentityParams> neutral_id{};
  const std::array<double, ToyHeadFamily::kExpressionParams> neutral_exp{};

  Eigen::MatrixXd ids(samples, dim);
  for (Eigen::Index s = 0; s < samples; ++s) ids.row(s) = as_flat(family.shape(family.sample_identity(id_rng), neutral_exp));
  Eigen::RowVectorXd mean = ids.colwise().mean();
  Eigen::MatrixXd centred = ids.rowwise() - mean;

  const Eigen::VectorXd base = as_flat(family.shape(neutral_id, neutral_exp));
  Eigen::MatrixXd deltas(samples, dim);
  for (Eigen::Index s = 0; s < samples; ++s)
    deltas.row(s) = (as_flat(family.shape(neutral_id, family.sample_expression(exp_rng))) - base).transpose();

  BlendshapeBasis basis;
  basis.id_basis = detail::principal_axes(centred, k_id, "identity");
  basis.exp_basis = detail::principal_axes(deltas, k_exp, "expression");
  basis.mean_shape = as_points(mean.transpose());
  basis.landmark_indices = family.landmark_indices();
  basis.mouth_indices = family.mouth_indices();

  const Eigen::Index lower = 3 * static_cast<Eigen::Index>(basis.landmark_indices[BlendshapeBasis::kLowerLipLandmark]);
  if (basis.exp_basis(lower + 1, 0) > 0) basis.exp_basis.col(0) = -basis.exp_basis.col(0);

  basis.bbox = bounding_box(basis.mean_shape);
  basis.validate();
  return basis;
}

inline void check_dims(const BlendshapeBasis& basis, const ShapeCoeffs& c) {
  if (c.alpha.size() != basis.k_id() || c.beta.size() != basis.k_exp())
    fail("coefficient dimensions (", c.alpha.size(), ", ", c.beta.size(), ") do not match basis (", basis.k_id(), ", ",
         basis.k_exp(), ")");
}

inline VertexSet evaluate_shape(const BlendshapeBasis& basis, const ShapeCoeffs& coeffs) {
  check_dims(basis, coeffs);
  Eigen::VectorXd flat = as_flat(basis.mean_shape) + basis.id_basis * coeffs.alpha + basis.exp_basis * coeffs.beta;
  return {as_points(flat)};
}

inline Points3 extract_landmarks(const BlendshapeBasis& basis, const VertexSet& vertices) {
  NFS_CHECK(vertices.size() == basis.num_vertices(), "vertex count ", vertices.size(), " does not match basis ",
            basis.num_vertices());
  Points3 out(static_cast<Eigen::Index>(basis.num_landmarks()), 3);
  for (std::size_t l = 0; l < basis.num_landmarks(); ++l)
    out.row(static_cast<Eigen::Index>(l)) = vertices.positions.row(basis.landmark_indices[l]);
  return out;
}

/// Landmark rows of [S_id S_exp]: (3L x (K_id + K_exp)).
inline Eigen::MatrixXd landmark_design(const BlendshapeBasis& basis) {
  const Eigen::Index l = static_cast<Eigen::Index>(basis.num_landmarks());
  Eigen::MatrixXd out(3 * l, basis.k_id() + basis.k_exp());
  for (Eigen::Index i = 0; i < l; ++i) {
    const Eigen::Index v = 3 * static_cast<Eigen::Index>(basis.landmark_indices[static_cast<std::size_t>(i)]);
    out.block(3 * i, 0, 3, basis.k_id()) = basis.id_basis.middleRows(v, 3);
    out.block(3 * i, basis.k_id(), 3, basis.k_exp()) = basis.exp_basis.middleRows(v, 3);
  }
  return out;
}

/// Delta V = V_init - V_audio.
inline Points3 vertex_displacement(const VertexSet& v_init, const VertexSet& v_audio) {
  NFS_CHECK(v_init.size() == v_audio.size(), "vertex count mismatch: ", v_init.size(), " vs ", v_audio.size());
  return v_init.positions - v_audio.positions;
}

// ---------------------------------------------------------------------------
// "NFSB" files: magic, u32 version, u32 V, K_id, K_exp, L, then f64 arrays
// (mean_shape, id_basis, exp_basis, bbox min/max), then u32 landmark indices,
// u32 mouth count and u32 mouth indices.

inline constexpr std::uint32_t kBasisVersion = 1;

inline void save_basis(const std::string& path, const BlendshapeBasis& basis) {
  std::ofstream os(path, std::ios::binary);
  NFS_CHECK(os, "cannot open \"", path, "\" for writing");
  io::write_magic(os, "NFSB");
  io::write_u32(os, kBasisVersion);
  io::write_u32(os, static_cast<std::uint32_t>(basis.num_vertices()));
  io::write_u32(os, static_cast<std::uint32_t>(basis.k_id()));
  io::write_u32(os, static_cast<std::uint32_t>(basis.k_exp()));
  io::write_u32(os, static_cast<std::uint32_t>(basis.num_landmarks()));
  for (Eigen::Index i = 0; i < basis.mean_shape.size(); ++i) io::write_f64(os, basis.mean_shape.data()[i]);
  for (const Eigen::MatrixXd* m : {&basis.id_basis, &basis.exp_basis})
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) io::write_f64(os, (*m)(r, c));
  for (int i = 0; i < 3; ++i) io::write_f64(os, basis.bbox.min(i));
  for (int i = 0; i < 3; ++i) io::write_f64(os, basis.bbox.max(i));
  for (auto i : basis.landmark_indices) io::write_u32(os, i);
  io::write_u32(os, static_cast<std::uint32_t>(basis.mouth_indices.size()));
  for (auto i : basis.mouth_indices) io::write_u32(os, i);
  NFS_CHECK(os.good(), "write failed for \"", path, "\"");
}

inline BlendshapeBasis load_basis(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  NFS_CHECK(is, "cannot open basis file \"", path, "\"");
  io::expect_magic(is, "NFSB");
  const auto version = io::read_u32(is, "version");
  NFS_CHECK(version == kBasisVersion, "unsupported basis version ", version);
  const auto v = io::read_u32(is, "V");
  const auto k_id = io::read_u32(is, "K_id");
  const auto k_exp = io::read_u32(is, "K_exp");
  const auto l = io::read_u32(is, "L");
  NFS_CHECK(v > 0 && v < (1u << 24) && k_id < 4096 && k_exp < 4096 && l <= v, "implausible basis dims");
  BlendshapeBasis b;
  b.mean_shape.resize(v, 3);
  for (Eigen::Index i = 0; i < b.mean_shape.size(); ++i) b.mean_shape.data()[i] = io::read_f64(is, "mean_shape");
  b.id_basis.resize(3 * v, k_id);
  b.exp_basis.resize(3 * v, k_exp);
  for (Eigen::MatrixXd* m : {&b.id_basis, &b.exp_basis})
    for (Eigen::Index r = 0; r < m->rows(); ++r)
      for (Eigen::Index c = 0; c < m->cols(); ++c) (*m)(r, c) = io::read_f64(is, "basis");
  for (int i = 0; i < 3; ++i) b.bbox.min(i) = io::read_f64(is, "bbox");
  for (int i = 0; i < 3; ++i) b.bbox.max(i) = io::read_f64(is, "bbox");
  b.landmark_indices.resize(l);
  for (auto& i : b.landmark_indices) i = io::read_u32(is, "landmark indices");
  const auto m = io::read_u32(is, "mouth count");
  NFS_CHECK(m <= v, "implausible mouth index count ", m);
  b.mouth_indices.resize(m);
  for (auto& i : b.mouth_indices) i = io::read_u32(is, "mouth indices");
  b.validate();
  return b;
}

}  // namespace nfs
