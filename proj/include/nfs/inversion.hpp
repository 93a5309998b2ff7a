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

// Two-phase latent inversion (projection, then generator tuning) and
// landmark-based refinement of shape coefficients and head pose.

#pragma once

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nfs/autodiff.hpp"
#include "nfs/core.hpp"
#include "nfs/face_model.hpp"
#include "nfs/field.hpp"
#include "nfs/metrics.hpp"
#include "nfs/render.hpp"
#include "nfs/upsampler.hpp"

namespace nfs {

namespace detail {

// Mean squared error between render and target, and its image gradient.
inline double image_mse(const Image& img, const Image& target, Image* grad) {
  check_same_shape(img, target, "inversion target");
  const double inv = 1.0 / static_cast<double>(img.data.size());
  double acc = 0;
  if (grad) *grad = Image(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double d = img.data[i] - target.data[i];
    acc += d * d;
    if (grad) grad->data[i] = 2.0 * d * inv;
  }
  const double loss = acc * inv;
  NFS_CHECK(std::isfinite(loss), "inversion loss is not finite");
  return loss;
}

}  // namespace detail

struct ProjectionResult {
  StyleLatent w;
  std::vector<double> losses;  // loss of every iterate, initialisation first
  double best_loss = 0;
};

/// Phase 1: Adam on w only, from the mean of 1000 mapped latents. Returns
/// the best iterate.
inline ProjectionResult project_latent(const FieldBundle& b, const Image& target, const RenderSpec& spec, int steps,
                                       double lr = 1e-2, int init_samples = 1000) {
  NFS_CHECK(steps >= 0, "projection steps must be >= 0, got ", steps);
  ProjectionResult r;
  StyleLatent w = mean_latent(b, init_samples);
  r.w = w;
  r.best_loss = std::numeric_limits<double>::infinity();
  ad::Adam adam({lr, 0.9, 0.999, 1e-8});
  std::vector<double> wv(w.data(), w.data() + w.size());
  for (int s = 0; s <= steps; ++s) {
    const StyleLatent cur = Eigen::Map<const Eigen::VectorXd>(wv.data(), w.size());
    const FeatureMap fm = render_feature_map(b, cur, spec);
    const Image img = upsample(b, fm, cur);
    Image gimg;
    const double loss = detail::image_mse(img, target, s < steps ? &gimg : nullptr);
    NFS_CHECK(std::isfinite(loss), "projection diverged at step ", s);
    r.losses.push_back(loss);
    if (loss < r.best_loss) r.best_loss = loss, r.w = cur;
    if (s == steps) break;
    std::vector<double> gw(wv.size(), 0.0);
    FeatureMap gfm(fm.height, fm.width, fm.channels);
    upsample_backward(b, fm, cur, gimg, nullptr, gw.data(), &gfm);
    RenderGrad rg = RenderGrad::zeros(b);
    render_feature_map_backward(b, cur, spec, nullptr, gfm, rg);
    for (std::size_t k = 0; k < gw.size(); ++k) gw[k] += rg.w(static_cast<Eigen::Index>(k));
    adam.step("w", wv, gw);
  }
  return r;
}

struct TuningResult {
  FieldBundle bundle;
  std::vector<double> losses;
  double best_loss = 0;
};

/// Phase 2: Adam on field and upsampler parameters with w frozen; the
/// mapping network is left untouched. Returns the best iterate.
inline TuningResult tune_generator(const FieldBundle& b, const StyleLatent& w, const Image& target,
                                   const RenderSpec& spec, int steps, double lr = 1e-4) {
  NFS_CHECK(steps >= 0, "tuning steps must be >= 0, got ", steps);
  TuningResult r{b, {}, std::numeric_limits<double>::infinity()};
  FieldBundle cur = b;
  ad::Adam adam({lr, 0.9, 0.999, 1e-8});
  for (int s = 0; s <= steps; ++s) {
    const FeatureMap fm = render_feature_map(cur, w, spec);
    const Image img = upsample(cur, fm, w);
    Image gimg;
    const double loss = detail::image_mse(img, target, s < steps ? &gimg : nullptr);
    NFS_CHECK(std::isfinite(loss), "tuning diverged at step ", s);
    r.losses.push_back(loss);
    if (loss < r.best_loss) r.best_loss = loss, r.bundle = cur;
    if (s == steps) break;
    RenderGrad rg = RenderGrad::zeros(cur);
    FeatureMap gfm(fm.height, fm.width, fm.channels);
    upsample_backward(cur, fm, w, gimg, &rg.params, nullptr, &gfm);
    render_feature_map_backward(cur, w, spec, nullptr, gfm, rg);
    std::vector<std::pair<std::string, std::vector<double>*>> grads;
    for_each_param(rg.params, [&](const std::string& name, std::vector<double>& g, ParamGroup group) {
      if (group != ParamGroup::kMapping) grads.emplace_back(name, &g);
    });
    std::size_t k = 0;
    bool first = true;
    for_each_param(cur, [&](const std::string& name, std::vector<double>& p, ParamGroup group) {
      if (group == ParamGroup::kMapping) return;
      NFS_CHECK(grads[k].first == name, "parameter order mismatch at \"", name, "\"");
      adam.step(name, p, *grads[k++].second, first);
      first = false;
    });
  }
  return r;
}

struct InversionConfig {
  int projection_steps = 1000;
  int tuning_steps = 1000;
  double projection_lr = 1e-2;
  double tuning_lr = 1e-4;
};

struct InversionResult {
  StyleLatent w_inv;
  FieldBundle tuned_bundle;
  std::vector<double> projection_losses;
  std::vector<double> tuning_losses;
  double final_loss = 0;
};

inline InversionResult invert(const FieldBundle& b, const Image& target, const RenderSpec& spec,
                              const InversionConfig& c = {}) {
  auto p = project_latent(b, target, spec, c.projection_steps, c.projection_lr);
  auto t = tune_generator(b, p.w, target, spec, c.tuning_steps, c.tuning_lr);
  return {p.w, std::move(t.bundle), std::move(p.losses), std::move(t.losses), t.best_loss};
}

/// Loss curves as CSV: phase,step,loss.
inline std::string loss_curve_csv(const InversionResult& r) {
  std::string out = "phase,step,loss\n";
  auto rows = [&](const char* phase, const std::vector<double>& v) {
    for (std::size_t i = 0; i < v.size(); ++i) out += std::string(phase) + "," + std::to_string(i) + "," + format_double(v[i]) + "\n";
  };
  rows("projection", r.projection_losses);
  rows("tuning", r.tuning_losses);
  return out;
}

// ---------------------------------------------------------------------------
// Coefficient and pose refinement

/// Shape coefficients plus head rotation (yaw about +y, then pitch about +x).
struct FittedShape {
  ShapeCoeffs coeffs;
  double yaw = 0;
  double pitch = 0;
};

inline Eigen::Matrix3d head_rotation(double yaw, double pitch) {
  return (Eigen::AngleAxisd(yaw, Vec3::UnitY()) * Eigen::AngleAxisd(pitch, Vec3::UnitX())).toRotationMatrix();
}

/// Landmarks of the shape under its head rotation.
inline Points3 posed_landmarks(const BlendshapeBasis& basis, const FittedShape& s) {
  const Points3 lm = extract_landmarks(basis, evaluate_shape(basis, s.coeffs));
  return (lm * head_rotation(s.yaw, s.pitch).transpose()).eval();
}

struct RefinementResult {
  FittedShape shape;
  std::vector<double> errors;  // sum of squared landmark residuals per accepted iterate
  double final_error = 0;
};

/// Damped Gauss-Newton (Levenberg-Marquardt) descent on the squared landmark
/// error over (alpha, beta, yaw, pitch). Only error-reducing steps are
/// accepted, so the error sequence never increases.
inline RefinementResult refine_coefficients(const BlendshapeBasis& basis, const FittedShape& initial,
                                            const Points3& target_landmarks, int max_steps = 500) {
  const auto L = static_cast<Eigen::Index>(basis.num_landmarks());
  NFS_CHECK(target_landmarks.rows() == L, "expected ", L, " target landmarks, got ", target_landmarks.rows());
  NFS_CHECK(target_landmarks.allFinite(), "target landmarks are not finite");
  check_dims(basis, initial.coeffs);
  const Eigen::MatrixXd design = landmark_design(basis);
  const Eigen::Index kid = basis.k_id(), k = kid + basis.k_exp(), n = k + 2;
  const Eigen::VectorXd target = as_flat(target_landmarks);

  auto residual = [&](const FittedShape& s) { return Eigen::VectorXd(as_flat(posed_landmarks(basis, s)) - target); };
  RefinementResult r{initial, {}, 0};
  Eigen::VectorXd res = residual(initial);
  double err = res.squaredNorm();
  r.errors.push_back(err);
  double mu = 1e-3;
  for (int step = 0; step < max_steps && err > 0; ++step) {
    const FittedShape& s = r.shape;
    const Points3 lm = extract_landmarks(basis, evaluate_shape(basis, s.coeffs));
    const Eigen::Matrix3d ry = Eigen::AngleAxisd(s.yaw, Vec3::UnitY()).toRotationMatrix();
    const Eigen::Matrix3d rx = Eigen::AngleAxisd(s.pitch, Vec3::UnitX()).toRotationMatrix();
    Eigen::Matrix3d dry, drx;
    dry << -std::sin(s.yaw), 0, std::cos(s.yaw), 0, 0, 0, -std::cos(s.yaw), 0, -std::sin(s.yaw);
    drx << 0, 0, 0, 0, -std::sin(s.pitch), -std::cos(s.pitch), 0, std::cos(s.pitch), -std::sin(s.pitch);
    const Eigen::Matrix3d rot = ry * rx;
    Eigen::MatrixXd jac(3 * L, n);
    for (Eigen::Index l = 0; l < L; ++l) {
      jac.block(3 * l, 0, 3, k) = rot * design.middleRows(3 * l, 3);
      const Vec3 p = lm.row(l).transpose();
      jac.block(3 * l, k, 3, 1) = dry * rx * p;
      jac.block(3 * l, k + 1, 3, 1) = ry * drx * p;
    }
    const Eigen::VectorXd grad = jac.transpose() * res;
    if (grad.squaredNorm() == 0.0) break;
    const Eigen::MatrixXd jtj = jac.transpose() * jac;
    bool accepted = false;
    for (int tries = 0; tries < 30 && !accepted; ++tries) {
      Eigen::MatrixXd a = jtj;
      a.diagonal() += mu * (jtj.diagonal().array() + 1e-12).matrix();
      const Eigen::VectorXd delta = -a.ldlt().solve(grad);
      NFS_CHECK(delta.allFinite(), "coefficient refinement diverged at step ", step);
      FittedShape next = s;
      next.coeffs.alpha += delta.head(kid);
      next.coeffs.beta += delta.segment(kid, basis.k_exp());
      next.yaw += delta(k);
      next.pitch += delta(k + 1);
      const Eigen::VectorXd nres = residual(next);
      const double nerr = nres.squaredNorm();
      if (nerr < err) {
        r.shape = next, res = nres, err = nerr;
        mu = std::max(mu / 10, 1e-12);
        accepted = true;
      } else {
        mu *= 10;
      }
    }
    if (!accepted) break;  // no descent direction left at working precision
    r.errors.push_back(err);
  }
  r.final_error = err;
  return r;
}

}  // namespace nfs
