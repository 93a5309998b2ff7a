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

// Image and sequence metrics used by reports and the test harnesses.

#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "nfs/core.hpp"
#include "nfs/face_model.hpp"
#include "nfs/render.hpp"

namespace nfs {

inline constexpr double kPsnrCap = 99.0;

inline void check_same_shape(const Image& a, const Image& b, const char* what) {
  NFS_CHECK(a.same_shape(b), what, ": image shapes differ (", a.height, "x", a.width, "x", a.channels, " vs ", b.height,
            "x", b.width, "x", b.channels, ")");
}

inline double mse(const Image& a, const Image& b) {
  check_same_shape(a, b, "mse");
  NFS_CHECK(!a.data.empty(), "mse of empty images");
  double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  return acc / static_cast<double>(a.data.size());
}

/// 10 log10(1 / MSE) for values in [0, 1], capped at 99 dB.
inline double psnr(const Image& a, const Image& b) {
  const double m = mse(a, b);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, -10.0 * std::log10(m));
}

/// Mean absolute difference.
inline double mad(const Image& a, const Image& b) {
  check_same_shape(a, b, "mad");
  NFS_CHECK(!a.data.empty(), "mad of empty images");
  double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
  return acc / static_cast<double>(a.data.size());
}

inline Image mirror_horizontal(const Image& img) {
  Image out = img;
  for (int i = 0; i < img.height; ++i)
    for (int j = 0; j < img.width; ++j)
      for (int k = 0; k < img.channels; ++k) out.at(i, img.width - 1 - j, k) = img.at(i, j, k);
  if (!img.opacity.empty())
    for (int i = 0; i < img.height; ++i)
      for (int j = 0; j < img.width; ++j)
        out.opacity[static_cast<std::size_t>(i * img.width + img.width - 1 - j)] = img.opacity[static_cast<std::size_t>(i * img.width + j)];
  return out;
}

/// Vertical distance between the inner-lip landmarks of the shape (alpha, beta).
inline double mouth_opening(const Eigen::VectorXd& beta, const BlendshapeBasis& basis,
                            const Eigen::VectorXd& alpha = {}) {
  ShapeCoeffs c = ShapeCoeffs::zeros(basis.k_id(), basis.k_exp());
  if (alpha.size()) c.alpha = alpha;
  c.beta = beta;
  const Points3 lm = extract_landmarks(basis, evaluate_shape(basis, c));
  return std::abs(lm(BlendshapeBasis::kUpperLipLandmark, 1) - lm(BlendshapeBasis::kLowerLipLandmark, 1));
}

/// Pearson correlation of two equal-length, non-constant series.
inline double envelope_correlation(const std::vector<double>& a, const std::vector<double>& b) {
  NFS_CHECK(a.size() == b.size(), "correlation needs equal lengths, got ", a.size(), " and ", b.size());
  NFS_CHECK(a.size() >= 3, "correlation needs at least 3 samples, got ", a.size());
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) ma += a[i], mb += b[i];
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  NFS_CHECK(saa > 0 && sbb > 0, "correlation of a constant series is undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct MetricReport {
  std::string name;
  std::vector<double> values;
  double mean = 0, min = 0, max = 0;
};

inline MetricReport summarize(const std::string& name, const std::vector<double>& values) {
  MetricReport r{name, values, 0, 0, 0};
  if (values.empty()) return r;
  for (double v : values) NFS_CHECK(std::isfinite(v), "metric \"", name, "\" has a non-finite value");
  double acc = 0;
  for (double v : values) acc += v;
  r.mean = acc / static_cast<double>(values.size());
  r.min = *std::min_element(values.begin(), values.end());
  r.max = *std::max_element(values.begin(), values.end());
  return r;
}

}  // namespace nfs
