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
#include <vector>

#include "gtest/gtest.h"
#include "nfs/metrics.hpp"

using namespace nfs;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  Image img(h, w, 3);
  Rng rng(seed);
  for (auto& v : img.data) v = rng.uniform(0, 1);
  return img;
}

std::vector<double> random_series(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> s(n);
  for (auto& v : s) v = rng.normal();
  return s;
}

}  // namespace

TEST(Psnr, IdenticalIsCapped) {
  const Image a = random_image(8, 8, 1);
  EXPECT_EQ(psnr(a, a), 99.0);
}

TEST(Psnr, ClosedFormTwentyDecibels) {
  Image a(4, 4, 3), b(4, 4, 3);
  for (auto& v : a.data) v = 0.5;
  for (auto& v : b.data) v = 0.6;  // MSE = 0.01 up to rounding of 0.6 - 0.5
  EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
}

TEST(Psnr, MatchesScalarOracleAndIsSymmetric) {
  const Image a = random_image(7, 5, 2), b = random_image(7, 5, 3);
  long double acc = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) acc += std::pow(static_cast<long double>(a.data[i]) - b.data[i], 2);
  const double oracle = 10.0 * std::log10(1.0 / static_cast<double>(acc / a.data.size()));
  EXPECT_NEAR(psnr(a, b), oracle, 1e-12);
  EXPECT_EQ(psnr(a, b), psnr(b, a));
}

TEST(Psnr, ShapeMismatchThrows) {
  EXPECT_THROW(psnr(Image(4, 4, 3), Image(4, 5, 3)), Error);
}

TEST(Mad, GrayVersusBlackIsGrayLevel) {
  Image gray(3, 3, 3), black(3, 3, 3);
  for (auto& v : gray.data) v = 0.375;
  EXPECT_EQ(mad(gray, black), 0.375);
}

TEST(Mirror, IsInvolution) {
  const Image a = random_image(5, 6, 4);
  EXPECT_EQ(mirror_horizontal(mirror_horizontal(a)).data, a.data);
  EXPECT_EQ(mirror_horizontal(a).at(2, 0, 1), a.at(2, 5, 1));
}

TEST(MouthOpening, ZeroIsBaselineAndMatchesLandmarks) {
  const auto basis = build_toy_basis(5, 300, 4, 6);
  const Eigen::VectorXd zero = Eigen::VectorXd::Zero(basis.k_exp());
  const auto up = basis.landmark_indices[BlendshapeBasis::kUpperLipLandmark];
  const auto lo = basis.landmark_indices[BlendshapeBasis::kLowerLipLandmark];
  EXPECT_EQ(mouth_opening(zero, basis), std::abs(basis.mean_shape(up, 1) - basis.mean_shape(lo, 1)));

  Eigen::VectorXd beta = Eigen::VectorXd::Zero(basis.k_exp());
  beta << 0.7, -0.2, 0.1, 0.05, 0.0, 0.3;
  const Eigen::VectorXd flat = as_flat(basis.mean_shape) + basis.exp_basis * beta;
  const double oracle = std::abs(flat(3 * up + 1) - flat(3 * lo + 1));
  EXPECT_NEAR(mouth_opening(beta, basis), oracle, 1e-12);
  EXPECT_EQ(mouth_opening(beta, basis), mouth_opening(beta, basis));
}

TEST(MouthOpening, JawIsMonotone) {
  const auto basis = build_toy_basis(6, 300, 4, 6);
  double prev = -1;
  for (double s = 0; s <= 3.0; s += 0.25) {
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(basis.k_exp());
    beta(0) = s;
    const double d = mouth_opening(beta, basis);
    EXPECT_GT(d, prev) << "s=" << s;
    prev = d;
  }
}

TEST(Correlation, IdentityAndNegation) {
  const auto a = random_series(50, 7);
  std::vector<double> neg(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) neg[i] = -a[i];
  EXPECT_NEAR(envelope_correlation(a, a), 1.0, 1e-15);
  EXPECT_NEAR(envelope_correlation(a, neg), -1.0, 1e-15);
}

TEST(Correlation, TextbookOracle) {
  const auto a = random_series(40, 8), b = random_series(40, 9);
  // single-pass raw-moment formula
  long double sa = 0, sb = 0, saa = 0, sbb = 0, sab = 0;
  const long double n = a.size();
  for (std::size_t i = 0; i < a.size(); ++i) {
    sa += a[i], sb += b[i], saa += a[i] * static_cast<long double>(a[i]);
    sbb += b[i] * static_cast<long double>(b[i]), sab += a[i] * static_cast<long double>(b[i]);
  }
  const long double r = (n * sab - sa * sb) / std::sqrt((n * saa - sa * sa) * (n * sbb - sb * sb));
  EXPECT_NEAR(envelope_correlation(a, b), static_cast<double>(r), 1e-12);
}

TEST(Correlation, AffineInvariance) {
  const auto a = random_series(60, 10), b = random_series(60, 11);
  const double r = envelope_correlation(a, b);
  for (double scale : {0.001, 2.0, 37.5}) {
    for (double shift : {-5.0, 0.0, 12.25}) {
      std::vector<double> c(a.size());
      for (std::size_t i = 0; i < a.size(); ++i) c[i] = scale * a[i] + shift;
      EXPECT_NEAR(envelope_correlation(c, b), r, 1e-12);
    }
  }
}

TEST(Correlation, Errors) {
  EXPECT_THROW(envelope_correlation({1, 1, 1, 1}, {1, 2, 3, 4}), Error);
  EXPECT_THROW(envelope_correlation({1, 2}, {1, 2}), Error);
  EXPECT_THROW(envelope_correlation({1, 2, 3}, {1, 2, 3, 4}), Error);
}

TEST(Summary, Statistics) {
  const auto r = summarize("psnr", {3.0, 1.0, 2.0});
  EXPECT_EQ(r.mean, 2.0);
  EXPECT_EQ(r.min, 1.0);
  EXPECT_EQ(r.max, 3.0);
  EXPECT_THROW(summarize("bad", {1.0, NAN}), Error);
}
