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
#include "nfs/blending.hpp"

using namespace nfs;

namespace {

MouthMask random_mask(int h, int w, std::uint64_t seed) {
  MouthMask m(h, w);
  Rng rng(seed);
  for (auto& v : m.values) v = rng.uniform(0, 1);
  return m;
}

FeatureMap random_features(int h, int w, int c, std::uint64_t seed) {
  FeatureMap f(h, w, c);
  Rng rng(seed);
  for (auto& v : f.data) v = rng.uniform(-1, 1);
  return f;
}

// Square of half-size s on the z = 0 plane, seen head-on.
Points3 square(double s) {
  Points3 p(4, 3);
  p << -s, -s, 0, s, -s, 0, s, s, 0, -s, s, 0;
  return p;
}

}  // namespace

TEST(MouthMask, BehindCameraIsEmpty) {
  CameraPose pose;
  Points3 p = square(0.2);
  p.col(2).setConstant(4.0);  // eye sits at z = 2.5
  const auto m = project_mouth_mask(p, pose, 32, 32, 1.5);
  for (double v : m.values) EXPECT_EQ(v, 0.0);
}

TEST(MouthMask, SquareMatchesScanlineOracle) {
  CameraPose pose;
  const int h = 48, w = 64;
  for (double s : {0.1037, 0.2311, 0.41}) {
    const auto m = project_mouth_mask(square(s), pose, h, w, 0.0);
    // Head-on: world x, y map to pixel columns and rows through the pinhole.
    const double t = std::tan(0.5 * pose.fov_y), a = static_cast<double>(w) / h;
    const double c0 = 0.5 * (-s / (pose.radius * t * a) + 1) * w, c1 = 0.5 * (s / (pose.radius * t * a) + 1) * w;
    const double r0 = 0.5 * (1 - s / (pose.radius * t)) * h, r1 = 0.5 * (1 + s / (pose.radius * t)) * h;
    std::vector<int> inside(static_cast<std::size_t>(h * w), 0);
    for (int i = 0; i < h; ++i) {
      const double y = i + 0.5;
      if (y < r0 || y > r1) continue;
      for (int j = 0; j < w; ++j)
        if (j + 0.5 >= c0 && j + 0.5 <= c1) inside[static_cast<std::size_t>(i * w + j)] = 1;
    }
    int expected = 0, got = 0;
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        bool any = false;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int y = i + di, x = j + dj;
            any = any || (y >= 0 && y < h && x >= 0 && x < w && inside[static_cast<std::size_t>(y * w + x)]);
          }
        expected += any;
        got += m.at(i, j) == 1.0;
        EXPECT_EQ(m.at(i, j), any ? 1.0 : 0.0) << i << "," << j;
      }
    EXPECT_EQ(got, expected);
    EXPECT_GT(got, 0);
  }
}

TEST(MouthMask, FeatheredRangeAndSymmetry) {
  CameraPose pose;
  Points3 p(6, 3);
  p << -0.2, -0.1, 0.1, 0.2, -0.1, 0.1, 0.25, 0.05, 0.05, -0.25, 0.05, 0.05, 0.1, 0.15, 0, -0.1, 0.15, 0;
  const auto m = project_mouth_mask(p, pose, 32, 32, 2.0);
  double total = 0;
  for (double v : m.values) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    total += v;
  }
  EXPECT_GT(total, 1.0);
  // Mirror-symmetric vertices at yaw 0 give a left-right symmetric mask.
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j) EXPECT_NEAR(m.at(i, j), m.at(i, 31 - j), 1e-12);
}

TEST(MouthMask, TooFewVerticesThrows) {
  EXPECT_THROW(project_mouth_mask(Points3(2, 3), CameraPose{}, 8, 8, 0), Error);
}

TEST(MaskHistory, FifoEviction) {
  MaskHistory h(3);
  for (int t = 0; t < 5; ++t) h.push(MouthMask(2, 2, t / 10.0));
  ASSERT_EQ(h.size(), 3u);
  EXPECT_EQ(h.masks().front().values[0], 0.2);
  EXPECT_EQ(h.masks().back().values[0], 0.4);
  EXPECT_THROW(h.push(MouthMask(3, 2)), Error);
  EXPECT_THROW(MaskHistory(0), Error);
}

TEST(AverageMask, ConventionsAndOracle) {
  EXPECT_THROW(average_mask(MaskHistory(7)), Error);

  MaskHistory constant(7);
  for (int t = 0; t < 9; ++t) constant.push(MouthMask(4, 4, 0.3));
  for (double v : average_mask(constant).values) EXPECT_EQ(v, 0.3);

  MaskHistory two(2);
  two.push(MouthMask(4, 4, 0.0));
  two.push(MouthMask(4, 4, 1.0));
  for (double v : average_mask(two).values) EXPECT_EQ(v, 0.5);

  // warm-up: only what exists
  MaskHistory warm(7);
  warm.push(MouthMask(2, 2, 0.2));
  warm.push(MouthMask(2, 2, 0.6));
  for (double v : average_mask(warm).values) EXPECT_NEAR(v, 0.4, 1e-15);

  MaskHistory seven(7);
  std::vector<MouthMask> ms;
  for (int t = 0; t < 7; ++t) ms.push_back(random_mask(6, 5, 100 + t)), seven.push(ms.back());
  const auto avg = average_mask(seven);
  for (std::size_t p = 0; p < avg.values.size(); ++p) {
    long double acc = 0;
    for (const auto& m : ms) acc += m.values[p];
    EXPECT_NEAR(avg.values[p], static_cast<double>(acc / 7), 1e-12);
  }
}

TEST(AverageMask, TemporalSmoothness) {
  const int n = 7;
  MaskHistory h(n);
  std::vector<MouthMask> raw;
  for (int t = 0; t < 30; ++t) raw.push_back(random_mask(5, 5, 200 + t));
  double max_change = 0;
  for (std::size_t a = 0; a < raw.size(); ++a)
    for (std::size_t b = 0; b < raw.size(); ++b)
      for (std::size_t p = 0; p < raw[a].values.size(); ++p)
        max_change = std::max(max_change, std::abs(raw[a].values[p] - raw[b].values[p]));
  MouthMask prev;
  for (int t = 0; t < 30; ++t) {
    h.push(raw[static_cast<std::size_t>(t)]);
    const auto cur = average_mask(h);
    if (t >= n) {
      for (std::size_t p = 0; p < cur.values.size(); ++p)
        EXPECT_LE(std::abs(cur.values[p] - prev.values[p]), max_change / n + 1e-15);
    }
    for (double v : cur.values) EXPECT_TRUE(v >= 0 && v <= 1);
    prev = cur;
  }
}

TEST(Blend, ExtremesAreExact) {
  const auto a = random_features(6, 7, 4, 1), b = random_features(6, 7, 4, 2);
  EXPECT_EQ(blend(a, b, MouthMask(6, 7, 0.0)).data, a.data);
  EXPECT_EQ(blend(a, b, MouthMask(6, 7, 1.0)).data, b.data);

  MouthMask binary(6, 7);
  Rng rng(3);
  for (auto& v : binary.values) v = rng.uniform(0, 1) < 0.5 ? 0.0 : 1.0;
  const auto out = blend(a, b, binary);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 7; ++j)
      for (int k = 0; k < 4; ++k) EXPECT_EQ(out.at(i, j, k), binary.at(i, j) == 1.0 ? b.at(i, j, k) : a.at(i, j, k));
}

TEST(Blend, QuarterOracle) {
  const auto a = random_features(5, 5, 3, 4), b = random_features(5, 5, 3, 5);
  const auto out = blend(a, b, MouthMask(5, 5, 0.25));
  for (std::size_t i = 0; i < out.data.size(); ++i) EXPECT_NEAR(out.data[i], 0.75 * a.data[i] + 0.25 * b.data[i], 1e-12);
}

TEST(Blend, ShapeMismatchThrows) {
  const auto a = random_features(5, 5, 3, 4);
  EXPECT_THROW(blend(a, random_features(5, 5, 2, 1), MouthMask(5, 5)), Error);
  EXPECT_THROW(blend(a, a, MouthMask(4, 5)), Error);
}

TEST(ComposeFinal, DelegatesToUpsampler) {
  FieldDims d;
  d.z_dim = 4, d.w_dim = 3, d.mapping_hidden = 4, d.width = 4, d.depth = 1, d.feature_dim = 4;
  d.upsample_factor = 2, d.upsampler_hidden = 3;
  const auto b = init_bundle(9, d);
  Rng rng(1);
  const StyleLatent w = map_latent(b, sample_z(d, rng));
  auto fm = random_features(6, 6, 4, 6);
  for (auto& v : fm.data) v = 0.5 + 0.4 * v;
  const Image out = compose_final(b, fm, w);
  EXPECT_EQ(out.data, upsample(b, fm, w).data);
  EXPECT_EQ(out.data, compose_final(b, fm, w).data);

  FeatureMap flat(6, 6, 4);
  for (auto& v : flat.data) v = 0.3;
  const Image c = compose_final(b, flat, w);
  for (int i = 0; i < c.height; ++i)
    for (int j = 0; j < c.width; ++j)
      for (int k = 0; k < c.channels; ++k) EXPECT_NEAR(c.at(i, j, k), c.at(0, 0, k), 1e-12);
}
