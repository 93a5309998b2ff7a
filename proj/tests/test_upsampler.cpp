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

#include "gtest/gtest.h"
#include "nfs/image_io.hpp"
#include "nfs/upsampler.hpp"
#include "test_util.hpp"

using namespace nfs;

namespace {

FieldDims up_dims() {
  FieldDims d;
  d.z_dim = 4;
  d.w_dim = 3;
  d.mapping_hidden = 4;
  d.width = 4;
  d.depth = 1;
  d.feature_dim = 4;
  d.upsample_factor = 2;
  d.upsampler_hidden = 3;
  return d;
}

FeatureMap random_map(int h, int w, int c, std::uint64_t seed, double lo = 0.05, double hi = 0.95) {
  FeatureMap m(h, w, c);
  Rng rng(seed);
  for (auto& v : m.data) v = rng.uniform(lo, hi);
  return m;
}

void randomise_upsampler(FieldBundle& b, std::uint64_t seed, double scale) {
  Rng rng(seed);
  for_each_param(b, [&](const std::string&, std::vector<double>& v, ParamGroup g) {
    if (g == ParamGroup::kUpsampler)
      for (auto& x : v) x = rng.uniform(-scale, scale);
  });
}

// Independent bilinear oracle: explicit half-pixel source coordinates.
double bilinear_oracle(const FeatureMap& m, int k, double oy, double ox, int s) {
  auto src = [&](double o, int n) { return std::min(std::max((o + 0.5) / s - 0.5, 0.0), n - 1.0); };
  const double sy = src(oy, m.height), sx = src(ox, m.width);
  const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
  const int y1 = std::min(y0 + 1, m.height - 1), x1 = std::min(x0 + 1, m.width - 1);
  const double fy = sy - y0, fx = sx - x0;
  return (1 - fy) * ((1 - fx) * m.at(y0, x0, k) + fx * m.at(y0, x1, k)) +
         fy * ((1 - fx) * m.at(y1, x0, k) + fx * m.at(y1, x1, k));
}

TEST(Upsample, IdentityAtInit) {
  const FieldBundle b = init_bundle(0);
  const FeatureMap m = random_map(6, 5, b.dims.feature_dim, 1);
  const Image img = upsample(b, m, mean_latent(b, 10));
  ASSERT_EQ(img.height, 24);
  ASSERT_EQ(img.width, 20);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(img.at(y, x, k), bilinear_oracle(m, k, y, x, 4), 1e-9);
}

TEST(Upsample, ConstantMapGivesConstantImage) {
  FieldBundle b = init_bundle(1);
  randomise_upsampler(b, 2, 0.3);
  FeatureMap m(5, 7, b.dims.feature_dim);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 7; ++j)
      for (int k = 0; k < m.channels; ++k) m.at(i, j, k) = 0.1 + 0.05 * k;
  const Image img = upsample(b, m, mean_latent(b, 10));
  for (int k = 0; k < 3; ++k)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) EXPECT_NEAR(img.at(y, x, k), img.at(0, 0, k), 1e-9);
}

TEST(Upsample, OutputInUnitInterval) {
  FieldBundle b = init_bundle(2);
  randomise_upsampler(b, 3, 1.0);
  const Image img = upsample(b, random_map(4, 4, b.dims.feature_dim, 4, -0.5, 1.5), mean_latent(b, 10));
  for (double v : img.data) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Upsample, RejectsWrongChannels) {
  const FieldBundle b = init_bundle(0);
  EXPECT_THROW(upsample(b, FeatureMap(2, 2, 5), mean_latent(b, 10)), Error);
}

// d mean(image) / d(upsampler params, w, feature map) against central differences
TEST(UpsampleBackward, MatchesFiniteDifferences) {
  FieldBundle b = zero_bundle(up_dims(), {});
  randomise_upsampler(b, 5, 0.4);
  FeatureMap m = random_map(3, 4, b.dims.feature_dim, 6);
  Eigen::VectorXd w(b.dims.w_dim);
  w << 0.3, -0.2, 0.5;
  const Image probe = upsample(b, m, w);
  Image g(probe.height, probe.width, 3);
  for (auto& v : g.data) v = 1.0 / static_cast<double>(g.data.size());
  auto loss = [&]() {
    const Image img = upsample(b, m, w);
    double acc = 0;
    for (double v : img.data) acc += v;
    return acc / static_cast<double>(img.data.size());
  };
  FieldBundle grad = zeros_like(b);
  std::vector<double> gw(3, 0.0);
  FeatureMap gfm(m.height, m.width, m.channels);
  upsample_backward(b, m, w, g, &grad, gw.data(), &gfm);

  std::vector<double> analytic, numeric;
  for_each_param(b, [&](const std::string& name, std::vector<double>& v, ParamGroup group) {
    if (group != ParamGroup::kUpsampler) return;
    const auto fd = test::central_differences(
        [&](const std::vector<double>& x) {
          const auto keep = v;
          v = x;
          const double r = loss();
          v = keep;
          return r;
        },
        v, 1e-6);
    numeric.insert(numeric.end(), fd.begin(), fd.end());
    for_each_param(grad, [&](const std::string& n2, std::vector<double>& v2, ParamGroup) {
      if (n2 == name) analytic.insert(analytic.end(), v2.begin(), v2.end());
    });
  });
  EXPECT_LT(test::max_relative_error(analytic, numeric, 1e-6), 1e-5);

  const auto fdw = test::central_differences(
      [&](const std::vector<double>& x) {
        const Eigen::VectorXd keep = w;
        w = Eigen::Map<const Eigen::VectorXd>(x.data(), 3);
        const double r = loss();
        w = keep;
        return r;
      },
      std::vector<double>(w.data(), w.data() + 3), 1e-6);
  EXPECT_LT(test::max_relative_error(gw, fdw, 1e-6), 1e-5);

  const auto fdm = test::central_differences(
      [&](const std::vector<double>& x) {
        const auto keep = m.data;
        m.data = x;
        const double r = loss();
        m.data = keep;
        return r;
      },
      m.data, 1e-6);
  EXPECT_LT(test::max_relative_error(gfm.data, fdm, 1e-6), 1e-5);
}

TEST(UpsampleBackward, ResidualZeroStillGivesConvOutputGradient) {
  FieldBundle b = zero_bundle(up_dims(), {});
  Rng rng(7);
  for (auto& x : b.conv1.w) x = rng.uniform(-0.5, 0.5);
  for (auto& x : b.conv2.w) x = rng.uniform(-0.5, 0.5);
  const FeatureMap m = random_map(3, 3, b.dims.feature_dim, 8);
  const Eigen::VectorXd w = Eigen::VectorXd::Zero(3);
  const Image img = upsample(b, m, w);
  Image g(img.height, img.width, 3);
  std::fill(g.data.begin(), g.data.end(), 1.0);
  FieldBundle grad = zeros_like(b);
  upsample_backward(b, m, w, g, &grad, nullptr, nullptr);
  EXPECT_GT(std::abs(grad.conv3.w[0]) + std::abs(grad.conv3.w[5]), 0.0);
  for (double v : grad.conv1.w) EXPECT_EQ(v, 0.0);
}

TEST(ImageIo, PngAndPpmRoundTrip) {
  const auto dir = test::scratch_dir("image_io");
  Image img(5, 7, 3);
  Rng rng(9);
  for (auto& v : img.data) v = std::round(rng.uniform(0, 1) * 255.0) / 255.0;
  for (const char* name : {"a.png", "a.ppm"}) {
    const auto path = (dir / name).string();
    save_image(path, img);
    const Image back = std::string(name).ends_with(".png") ? load_png(path) : load_ppm(path);
    ASSERT_TRUE(back.same_shape(img));
    for (std::size_t q = 0; q < img.data.size(); ++q) EXPECT_EQ(back.data[q], img.data[q]);
    EXPECT_FALSE(std::filesystem::exists(path + ".tmp"));
  }
  EXPECT_THROW(save_image((dir / "a.bmp").string(), img), Error);
  EXPECT_THROW(load_png((dir / "missing.png").string()), Error);
}

TEST(ImageIo, QuantizeClampsAndRounds) {
  EXPECT_EQ(quantize(-0.3), 0);
  EXPECT_EQ(quantize(1.7), 255);
  EXPECT_EQ(quantize(0.5), 128);
  EXPECT_THROW(quantize(std::nan("")), Error);
}

TEST(ImageIo, IdenticalImagesGiveIdenticalPngBytes) {
  const auto dir = test::scratch_dir("image_bytes");
  Image img(8, 8, 3);
  for (std::size_t q = 0; q < img.data.size(); ++q) img.data[q] = static_cast<double>(q % 17) / 16.0;
  save_png((dir / "x.png").string(), img);
  save_png((dir / "y.png").string(), img);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream is(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(is), {});
  };
  EXPECT_EQ(slurp(dir / "x.png"), slurp(dir / "y.png"));
}

}  // namespace
