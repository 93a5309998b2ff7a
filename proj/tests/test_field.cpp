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

#include <cstdlib>
#include <filesystem>

#include "gtest/gtest.h"
#include "nfs/field.hpp"
#include "test_util.hpp"

using namespace nfs;

namespace {

FieldDims small_dims() {
  FieldDims d;
  d.z_dim = 6;
  d.w_dim = 5;
  d.mapping_hidden = 7;
  d.width = 8;
  d.depth = 3;
  d.feature_dim = 4;
  return d;
}

// Randomises every parameter, biases included.
FieldBundle random_bundle(std::uint64_t seed, const FieldDims& dims, const EncodingConfig& enc = {}) {
  FieldBundle b = zero_bundle(dims, enc);
  Rng rng(seed);
  for_each_param(b, [&](const std::string&, std::vector<double>& v, ParamGroup) {
    for (auto& x : v) x = rng.uniform(-0.6, 0.6);
  });
  return b;
}

Vec3 random_dir(Rng& rng) {
  Vec3 d(rng.normal(), rng.normal(), rng.normal());
  return d.normalized();
}

// Straight-line evaluation on Eigen matrices, written independently of the
// fma-chain kernels.
struct DenseOracle {
  static Eigen::MatrixXd weights(const Dense& d) {
    Eigen::MatrixXd m(d.out, d.in);
    for (int j = 0; j < d.out; ++j)
      for (int k = 0; k < d.in; ++k) m(j, k) = d.weight(j, k);
    return m;
  }
  static Eigen::VectorXd bias(const Dense& d) { return Eigen::Map<const Eigen::VectorXd>(d.b.data(), d.out); }
  static Eigen::VectorXd lrelu(Eigen::VectorXd v) {
    for (auto& x : v) x = x > 0 ? x : 0.2 * x;
    return v;
  }
};

std::pair<Eigen::VectorXd, double> oracle_query(const FieldBundle& b, const Vec3& p, const Vec3& d,
                                                const Eigen::VectorXd& w) {
  auto enc = [](const Vec3& x, int L) {
    Eigen::VectorXd out(3 + 6 * L);
    out.head(3) = x;
    for (int l = 0; l < L; ++l)
      for (int c = 0; c < 3; ++c) {
        out(3 + 6 * l + c) = std::sin(std::pow(2.0, l) * kPi * x(c));
        out(3 + 6 * l + 3 + c) = std::cos(std::pow(2.0, l) * kPi * x(c));
      }
    return out;
  };
  const Eigen::VectorXd zp = enc(p, b.enc.num_frequencies_position), zd = enc(d, b.enc.num_frequencies_direction);
  Eigen::VectorXd h(zp.size() + zd.size());
  h << zp, zd;
  for (const auto& layer : b.layers) {
    Eigen::VectorXd x(h.size() + w.size());
    x << h, w;
    h = DenseOracle::lrelu(DenseOracle::weights(layer) * x + DenseOracle::bias(layer));
  }
  const Eigen::VectorXd out = DenseOracle::weights(b.head) * h + DenseOracle::bias(b.head);
  const double r2 = p.squaredNorm();
  const double window = r2 < 1 ? (1 - r2) * (1 - r2) : 0.0;
  const double sigma = std::log1p(std::exp(out(0) + 4.0 * (1 - r2 / 0.64))) * window;
  Eigen::VectorXd feat = out.tail(out.size() - 1);
  for (auto& f : feat) f = 1.0 / (1.0 + std::exp(-f));
  return {feat, sigma};
}

TEST(Encode, ZeroInput) {
  const auto e = encode(Vec3::Zero(), 4);
  ASSERT_EQ(e.size(), 27u);
  for (int i = 0; i < 3; ++i) EXPECT_EQ(e[i], 0.0);
  for (int l = 0; l < 4; ++l)
    for (int c = 0; c < 3; ++c) {
      EXPECT_EQ(e[3 + 6 * l + c], 0.0);
      EXPECT_EQ(e[3 + 6 * l + 3 + c], 1.0);
    }
}

TEST(Encode, UnitX) {
  const auto e = encode(Vec3(1, 0, 0), 1);
  ASSERT_EQ(e.size(), 9u);
  EXPECT_NEAR(e[3], 0.0, 1e-12);
  EXPECT_NEAR(e[6], -1.0, 1e-12);
  EXPECT_NEAR(e[4], 0.0, 1e-12);
  EXPECT_NEAR(e[7], 1.0, 1e-12);
}

TEST(Encode, MatchesTermByTermOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const Vec3 x(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const int L = 1 + static_cast<int>(rng.index(8));
    const auto e = encode(x, L);
    ASSERT_EQ(e.size(), encoded_size(L));
    std::size_t i = 0;
    for (int c = 0; c < 3; ++c) EXPECT_EQ(e[i++], x(c));
    for (int l = 0; l < L; ++l) {
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(e[i++], std::sin(std::ldexp(kPi, l) * x(c)), 1e-12);
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(e[i++], std::cos(std::ldexp(kPi, l) * x(c)), 1e-12);
    }
  }
}

TEST(EncodingConfig, Validation) {
  EXPECT_THROW((EncodingConfig{0, 2}.validate()), Error);
  EXPECT_THROW((EncodingConfig{3, -1}.validate()), Error);
  EXPECT_NO_THROW((EncodingConfig{1, 0}.validate()));
}

TEST(MapLatent, DeterministicAndZeroWeights) {
  const FieldBundle b = random_bundle(1, small_dims());
  Rng rng(5);
  const auto z = sample_z(b.dims, rng);
  EXPECT_EQ(map_latent(b, z), map_latent(b, z));

  FieldBundle zb = zero_bundle(small_dims(), {});
  for (std::size_t j = 0; j < zb.map1.b.size(); ++j) zb.map1.b[j] = 0.1 * static_cast<double>(j);
  for (int t = 0; t < 5; ++t) {
    const auto w = map_latent(zb, sample_z(zb.dims, rng));
    for (int j = 0; j < w.size(); ++j) EXPECT_EQ(w(j), 0.1 * j);
  }
  EXPECT_THROW(map_latent(b, Eigen::VectorXd::Zero(3)), Error);
}

TEST(MapLatent, MatchesForwardOracle) {
  const FieldBundle b = random_bundle(2, small_dims());
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const auto z = sample_z(b.dims, rng);
    const Eigen::VectorXd h =
        DenseOracle::lrelu(DenseOracle::weights(b.map0) * z + DenseOracle::bias(b.map0));
    const Eigen::VectorXd want = DenseOracle::weights(b.map1) * h + DenseOracle::bias(b.map1);
    EXPECT_LT((map_latent(b, z) - want).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(QueryField, MatchesForwardOracle) {
  const FieldBundle b = random_bundle(3, small_dims(), {3, 1});
  Rng rng(7);
  for (int t = 0; t < 50; ++t) {
    const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Vec3 d = random_dir(rng);
    Eigen::VectorXd w(b.dims.w_dim);
    for (auto& v : w) v = rng.normal();
    const auto got = query_field(b, p, d, w);
    const auto [feat, sigma] = oracle_query(b, p, d, w);
    EXPECT_NEAR(got.sigma, sigma, 1e-12 * std::max(1.0, sigma));
    for (int c = 0; c < b.dims.feature_dim; ++c) EXPECT_NEAR(got.feature[static_cast<std::size_t>(c)], feat(c), 1e-12);
  }
}

TEST(QueryField, RangesAndDeterminism) {
  const FieldBundle b = init_bundle(11);
  Rng rng(8);
  const auto w = mean_latent(b, 50);
  for (int t = 0; t < 300; ++t) {
    const Vec3 p(rng.uniform(-1.3, 1.3), rng.uniform(-1.3, 1.3), rng.uniform(-1.3, 1.3));
    Eigen::VectorXd ws = w;
    for (auto& v : ws) v += 3.0 * rng.normal();
    const Vec3 d = random_dir(rng);
    const auto a = query_field(b, p, d, ws);
    const auto c = query_field(b, p, d, ws);
    EXPECT_GE(a.sigma, 0.0);
    EXPECT_EQ(a.sigma, c.sigma);
    EXPECT_EQ(a.feature, c.feature);
    for (double f : a.feature) {
      EXPECT_GE(f, 0.0);
      EXPECT_LE(f, 1.0);
    }
    if (p.squaredNorm() >= 1.0) { EXPECT_EQ(a.sigma, 0.0); }
  }
}

TEST(QueryField, RejectsNonUnitDirection) {
  const FieldBundle b = random_bundle(4, small_dims());
  const Eigen::VectorXd w = Eigen::VectorXd::Zero(b.dims.w_dim);
  EXPECT_THROW(query_field(b, Vec3::Zero(), Vec3(1, 1, 0), w), Error);
  EXPECT_NO_THROW(query_field(b, Vec3::Zero(), Vec3(1 + 5e-7, 0, 0), w));
  EXPECT_THROW(query_field(b, Vec3::Zero(), Vec3(1, 0, 0), Eigen::VectorXd::Zero(2)), Error);
}

// Gradient of sigma with respect to every field parameter and the style.
TEST(QueryField, SigmaGradientMatchesFiniteDifferences) {
  FieldBundle b = random_bundle(5, small_dims(), {2, 1});
  const Vec3 p(0.21, -0.13, 0.34);
  const Vec3 d = Vec3(0.3, -0.5, 0.8).normalized();
  Eigen::VectorXd w(b.dims.w_dim);
  for (int i = 0; i < w.size(); ++i) w(i) = 0.3 * std::sin(1.0 + i);

  FieldBundle grad = zeros_like(b);
  std::vector<double> gw(static_cast<std::size_t>(w.size()), 0.0);
  const auto zd = encode(d, b.enc.num_frequencies_direction);
  field_point_backward(b, style_biases(b, w), p, zd.data(), w, 1.0, nullptr, &grad, gw.data());

  std::vector<double> analytic, numeric;
  for_each_param(b, [&](const std::string& name, std::vector<double>& v, ParamGroup g) {
    if (g != ParamGroup::kField) return;
    std::vector<double>* gv = nullptr;
    for_each_param(grad, [&](const std::string& n2, std::vector<double>& v2, ParamGroup) {
      if (n2 == name) gv = &v2;
    });
    const auto fd = test::central_differences(
        [&](const std::vector<double>& x) {
          const auto keep = v;
          v = x;
          const double s = query_field(b, p, d, w).sigma;
          v = keep;
          return s;
        },
        v, 1e-5);
    analytic.insert(analytic.end(), gv->begin(), gv->end());
    numeric.insert(numeric.end(), fd.begin(), fd.end());
  });
  const auto fdw = test::central_differences(
      [&](const std::vector<double>& x) {
        return query_field(b, p, d, Eigen::Map<const Eigen::VectorXd>(x.data(), w.size())).sigma;
      },
      std::vector<double>(w.data(), w.data() + w.size()), 1e-5);
  analytic.insert(analytic.end(), gw.begin(), gw.end());
  numeric.insert(numeric.end(), fdw.begin(), fdw.end());
  EXPECT_LT(test::max_relative_error(analytic, numeric, 1e-4), 1e-6);
}

TEST(QueryField, FeatureGradientMatchesFiniteDifferences) {
  FieldBundle b = random_bundle(6, small_dims(), {2, 1});
  const Vec3 p(-0.3, 0.25, 0.1);
  const Vec3 d = Vec3(-0.2, 0.1, 1.0).normalized();
  const Eigen::VectorXd w = Eigen::VectorXd::Constant(b.dims.w_dim, 0.2);
  const std::vector<double> gf = {0.5, -1.0, 0.25, 2.0};
  auto loss = [&]() {
    const auto s = query_field(b, p, d, w);
    double acc = 0.3 * s.sigma;
    for (std::size_t c = 0; c < gf.size(); ++c) acc += gf[c] * s.feature[c];
    return acc;
  };
  FieldBundle grad = zeros_like(b);
  const auto zd = encode(d, b.enc.num_frequencies_direction);
  field_point_backward(b, style_biases(b, w), p, zd.data(), w, 0.3, gf.data(), &grad, nullptr);
  std::vector<double> analytic, numeric;
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    auto& v = b.layers[l].w;
    const auto fd = test::central_differences(
        [&](const std::vector<double>& x) {
          const auto keep = v;
          v = x;
          const double r = loss();
          v = keep;
          return r;
        },
        v, 1e-5);
    analytic.insert(analytic.end(), grad.layers[l].w.begin(), grad.layers[l].w.end());
    numeric.insert(numeric.end(), fd.begin(), fd.end());
  }
  EXPECT_LT(test::max_relative_error(analytic, numeric, 1e-4), 1e-6);
}

TEST(InitBundle, SeedDeterminism) {
  EXPECT_EQ(checksum(init_bundle(3)), checksum(init_bundle(3)));
  EXPECT_NE(checksum(init_bundle(3)), checksum(init_bundle(4)));
}

TEST(InitBundle, DensityCalibration) {
  const FieldBundle b = init_bundle(0);
  const auto w = mean_latent(b);
  Rng rng(99);
  double acc = 0.0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    acc += query_field(b, p, random_dir(rng), w).sigma;
  }
  // independent points, so only approximately the calibrated value
  EXPECT_NEAR(acc / n * 2.0 * std::sqrt(3.0), 1.0, 0.15);
}

TEST(InitBundle, OriginDensitySweep) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const FieldBundle b = init_bundle(seed);
    const double s = query_field(b, Vec3::Zero(), Vec3(0, 0, 1), mean_latent(b)).sigma;
    EXPECT_GT(s, 0.1) << "seed " << seed;
    EXPECT_LT(s, 10.0) << "seed " << seed;
  }
}

TEST(InitBundle, UpsamplerResidualStartsAtZero) {
  const FieldBundle b = init_bundle(1);
  for (double v : b.conv3.w) EXPECT_EQ(v, 0.0);
  for (double v : b.up_scale.w) EXPECT_EQ(v, 0.0);
  for (double v : b.up_shift.w) EXPECT_EQ(v, 0.0);
}

TEST(InitBundle, GoldenCheckpoint) {
  const auto path = std::filesystem::path(std::getenv("NFS_TEST_DATA") ? std::getenv("NFS_TEST_DATA") : "tests/data") /
                    "init_bundle_seed0.nfsp";
  const FieldBundle b = init_bundle(0);
  if (std::getenv("NFS_REGENERATE_GOLDEN")) save_bundle(path.string(), b);
  ASSERT_TRUE(std::filesystem::exists(path)) << path;
  const FieldBundle golden = load_bundle(path.string());
  EXPECT_EQ(checksum(golden), checksum(b));
}

TEST(Checkpoint, RoundTripAndMissingTensor) {
  const auto dir = test::scratch_dir("field_ckpt");
  const FieldBundle b = random_bundle(9, small_dims(), {3, 0});
  save_bundle((dir / "b.nfsp").string(), b);
  const FieldBundle r = load_bundle((dir / "b.nfsp").string());
  EXPECT_EQ(checksum(r), checksum(b));
  EXPECT_EQ(r.enc.num_frequencies_position, 3);
  auto t = bundle_to_tensors(b);
  t.erase("field.head.bias");
  EXPECT_THROW(bundle_from_tensors(t), Error);
}

TEST(Properties, StyleInjectionMatters) {
  const FieldBundle b = init_bundle(2);
  Rng rng(10);
  const auto w0 = mean_latent(b, 200);
  int changed = 0;
  for (int t = 0; t < 50; ++t) {
    const Vec3 p(rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7), rng.uniform(-0.7, 0.7));
    const Vec3 d = random_dir(rng);
    const auto w1 = map_latent(b, sample_z(b.dims, rng));
    const auto a = query_field(b, p, d, w0), c = query_field(b, p, d, w1);
    double diff = std::abs(a.sigma - c.sigma);
    for (std::size_t k = 0; k < a.feature.size(); ++k) diff += std::abs(a.feature[k] - c.feature[k]);
    changed += diff > 1e-6;
  }
  EXPECT_EQ(changed, 50);
}

// Sampled slopes on the cube stay under a recorded bound.
TEST(Properties, LipschitzOnUnitCube) {
  constexpr double kSlopeBound = 60.0;
  const FieldBundle b = init_bundle(0);
  const auto w = mean_latent(b);
  Rng rng(12);
  double worst = 0.0;
  for (int t = 0; t < 2000; ++t) {
    const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
    const Vec3 step = 1e-4 * random_dir(rng);
    const Vec3 d = random_dir(rng);
    const auto a = query_field(b, p, d, w), c = query_field(b, p + step, d, w);
    double diff = std::abs(a.sigma - c.sigma);
    for (std::size_t k = 0; k < a.feature.size(); ++k) diff = std::max(diff, std::abs(a.feature[k] - c.feature[k]));
    worst = std::max(worst, diff / 1e-4);
  }
  RecordProperty("max_slope", std::to_string(worst));
  EXPECT_LT(worst, kSlopeBound);
}

}  // namespace
