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

// Residual latent network for the mouth interior, its analytic landmark
// estimator, a small image discriminator, and the training loop.

#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "nfs/autodiff.hpp"
#include "nfs/core.hpp"
#include "nfs/face_model.hpp"
#include "nfs/field.hpp"
#include "nfs/render.hpp"
#include "nfs/upsampler.hpp"

namespace nfs {

struct LossWeights {
  double ldm = 1.0;
  double tdmm = 1.0;
  double gan = 0.1;

  void validate() const {
    NFS_CHECK(ldm >= 0 && tdmm >= 0 && gan >= 0, "loss weights must be non-negative, got (", ldm, ", ", tdmm, ", ",
              gan, ")");
  }
};

inline double total_loss(double l_ldm, double l_3dmm, double l_gan, const LossWeights& w) {
  w.validate();
  return w.ldm * l_ldm + w.tdmm * l_3dmm + w.gan * l_gan;
}

/// Mean over landmarks of the squared distance.
inline double loss_ldm(const Points3& target, const Points3& out) {
  NFS_CHECK(target.rows() == out.rows() && target.rows() > 0, "landmark count mismatch: ", target.rows(), " vs ",
            out.rows());
  return (target - out).rowwise().squaredNorm().mean();
}

/// Squared error over expression coefficients plus the identity regulariser.
inline double loss_3dmm(const ShapeCoeffs& target, const ShapeCoeffs& est) {
  NFS_CHECK(target.alpha.size() == est.alpha.size() && target.beta.size() == est.beta.size(),
            "coefficient dimension mismatch");
  return (target.beta - est.beta).squaredNorm() + (target.alpha - est.alpha).squaredNorm();
}

// ---------------------------------------------------------------------------
// Analytic coefficient estimator

/// Least squares over landmark positions, solved through the normal equations.
class LandmarkEstimator {
 public:
  explicit LandmarkEstimator(const BlendshapeBasis& basis)
      : k_id_(basis.k_id()), k_exp_(basis.k_exp()), design_(landmark_design(basis)) {
    mean_ = as_flat(extract_landmarks(basis, VertexSet{basis.mean_shape}));
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design_);
    qr.setThreshold(1e-10);
    NFS_CHECK(qr.rank() == design_.cols(), "landmark design is rank deficient (rank ", qr.rank(), " of ",
              design_.cols(), "); coefficients are not identifiable from ", basis.num_landmarks(), " landmarks");
    const Eigen::MatrixXd normal = design_.transpose() * design_;
    solver_ = normal.ldlt();
    pinv_ = solver_.solve(design_.transpose());
  }

  ShapeCoeffs estimate(const Points3& observed) const {
    NFS_CHECK(observed.rows() * 3 == design_.rows(), "expected ", design_.rows() / 3, " landmarks, got ",
              observed.rows());
    const Eigen::VectorXd x = solver_.solve(design_.transpose() * (as_flat(observed) - mean_));
    return {x.head(k_id_), x.tail(k_exp_)};
  }

  Points3 landmarks(const ShapeCoeffs& c) const {
    Eigen::VectorXd x(k_id_ + k_exp_);
    x << c.alpha, c.beta;
    return as_points(mean_ + design_ * x);
  }

  const Eigen::MatrixXd& design() const { return design_; }
  const Eigen::MatrixXd& pseudo_inverse() const { return pinv_; }
  const Eigen::VectorXd& mean() const { return mean_; }
  Eigen::Index k_id() const { return k_id_; }
  Eigen::Index k_exp() const { return k_exp_; }

 private:
  Eigen::Index k_id_, k_exp_;
  Eigen::MatrixXd design_;  // 3L x (K_id + K_exp)
  Eigen::VectorXd mean_;    // 3L
  Eigen::LDLT<Eigen::MatrixXd> solver_;
  Eigen::MatrixXd pinv_;    // (K_id + K_exp) x 3L
};

struct CoeffEstimate {
  ShapeCoeffs coeffs;
  Points3 landmarks;
};

inline CoeffEstimate estimate_coeffs_and_landmarks(const Points3& observed, const BlendshapeBasis& basis) {
  const LandmarkEstimator est(basis);
  CoeffEstimate out;
  out.coeffs = est.estimate(observed);
  out.landmarks = est.landmarks(out.coeffs);
  return out;
}

// ---------------------------------------------------------------------------
// Latent probe

/// Fixed linear map from a style latent to the expression it renders:
/// whitened coordinates along the leading principal axes of mapped latents.
/// The full whitening is kept for normalising LipaintNet inputs and outputs.
struct LatentProbe {
  Eigen::VectorXd mean;       // D
  Eigen::MatrixXd whiten;     // D x D, rows ordered by decreasing variance
  Eigen::MatrixXd unwhiten;   // D x D, inverse of whiten
  Eigen::Index k = 0;

  auto to_beta() const { return whiten.topRows(k); }
  auto to_latent() const { return unwhiten.leftCols(k); }
  Eigen::VectorXd beta(const StyleLatent& w) const { return to_beta() * (w - mean); }
  StyleLatent latent(const Eigen::VectorXd& beta) const { return mean + to_latent() * beta; }
  Eigen::Index k_exp() const { return k; }
};

inline LatentProbe fit_latent_probe(const FieldBundle& b, Eigen::Index k_exp, int samples = 1000,
                                    std::uint64_t seed = 0x9e0be) {
  NFS_CHECK(k_exp >= 1 && k_exp <= b.dims.w_dim, "probe needs 1 <= K_exp <= w_dim, got ", k_exp);
  NFS_CHECK(samples > b.dims.w_dim, "probe needs more samples than latent dimensions");
  Rng rng(seed);
  Eigen::MatrixXd ws(samples, b.dims.w_dim);
  for (int i = 0; i < samples; ++i) ws.row(i) = map_latent(b, sample_z(b.dims, rng)).transpose();
  LatentProbe p;
  p.k = k_exp;
  p.mean = ws.colwise().mean().transpose();
  const Eigen::MatrixXd centred = ws.rowwise() - p.mean.transpose();
  const Eigen::MatrixXd cov = centred.transpose() * centred / (samples - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  NFS_CHECK(eig.info() == Eigen::Success, "latent covariance eigendecomposition failed");
  const Eigen::Index d = b.dims.w_dim;
  p.whiten.resize(d, d);
  p.unwhiten.resize(d, d);
  for (Eigen::Index k = 0; k < d; ++k) {
    Eigen::VectorXd u = eig.eigenvectors().col(d - 1 - k);
    const double var = eig.eigenvalues()(d - 1 - k);
    NFS_CHECK(var > 1e-12, "mapped latents are degenerate along principal axis ", k);
    Eigen::Index arg = 0;
    u.cwiseAbs().maxCoeff(&arg);
    if (u(arg) < 0) u = -u;
    p.whiten.row(k) = u.transpose() / std::sqrt(var);
    p.unwhiten.col(k) = u * std::sqrt(var);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Training examples

struct ExampleOptions {
  double beta_source_std = 0.5;
  double alpha_range = 1.0;
  double augmentation = 1.0;  // u ~ U[-a, a]^K
  bool zero_augmentation = false;
};

struct TrainingExample {
  StyleLatent w_id;
  Eigen::VectorXd beta_source;
  Eigen::VectorXd beta_target;
  Eigen::VectorXd alpha;
  Points3 ldm_target;

  ShapeCoeffs target() const { return {alpha, beta_target}; }
};

inline TrainingExample sample_training_example(const FieldBundle& b, const BlendshapeBasis& basis, std::uint64_t seed,
                                               const ExampleOptions& opts = {}) {
  Rng rng(seed);
  TrainingExample ex;
  ex.w_id = map_latent(b, sample_z(b.dims, rng));
  ex.alpha.resize(basis.k_id());
  for (auto& v : ex.alpha) v = rng.uniform(-opts.alpha_range, opts.alpha_range);
  ex.beta_source.resize(basis.k_exp());
  for (auto& v : ex.beta_source) v = opts.beta_source_std * rng.normal();
  ex.beta_target = ex.beta_source;
  if (!opts.zero_augmentation)
    for (auto& v : ex.beta_target) v += rng.uniform(-opts.augmentation, opts.augmentation);
  ex.ldm_target = extract_landmarks(basis, evaluate_shape(basis, ex.target()));
  return ex;
}

// ---------------------------------------------------------------------------
// LipaintNet

/// Trainable layers plus a frozen latent normalisation: the network sees
/// whitened latents and predicts the residual in whitened coordinates.
struct LipaintParams {
  ad::TensorMap tensors;
  int k_exp = 0;
  int w_dim = 0;
  int width = 128;
  int depth = 3;
  double residual_gain = 16.0;
  Eigen::VectorXd latent_mean;  // D
  Eigen::MatrixXd whiten;       // D x D
  Eigen::MatrixXd unwhiten;     // D x D
};

namespace detail {

inline std::string lipaint_layer(int l) { return "lipaint.l" + std::to_string(l); }

inline ad::Tensor matrix_tensor(const Eigen::MatrixXd& m) {
  ad::Tensor t({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())});
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.at(static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = m(r, c);
  return t;
}

inline ad::NodeId lipaint_graph(ad::Graph& g, ad::NodeId beta, ad::NodeId w, const LipaintParams& p) {
  const ad::Shape ws = g.shape(w);
  const auto mean = g.broadcast(g.constant(matrix_tensor(p.latent_mean.transpose())), ws);
  const auto w_hat = g.matmul(g.sub(w, mean), g.constant(matrix_tensor(p.whiten.transpose())));
  ad::NodeId h = g.concat(beta, w_hat, 1);
  std::size_t in = static_cast<std::size_t>(p.k_exp + p.w_dim);
  for (int l = 0; l + 1 < p.depth; ++l) {
    h = g.leaky_relu(g.linear(h, lipaint_layer(l), in, static_cast<std::size_t>(p.width)));
    in = static_cast<std::size_t>(p.width);
  }
  const auto residual = g.scale(g.linear(h, lipaint_layer(p.depth - 1), in, static_cast<std::size_t>(p.w_dim)), p.residual_gain);
  return g.add(w, g.matmul(residual, g.constant(matrix_tensor(p.unwhiten.transpose()))));
}

inline ad::Tensor rows_tensor(const std::vector<Eigen::VectorXd>& rows) {
  NFS_CHECK(!rows.empty(), "empty batch");
  const auto cols = static_cast<std::size_t>(rows.front().size());
  ad::Tensor t({rows.size(), cols});
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < cols; ++c) t.at(r, c) = rows[r](static_cast<Eigen::Index>(c));
  return t;
}

}  // namespace detail

/// He-uniform hidden layers; the output layer is zero so the network starts
/// as the identity on w. `probe` supplies the latent normalisation.
inline LipaintParams init_lipaint(const LatentProbe& probe, std::uint64_t seed, int width = 128, int depth = 3) {
  const int k_exp = static_cast<int>(probe.k_exp()), w_dim = static_cast<int>(probe.mean.size());
  NFS_CHECK(k_exp >= 1 && w_dim >= 1 && width >= 1 && depth >= 1, "invalid LipaintNet dimensions");
  LipaintParams p;
  p.k_exp = k_exp, p.w_dim = w_dim, p.width = width, p.depth = depth;
  p.latent_mean = probe.mean, p.whiten = probe.whiten, p.unwhiten = probe.unwhiten;
  Rng rng(seed);
  int in = k_exp + w_dim;
  for (int l = 0; l < depth; ++l) {
    const int out = l + 1 == depth ? w_dim : width;
    ad::Tensor wt({static_cast<std::size_t>(in), static_cast<std::size_t>(out)});
    if (l + 1 < depth) {
      const double bound = std::sqrt(6.0 / static_cast<double>(in));
      for (auto& v : wt.values()) v = rng.uniform(-bound, bound);
    }
    p.tensors[detail::lipaint_layer(l) + ".weight"] = wt;
    p.tensors[detail::lipaint_layer(l) + ".bias"] = ad::Tensor({1, static_cast<std::size_t>(out)});
    in = width;
  }
  return p;
}

/// w_exp = w_id + residual(beta_target, w_id).
inline StyleLatent lipaint_forward(const LipaintParams& p, const Eigen::VectorXd& beta_target, const StyleLatent& w_id) {
  NFS_CHECK(beta_target.size() == p.k_exp && w_id.size() == p.w_dim, "LipaintNet expects (", p.k_exp, ", ", p.w_dim,
            ") inputs, got (", beta_target.size(), ", ", w_id.size(), ")");
  ad::Graph g;
  const auto beta = g.input("beta", {1, static_cast<std::size_t>(p.k_exp)});
  const auto w = g.input("w", {1, static_cast<std::size_t>(p.w_dim)});
  const auto out = detail::lipaint_graph(g, beta, w, p);
  ad::TensorMap bind = p.tensors;
  bind["beta"] = detail::rows_tensor({beta_target});
  bind["w"] = detail::rows_tensor({w_id});
  const auto ev = ad::forward(g, bind);
  return Eigen::Map<const Eigen::VectorXd>(ev[out].data(), p.w_dim);
}

/// Per-frame mouth latent from the audio expression and the inverted latent.
inline StyleLatent infer_mouth_latent(const LipaintParams& p, const Eigen::VectorXd& beta_audio, const StyleLatent& w_inv) {
  return lipaint_forward(p, beta_audio, w_inv);
}

inline void save_lipaint(const std::string& path, const LipaintParams& p) {
  ad::TensorMap t = p.tensors;
  t["lipaint.meta"] = ad::Tensor({4}, std::vector<double>{double(p.k_exp), double(p.w_dim), double(p.width), double(p.depth)});
  t["lipaint.norm.mean"] = detail::matrix_tensor(p.latent_mean.transpose());
  t["lipaint.norm.whiten"] = detail::matrix_tensor(p.whiten);
  t["lipaint.norm.unwhiten"] = detail::matrix_tensor(p.unwhiten);
  ad::save_checkpoint(path, t);
}

inline LipaintParams load_lipaint(const std::string& path) {
  ad::TensorMap t = ad::load_checkpoint(path);
  auto take = [&](const std::string& name, std::size_t rows, std::size_t cols) {
    auto it = t.find(name);
    NFS_CHECK(it != t.end() && it->second.size() == rows * cols, "checkpoint \"", path, "\" lacks a valid \"", name, "\"");
    Eigen::MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = it->second[r * cols + c];
    t.erase(it);
    return m;
  };
  const Eigen::MatrixXd meta = take("lipaint.meta", 1, 4);
  LipaintParams p;
  p.k_exp = int(meta(0, 0)), p.w_dim = int(meta(0, 1)), p.width = int(meta(0, 2)), p.depth = int(meta(0, 3));
  NFS_CHECK(p.k_exp >= 1 && p.w_dim >= 1 && p.width >= 1 && p.depth >= 1, "\"", path, "\" has invalid LipaintNet dimensions");
  const auto d = static_cast<std::size_t>(p.w_dim);
  p.latent_mean = take("lipaint.norm.mean", 1, d).transpose();
  p.whiten = take("lipaint.norm.whiten", d, d);
  p.unwhiten = take("lipaint.norm.unwhiten", d, d);
  int in = p.k_exp + p.w_dim;
  for (int l = 0; l < p.depth; ++l) {
    const int out = l + 1 == p.depth ? p.w_dim : p.width;
    for (const auto& [suffix, shape] : {std::pair<std::string, ad::Shape>{".weight", {std::size_t(in), std::size_t(out)}},
                                        std::pair<std::string, ad::Shape>{".bias", {1, std::size_t(out)}}}) {
      const auto name = detail::lipaint_layer(l) + suffix;
      auto it = t.find(name);
      NFS_CHECK(it != t.end() && it->second.shape() == shape, "checkpoint \"", path, "\" lacks a valid \"", name, "\"");
      p.tensors[name] = it->second;
      t.erase(it);
    }
    in = p.width;
  }
  NFS_CHECK(t.empty(), "checkpoint \"", path, "\" has unexpected tensors");
  return p;
}

// ---------------------------------------------------------------------------
// Toy discriminator

/// Two stride-2 3x3 convolutions, global average pooling and a logistic
/// unit over H x W RGB images.
struct ToyDiscriminator {
  ad::TensorMap params;
  int height = 16;
  int width = 16;
  int channels = 8;
  double input_gain = 8.0;  // renders are dark; lifts them to unit scale
  double train_accuracy = 0.0;
  double heldout_accuracy = 0.0;
};

namespace detail {

// im2col of a [B, H, W, C] tensor (stored flat) for a 3x3 stride-2 kernel
// with edge replication. Rows (b, oy, ox), columns (ky, kx, c).
inline std::vector<std::size_t> im2col_indices(int batch, int h, int w, int c, int* oh, int* ow) {
  *oh = (h + 1) / 2;
  *ow = (w + 1) / 2;
  std::vector<std::size_t> idx;
  idx.reserve(static_cast<std::size_t>(batch * *oh * *ow * 9 * c));
  for (int b = 0; b < batch; ++b)
    for (int y = 0; y < *oh; ++y)
      for (int x = 0; x < *ow; ++x)
        for (int ky = -1; ky <= 1; ++ky)
          for (int kx = -1; kx <= 1; ++kx) {
            const int sy = std::clamp(2 * y + ky, 0, h - 1), sx = std::clamp(2 * x + kx, 0, w - 1);
            for (int k = 0; k < c; ++k)
              idx.push_back(static_cast<std::size_t>(((b * h + sy) * w + sx) * c + k));
          }
  return idx;
}

inline ad::NodeId disc_graph(ad::Graph& g, ad::NodeId images, int batch, const ToyDiscriminator& d) {
  int h = d.height, w = d.width, c = 3;
  ad::NodeId x = g.scale(images, d.input_gain);
  for (int l = 0; l < 2; ++l) {
    int oh = 0, ow = 0;
    auto idx = im2col_indices(batch, h, w, c, &oh, &ow);
    const auto rows = static_cast<std::size_t>(batch * oh * ow);
    const auto patch = static_cast<std::size_t>(9 * c);
    x = g.gather(x, std::move(idx), {rows, patch});
    x = g.leaky_relu(g.linear(x, "disc.conv" + std::to_string(l), patch, static_cast<std::size_t>(d.channels)));
    h = oh, w = ow, c = d.channels;
  }
  const int positions = h * w;
  ad::Tensor pool({static_cast<std::size_t>(batch), static_cast<std::size_t>(batch * positions)});
  for (int b = 0; b < batch; ++b)
    for (int q = 0; q < positions; ++q) pool.at(static_cast<std::size_t>(b), static_cast<std::size_t>(b * positions + q)) = 1.0 / positions;
  const auto pooled = g.matmul(g.constant(pool), x);
  return g.linear(pooled, "disc.out", static_cast<std::size_t>(d.channels), 1);
}

inline ad::Tensor images_tensor(const std::vector<Image>& imgs) {
  NFS_CHECK(!imgs.empty(), "empty image batch");
  const std::size_t n = imgs.front().data.size();
  ad::Tensor t({imgs.size(), n});
  for (std::size_t b = 0; b < imgs.size(); ++b) {
    NFS_CHECK(imgs[b].data.size() == n && imgs[b].channels == 3, "image batch has mixed shapes");
    std::copy(imgs[b].data.begin(), imgs[b].data.end(), t.values().begin() + static_cast<long>(b * n));
  }
  return t;
}

}  // namespace detail

inline ToyDiscriminator init_discriminator(int height, int width, std::uint64_t seed, int channels = 8) {
  NFS_CHECK(height >= 4 && width >= 4 && channels >= 1, "invalid discriminator dimensions");
  ToyDiscriminator d;
  d.height = height, d.width = width, d.channels = channels;
  ad::Graph g;
  detail::disc_graph(g, g.input("images", {1, static_cast<std::size_t>(height * width * 3)}), 1, d);
  Rng rng(seed);
  for (auto id : g.parameters()) {
    const auto& n = g.node(id);
    ad::Tensor t(n.shape);
    // zero logistic layer: untrained output is exactly 0.5
    if (n.name.starts_with("disc.conv") && n.name.ends_with(".weight")) {
      const double bound = std::sqrt(3.0 / static_cast<double>(n.shape[0]));
      for (auto& v : t.values()) v = rng.uniform(-bound, bound);
    }
    d.params[n.name] = t;
  }
  return d;
}

inline constexpr double kDiscClamp = 1e-6;

/// D(image) in (0, 1).
inline double discriminate(const ToyDiscriminator& d, const Image& img) {
  NFS_CHECK(img.height == d.height && img.width == d.width && img.channels == 3, "discriminator expects ", d.height,
            "x", d.width, "x3 images, got ", img.height, "x", img.width, "x", img.channels);
  ad::Graph g;
  const auto in = g.input("images", {1, img.data.size()});
  const auto p = g.sigmoid(detail::disc_graph(g, in, 1, d));
  ad::TensorMap bind = d.params;
  bind["images"] = detail::images_tensor({img});
  return ad::forward(g, bind)[p].item();
}

/// -log D(image) with D clamped to [1e-6, 1 - 1e-6]; optional image gradient.
inline double loss_gan(const ToyDiscriminator& d, const Image& img, Image* grad = nullptr) {
  NFS_CHECK(img.height == d.height && img.width == d.width && img.channels == 3, "discriminator expects ", d.height,
            "x", d.width, "x3 images, got ", img.height, "x", img.width, "x", img.channels);
  ad::Graph g;
  const auto in = g.parameter("image", {1, img.data.size()});
  const auto p = g.sigmoid(detail::disc_graph(g, in, 1, d));
  ad::TensorMap bind = d.params;
  bind["image"] = detail::images_tensor({img});
  const auto ev = ad::forward(g, bind);
  const double raw = ev[p].item();
  const double dv = std::clamp(raw, kDiscClamp, 1.0 - kDiscClamp);
  if (grad) {
    *grad = Image(img.height, img.width, 3);
    if (raw == dv) {
      const auto gr = ad::backward(g, ev, p);
      const auto& gi = gr.at("image");
      for (std::size_t i = 0; i < grad->data.size(); ++i) grad->data[i] = -gi[i] / dv;
    }
  }
  return -std::log(dv);
}

struct DiscriminatorConfig {
  int steps = 1500;
  int batch = 16;
  double lr = 3e-3;
  int pool = 128;    // training images per class
  int heldout = 64;  // held-out images per class
  double fake_shift_min = 3.0;
  double fake_shift_max = 5.0;
  int channels = 8;
};

/// Render spec used for discriminator and adversarial renders.
inline RenderSpec gan_render_spec(const FieldBundle& b, int image_size = 16) {
  NFS_CHECK(image_size % b.dims.upsample_factor == 0, "GAN image size ", image_size,
            " is not a multiple of the upsample factor ", b.dims.upsample_factor);
  RenderSpec s;
  s.height = s.width = image_size / b.dims.upsample_factor;
  s.sampling.num_samples = 32;
  return s;
}

namespace detail {

// Real: mapped latents whose implied expression is resampled inside
// [-1, 1]^K. Fake: the same with every coordinate pushed outside, to
// magnitudes in [fake_shift_min, fake_shift_max].
inline std::vector<std::pair<Image, double>> disc_samples(const FieldBundle& b, const LatentProbe& probe,
                                                          const RenderSpec& spec, int per_class, Rng& rng,
                                                          const DiscriminatorConfig& c) {
  std::vector<std::pair<Image, double>> out;
  for (int i = 0; i < per_class; ++i) {
    const StyleLatent w = map_latent(b, sample_z(b.dims, rng));
    const Eigen::VectorXd natural = probe.beta(w);
    Eigen::VectorXd real(natural.size()), fake(natural.size());
    for (auto& v : real) v = rng.uniform(-1.0, 1.0);
    for (auto& v : fake) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(c.fake_shift_min, c.fake_shift_max);
    out.emplace_back(render_image(b, w + probe.to_latent() * (real - natural), spec), 1.0);
    out.emplace_back(render_image(b, w + probe.to_latent() * (fake - natural), spec), 0.0);
  }
  return out;
}

inline double disc_accuracy(const ToyDiscriminator& d, const std::vector<std::pair<Image, double>>& set) {
  int ok = 0;
  for (const auto& [img, label] : set) ok += (discriminate(d, img) >= 0.5) == (label > 0.5);
  return static_cast<double>(ok) / static_cast<double>(set.size());
}

}  // namespace detail

/// Trains D to tell renders of in-range latents from renders of latents whose
/// implied expression lies outside the augmentation range.
inline ToyDiscriminator train_toy_discriminator(const FieldBundle& b, const LatentProbe& probe, std::uint64_t seed,
                                                const DiscriminatorConfig& c = {}, int image_size = 16) {
  const RenderSpec spec = gan_render_spec(b, image_size);
  ToyDiscriminator d = init_discriminator(image_size, image_size, seed, c.channels);
  Rng rng(seed ^ 0xd15c);
  const auto train = detail::disc_samples(b, probe, spec, c.pool, rng, c);
  const auto held = detail::disc_samples(b, probe, spec, c.heldout, rng, c);

  ad::Graph g;
  const auto in = g.input("images", {static_cast<std::size_t>(c.batch), static_cast<std::size_t>(image_size * image_size * 3)});
  const auto y = g.input("labels", {static_cast<std::size_t>(c.batch), 1});
  const auto logit = detail::disc_graph(g, in, c.batch, d);
  // binary cross-entropy in softplus form
  const auto ones = g.constant(ad::Tensor({static_cast<std::size_t>(c.batch), 1}, 1.0));
  const auto loss = g.mean(g.add(g.mul(y, g.softplus(g.scale(logit, -1.0))), g.mul(g.sub(ones, y), g.softplus(logit))));
  ad::Adam adam({c.lr, 0.9, 0.999, 1e-8});
  for (int s = 0; s < c.steps; ++s) {
    std::vector<Image> imgs;
    ad::Tensor labels({static_cast<std::size_t>(c.batch), 1});
    for (int k = 0; k < c.batch; ++k) {
      const auto& [img, label] = train[rng.index(train.size())];
      imgs.push_back(img);
      labels[static_cast<std::size_t>(k)] = label;
    }
    ad::TensorMap bind = d.params;
    bind["images"] = detail::images_tensor(imgs);
    bind["labels"] = labels;
    const auto ev = ad::forward(g, bind);
    NFS_CHECK(std::isfinite(ev[loss].item()), "discriminator training diverged at step ", s);
    adam.step(d.params, ad::backward(g, ev, loss));
  }
  d.train_accuracy = detail::disc_accuracy(d, train);
  d.heldout_accuracy = detail::disc_accuracy(d, held);
  return d;
}

// ---------------------------------------------------------------------------
// Training objective

struct LossTerms {
  double ldm = 0, tdmm = 0, gan = 0, total = 0;
};

/// Batched L_ldm + L_3DMM (+ adversarial term) as a function of the
/// LipaintNet parameters. The rendered expression of w_exp is read through
/// the probe, turned into landmarks with the training identity, and passed
/// through the analytic estimator.
class LipaintObjective {
 public:
  LipaintObjective(const BlendshapeBasis& basis, const LatentProbe& probe, const LipaintParams& shape, int batch,
                   const LossWeights& weights)
      : batch_(batch), weights_(weights), est_(basis), params_shape_(shape) {
    weights.validate();
    NFS_CHECK(batch >= 1, "batch must be >= 1");
    NFS_CHECK(probe.k_exp() == basis.k_exp() && probe.mean.size() == shape.w_dim && shape.k_exp == basis.k_exp(),
              "probe, basis and LipaintNet dimensions disagree");
    const auto B = static_cast<std::size_t>(batch);
    const auto K = static_cast<std::size_t>(basis.k_exp()), Kid = static_cast<std::size_t>(basis.k_id());
    const auto D = static_cast<std::size_t>(shape.w_dim);
    const auto L3 = static_cast<std::size_t>(est_.design().rows());
    beta_t_ = g_.input("beta_t", {B, K});
    w_id_ = g_.input("w_id", {B, D});
    alpha_t_ = g_.input("alpha_t", {B, Kid});
    ldm_t_ = g_.input("ldm_t", {B, L3});
    gan_coef_ = g_.input("gan_coef", {B, D});
    w_exp_ = detail::lipaint_graph(g_, beta_t_, w_id_, shape);

    const auto mean = g_.broadcast(g_.constant(detail::matrix_tensor(probe.mean.transpose())), {B, D});
    const auto beta_impl = g_.matmul(g_.sub(w_exp_, mean), g_.constant(detail::matrix_tensor(Eigen::MatrixXd(probe.to_beta().transpose()))));
    const Eigen::MatrixXd design = est_.design();
    const auto dt_id = g_.constant(detail::matrix_tensor(design.leftCols(basis.k_id()).transpose()));
    const auto dt_exp = g_.constant(detail::matrix_tensor(design.rightCols(basis.k_exp()).transpose()));
    const auto observed = g_.add(g_.matmul(alpha_t_, dt_id), g_.matmul(beta_impl, dt_exp));
    const auto coeffs = g_.matmul(observed, g_.constant(detail::matrix_tensor(est_.pseudo_inverse().transpose())));
    const auto alpha_hat = g_.slice(coeffs, 1, 0, Kid);
    const auto beta_hat = g_.slice(coeffs, 1, Kid, Kid + K);
    const auto ldm_out = g_.matmul(coeffs, g_.constant(detail::matrix_tensor(design.transpose())));
    l_ldm_ = g_.scale(g_.sum(g_.square(g_.sub(ldm_out, ldm_t_))), 1.0 / static_cast<double>(B * (L3 / 3)));
    l_3dmm_ = g_.scale(g_.add(g_.sum(g_.square(g_.sub(beta_hat, beta_t_))), g_.sum(g_.square(g_.sub(alpha_hat, alpha_t_)))),
                       1.0 / static_cast<double>(B));
    gan_lin_ = g_.sum(g_.mul(gan_coef_, w_exp_));
    total_ = g_.add(g_.add(g_.scale(l_ldm_, weights.ldm), g_.scale(l_3dmm_, weights.tdmm)), g_.scale(gan_lin_, weights.gan));
  }

  int batch() const { return batch_; }
  const LossWeights& weights() const { return weights_; }

  /// Latents w_exp for a batch (rows).
  std::vector<StyleLatent> latents(const LipaintParams& p, const std::vector<TrainingExample>& ex) const {
    const auto ev = ad::forward(g_, bind(p, ex, nullptr));
    std::vector<StyleLatent> out;
    const auto& t = ev[w_exp_];
    for (std::size_t b = 0; b < ex.size(); ++b)
      out.push_back(Eigen::Map<const Eigen::VectorXd>(t.data() + b * t.cols(), static_cast<Eigen::Index>(t.cols())));
    return out;
  }

  /// Loss terms; `gan_grad` rows are d L_gan / d w_exp (already batch-averaged)
  /// and `gan_value` the batch-mean adversarial loss they belong to.
  LossTerms evaluate(const LipaintParams& p, const std::vector<TrainingExample>& ex, const Eigen::MatrixXd* gan_grad,
                     double gan_value, ad::TensorMap* grads) const {
    const auto ev = ad::forward(g_, bind(p, ex, gan_grad));
    LossTerms t;
    t.ldm = ev[l_ldm_].item();
    t.tdmm = ev[l_3dmm_].item();
    t.gan = gan_grad ? gan_value : 0.0;
    t.total = total_loss(t.ldm, t.tdmm, t.gan, weights_);
    if (grads) *grads = ad::backward(g_, ev, total_);
    return t;
  }

 private:
  ad::TensorMap bind(const LipaintParams& p, const std::vector<TrainingExample>& ex, const Eigen::MatrixXd* gan_grad) const {
    NFS_CHECK(static_cast<int>(ex.size()) == batch_, "objective built for batch ", batch_, ", got ", ex.size());
    NFS_CHECK(p.k_exp == params_shape_.k_exp && p.w_dim == params_shape_.w_dim && p.width == params_shape_.width &&
                  p.depth == params_shape_.depth,
              "LipaintNet shape differs from the objective's");
    ad::TensorMap m = p.tensors;
    std::vector<Eigen::VectorXd> bt, wi, at, lt;
    for (const auto& e : ex) {
      bt.push_back(e.beta_target);
      wi.push_back(e.w_id);
      at.push_back(e.alpha);
      lt.push_back(as_flat(e.ldm_target) - est_.mean());
    }
    m["beta_t"] = detail::rows_tensor(bt);
    m["w_id"] = detail::rows_tensor(wi);
    m["alpha_t"] = detail::rows_tensor(at);
    m["ldm_t"] = detail::rows_tensor(lt);
    m["gan_coef"] = gan_grad ? detail::matrix_tensor(*gan_grad)
                             : ad::Tensor({static_cast<std::size_t>(batch_), static_cast<std::size_t>(p.w_dim)});
    return m;
  }

  int batch_;
  LossWeights weights_;
  LandmarkEstimator est_;
  LipaintParams params_shape_;
  ad::Graph g_;
  ad::NodeId beta_t_, w_id_, alpha_t_, ldm_t_, gan_coef_, w_exp_, l_ldm_, l_3dmm_, gan_lin_, total_;
};

/// Batch-mean adversarial loss of G(w_exp) and its gradient rows with
/// respect to each w_exp.
inline double adversarial_loss(const FieldBundle& b, const ToyDiscriminator& d, const RenderSpec& spec,
                               const std::vector<StyleLatent>& ws, Eigen::MatrixXd* grad) {
  const double inv = 1.0 / static_cast<double>(ws.size());
  double total = 0;
  if (grad) grad->setZero(static_cast<Eigen::Index>(ws.size()), b.dims.w_dim);
  for (std::size_t k = 0; k < ws.size(); ++k) {
    const Image img = render_image(b, ws[k], spec);
    Image gimg;
    total += inv * loss_gan(d, img, grad ? &gimg : nullptr);
    if (grad) {
      for (auto& v : gimg.data) v *= inv;
      RenderGrad rg = RenderGrad::zeros(b);
      render_image_backward(b, ws[k], spec, nullptr, gimg, rg);
      grad->row(static_cast<Eigen::Index>(k)) = rg.w.transpose();
    }
  }
  return total;
}

// ---------------------------------------------------------------------------
// Training

struct LipaintConfig {
  int steps = 2000;
  int batch = 8;
  double lr = 1e-5;
  LossWeights weights;
  std::uint64_t seed = 1;
  int width = 128;
  int depth = 3;
  int heldout = 64;
  ExampleOptions examples;
  int gan_image_size = 16;
};

struct LipaintLogRow {
  int step = 0;
  LossTerms terms;
};

struct LipaintResult {
  LipaintParams params;
  std::vector<LipaintLogRow> log;
  double heldout_initial = 0;  // mean L_ldm + L_3DMM before training
  double heldout_final = 0;
};

/// Mean L_ldm + L_3DMM of `p` over a set of examples.
inline double heldout_loss(const BlendshapeBasis& basis, const LatentProbe& probe, const LipaintParams& p,
                           const std::vector<TrainingExample>& set) {
  LossWeights w{1.0, 1.0, 0.0};
  const LipaintObjective obj(basis, probe, p, static_cast<int>(set.size()), w);
  const auto t = obj.evaluate(p, set, nullptr, 0.0, nullptr);
  return t.ldm + t.tdmm;
}

inline std::vector<TrainingExample> example_batch(const FieldBundle& b, const BlendshapeBasis& basis, Rng& rng, int n,
                                                  const ExampleOptions& opts) {
  std::vector<TrainingExample> out;
  for (int k = 0; k < n; ++k) out.push_back(sample_training_example(b, basis, rng.next_u64(), opts));
  return out;
}

/// Adam on LipaintNet with the bundle, basis, probe and discriminator frozen.
/// `disc` may be null when the adversarial weight is zero.
inline LipaintResult train_lipaint(const FieldBundle& b, const BlendshapeBasis& basis, const LatentProbe& probe,
                                   const ToyDiscriminator* disc, const LipaintConfig& c) {
  c.weights.validate();
  NFS_CHECK(c.steps >= 0 && c.batch >= 1 && c.lr > 0, "invalid LipaintNet training config");
  NFS_CHECK(c.weights.gan == 0 || disc != nullptr, "adversarial weight is set but no discriminator was given");
  LipaintResult r;
  r.params = init_lipaint(probe, c.seed, c.width, c.depth);
  Rng held_rng(c.seed ^ 0x4e1d07ull);
  const auto held = example_batch(b, basis, held_rng, c.heldout, c.examples);
  r.heldout_initial = heldout_loss(basis, probe, r.params, held);

  const LipaintObjective obj(basis, probe, r.params, c.batch, c.weights);
  const RenderSpec spec = disc ? gan_render_spec(b, c.gan_image_size) : RenderSpec{};
  ad::Adam adam({c.lr, 0.9, 0.999, 1e-8});
  Rng rng(c.seed);
  for (int s = 0; s < c.steps; ++s) {
    const auto batch = example_batch(b, basis, rng, c.batch, c.examples);
    Eigen::MatrixXd gg;
    double gan = 0;
    const bool adversarial = c.weights.gan > 0;
    if (adversarial) gan = adversarial_loss(b, *disc, spec, obj.latents(r.params, batch), &gg);
    ad::TensorMap grads;
    const LossTerms t = obj.evaluate(r.params, batch, adversarial ? &gg : nullptr, gan, &grads);
    NFS_CHECK(std::isfinite(t.total), "LipaintNet training diverged at step ", s);
    r.log.push_back({s, t});
    adam.step(r.params.tensors, grads);
  }
  r.heldout_final = heldout_loss(basis, probe, r.params, held);
  return r;
}

}  // namespace nfs
