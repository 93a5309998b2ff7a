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

// End-to-end orchestration: configuration, asset preparation, the per-frame
// animation loop, reports and the flipped-pose internal-difference harness.

#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "nfs/audio.hpp"
#include "nfs/blending.hpp"
#include "nfs/core.hpp"
#include "nfs/deformation.hpp"
#include "nfs/face_model.hpp"
#include "nfs/field.hpp"
#include "nfs/image_io.hpp"
#include "nfs/inversion.hpp"
#include "nfs/lipaint.hpp"
#include "nfs/metrics.hpp"
#include "nfs/render.hpp"
#include "nfs/upsampler.hpp"

namespace nfs {

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
  // inputs and outputs
  std::string audio;                     // WAV file; empty selects synth_audio
  std::string synth_audio = "modulated"; // silence | modulated | sine
  double audio_seconds = 8.0;
  double audio_rate = 16000.0;
  std::uint64_t audio_seed = 7;
  std::string target_image;  // PNG to invert; empty uses a seeded golden latent
  std::string assets;        // directory written by `prepare`; empty prepares in memory
  std::string output_dir = "out";
  std::string pose_track;    // per-frame "yaw pitch" lines; empty holds the input pose

  // video and rendering
  double fps = 25.0;
  int height = 64;  // feature map; frames are upsampled by the bundle factor
  int width = 64;
  int num_samples = 32;
  double t_near = 0.5;
  double t_far = 3.5;
  int threads = 0;
  double yaw = 0.0;
  double pitch = 0.0;
  double camera_radius = 2.5;
  double fov_y = 0.9;

  // animation
  double alpha_m = 0.5;
  double lambda_exp = 1.5;
  int mask_window = 7;
  double mask_feather = 1.0;
  std::string audio_backend = "deterministic";
  int deform_k = 4;
  double deform_radius = 0.15;
  int frames = 0;  // > 0 truncates the sequence
  bool dump_masks = false;

  // preparation
  std::uint64_t seed = 0;
  std::uint64_t identity_seed = 1;
  int num_vertices = 600;
  int k_id = 8;
  int k_exp = 6;
  bool symmetric_basis = false;  // left-right symmetric face geometry
  bool symmetric_field = false;  // mirror-symmetric generator
  int lipaint_steps = 2000;
  int discriminator_steps = 1500;
  int projection_steps = 200;
  int tuning_steps = 100;
  int refine_steps = 500;
  double landmark_noise = 0.002;

  void validate(const std::map<std::string, int>& lines = {}) const;
  RenderSpec render_spec() const;
  CameraPose pose() const;
  AudioConfig audio_config() const;
};

namespace detail {

using ConfigRef = std::variant<std::string*, double*, int*, std::uint64_t*, bool*>;

template <typename Fn>
void for_each_key(PipelineConfig& c, Fn&& fn) {
  fn("audio", ConfigRef(&c.audio));
  fn("synth_audio", ConfigRef(&c.synth_audio));
  fn("audio_seconds", ConfigRef(&c.audio_seconds));
  fn("audio_rate", ConfigRef(&c.audio_rate));
  fn("audio_seed", ConfigRef(&c.audio_seed));
  fn("target_image", ConfigRef(&c.target_image));
  fn("assets", ConfigRef(&c.assets));
  fn("output_dir", ConfigRef(&c.output_dir));
  fn("pose_track", ConfigRef(&c.pose_track));
  fn("fps", ConfigRef(&c.fps));
  fn("height", ConfigRef(&c.height));
  fn("width", ConfigRef(&c.width));
  fn("num_samples", ConfigRef(&c.num_samples));
  fn("t_near", ConfigRef(&c.t_near));
  fn("t_far", ConfigRef(&c.t_far));
  fn("threads", ConfigRef(&c.threads));
  fn("yaw", ConfigRef(&c.yaw));
  fn("pitch", ConfigRef(&c.pitch));
  fn("camera_radius", ConfigRef(&c.camera_radius));
  fn("fov_y", ConfigRef(&c.fov_y));
  fn("alpha_m", ConfigRef(&c.alpha_m));
  fn("lambda_exp", ConfigRef(&c.lambda_exp));
  fn("mask_window", ConfigRef(&c.mask_window));
  fn("mask_feather", ConfigRef(&c.mask_feather));
  fn("audio_backend", ConfigRef(&c.audio_backend));
  fn("deform_k", ConfigRef(&c.deform_k));
  fn("deform_radius", ConfigRef(&c.deform_radius));
  fn("frames", ConfigRef(&c.frames));
  fn("dump_masks", ConfigRef(&c.dump_masks));
  fn("seed", ConfigRef(&c.seed));
  fn("identity_seed", ConfigRef(&c.identity_seed));
  fn("num_vertices", ConfigRef(&c.num_vertices));
  fn("k_id", ConfigRef(&c.k_id));
  fn("k_exp", ConfigRef(&c.k_exp));
  fn("symmetric_basis", ConfigRef(&c.symmetric_basis));
  fn("symmetric_field", ConfigRef(&c.symmetric_field));
  fn("lipaint_steps", ConfigRef(&c.lipaint_steps));
  fn("discriminator_steps", ConfigRef(&c.discriminator_steps));
  fn("projection_steps", ConfigRef(&c.projection_steps));
  fn("tuning_steps", ConfigRef(&c.tuning_steps));
  fn("refine_steps", ConfigRef(&c.refine_steps));
  fn("landmark_noise", ConfigRef(&c.landmark_noise));
}

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
  const auto* end = text.data() + text.size();
  const auto res = std::from_chars(text.data(), end, out);
  return res.ec == std::errc() && res.ptr == end;
}

inline const char* type_name(const ConfigRef& ref) {
  switch (ref.index()) {
    case 0: return "a string";
    case 1: return "a number";
    case 2: return "an integer";
    case 3: return "an unsigned 64-bit integer";
    default: return "true or false";
  }
}

inline bool assign(const ConfigRef& ref, std::string_view text) {
  return std::visit(
      [&](auto* p) -> bool {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>) {
          *p = std::string(text);
          return true;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (text == "true" || text == "1") return *p = true, true;
          if (text == "false" || text == "0") return *p = false, true;
          return false;
        } else if constexpr (std::is_same_v<T, double>) {
          double v = 0;
          if (!parse_number(text, v) || !std::isfinite(v)) return false;
          *p = v;
          return true;
        } else {
          T v{};
          if (!parse_number(text, v)) return false;
          *p = v;
          return true;
        }
      },
      ref);
}

inline std::string format_value(const ConfigRef& ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, std::string>) return *p;
        else if constexpr (std::is_same_v<T, bool>) return *p ? "true" : "false";
        else if constexpr (std::is_same_v<T, double>) return format_double(*p);
        else return std::to_string(*p);
      },
      ref);
}

}  // namespace detail

inline void PipelineConfig::validate(const std::map<std::string, int>& lines) const {
  auto need = [&](bool ok, const char* key, const auto&... msg) {
    if (ok) return;
    const auto it = lines.find(key);
    if (it != lines.end()) fail("line ", it->second, ": ", key, " ", msg...);
    fail(key, " ", msg...);
  };
  need(synth_audio == "silence" || synth_audio == "modulated" || synth_audio == "sine", "synth_audio",
       "must be silence, modulated or sine, got \"", synth_audio, "\"");
  need(audio_seconds > 0 && audio_seconds <= 600, "audio_seconds", "must lie in (0, 600], got ", audio_seconds);
  need(audio_rate >= 8000 && audio_rate <= 192000, "audio_rate", "must lie in [8000, 192000], got ", audio_rate);
  need(!output_dir.empty(), "output_dir", "must not be empty");
  need(fps > 0 && fps <= 120, "fps", "must lie in (0, 120], got ", fps);
  need(height >= 4 && height <= 1024, "height", "must lie in [4, 1024], got ", height);
  need(width >= 4 && width <= 1024, "width", "must lie in [4, 1024], got ", width);
  need(num_samples >= 2 && num_samples <= 1024, "num_samples", "must lie in [2, 1024], got ", num_samples);
  need(t_near >= 0, "t_near", "must be >= 0, got ", t_near);
  need(t_far > t_near, "t_far", "must exceed t_near (", t_near, "), got ", t_far);
  need(threads >= 0, "threads", "must be >= 0, got ", threads);
  need(std::abs(yaw) < kPi, "yaw", "must lie in (-pi, pi), got ", yaw);
  need(std::abs(pitch) < 0.5 * kPi, "pitch", "must lie in (-pi/2, pi/2), got ", pitch);
  need(camera_radius > 0, "camera_radius", "must be positive, got ", camera_radius);
  need(fov_y > 0 && fov_y < kPi, "fov_y", "must lie in (0, pi), got ", fov_y);
  need(alpha_m >= 0 && alpha_m <= 1, "alpha_m", "must lie in [0, 1], got ", alpha_m);
  need(lambda_exp > 0 && lambda_exp <= 10, "lambda_exp", "must lie in (0, 10], got ", lambda_exp);
  need(mask_window >= 1 && mask_window <= 1000, "mask_window", "must lie in [1, 1000], got ", mask_window);
  need(mask_feather >= 0 && mask_feather <= 50, "mask_feather", "must lie in [0, 50], got ", mask_feather);
  need(audio_backend == "deterministic" || audio_backend == "learned", "audio_backend",
       "must be deterministic or learned, got \"", audio_backend, "\"");
  need(deform_k >= 1 && deform_k <= 64, "deform_k", "must lie in [1, 64], got ", deform_k);
  need(deform_radius > 0, "deform_radius", "must be positive, got ", deform_radius);
  need(frames >= 0, "frames", "must be >= 0, got ", frames);
  need(num_vertices >= 100, "num_vertices", "must be >= 100, got ", num_vertices);
  need(k_id >= 1, "k_id", "must be >= 1, got ", k_id);
  need(k_exp >= 1, "k_exp", "must be >= 1, got ", k_exp);
  need(lipaint_steps >= 0, "lipaint_steps", "must be >= 0, got ", lipaint_steps);
  need(discriminator_steps >= 0, "discriminator_steps", "must be >= 0, got ", discriminator_steps);
  need(projection_steps >= 0, "projection_steps", "must be >= 0, got ", projection_steps);
  need(tuning_steps >= 0, "tuning_steps", "must be >= 0, got ", tuning_steps);
  need(refine_steps >= 0, "refine_steps", "must be >= 0, got ", refine_steps);
  need(landmark_noise >= 0, "landmark_noise", "must be >= 0, got ", landmark_noise);
}

inline CameraPose PipelineConfig::pose() const {
  CameraPose p;
  p.yaw = yaw;
  p.pitch = pitch;
  p.radius = camera_radius;
  p.fov_y = fov_y;
  return p;
}

inline RenderSpec PipelineConfig::render_spec() const {
  RenderSpec s;
  s.pose = pose();
  s.sampling.num_samples = num_samples;
  s.sampling.t_near = t_near;
  s.sampling.t_far = t_far;
  s.height = height;
  s.width = width;
  s.threads = threads;
  return s;
}

inline AudioConfig PipelineConfig::audio_config() const {
  AudioConfig a;
  a.fps = fps;
  a.alpha_m = alpha_m;
  a.lambda_exp = lambda_exp;
  a.backend = parse_backend(audio_backend);
  return a;
}

/// Flat `key = value` text; `#` starts a comment. Missing keys keep their
/// defaults; unknown keys, malformed values and out-of-range values are
/// errors that name the key and line.
inline PipelineConfig parse_config_text(const std::string& text) {
  PipelineConfig c;
  std::map<std::string, detail::ConfigRef> refs;
  detail::for_each_key(c, [&](const char* key, detail::ConfigRef ref) { refs.emplace(key, ref); });
  std::map<std::string, int> lines;
  std::istringstream is(text);
  std::string raw;
  for (int n = 1; std::getline(is, raw); ++n) {
    std::string_view line(raw);
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    NFS_CHECK(eq != std::string_view::npos, "line ", n, ": expected `key = value`, got \"", line, "\"");
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    const auto it = refs.find(key);
    NFS_CHECK(it != refs.end(), "line ", n, ": unknown key \"", key, "\"");
    NFS_CHECK(!lines.count(key), "line ", n, ": key \"", key, "\" repeats line ", lines[key]);
    NFS_CHECK(detail::assign(it->second, value), "line ", n, ": ", key, " expects ", detail::type_name(it->second),
              ", got \"", value, "\"");
    lines[key] = n;
  }
  c.validate(lines);
  return c;
}

inline PipelineConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  NFS_CHECK(is, "cannot open config \"", path, "\"");
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return parse_config_text(ss.str());
  } catch (const Error& e) {
    fail(path, ": ", e.what());
  }
}

/// Every key, one per line, in a form parse_config_text reads back exactly.
inline std::string serialize_config(const PipelineConfig& config) {
  PipelineConfig c = config;
  std::string out;
  detail::for_each_key(c, [&](const char* key, detail::ConfigRef ref) {
    const std::string v = detail::format_value(ref);
    NFS_CHECK(v.find('#') == std::string::npos && v.find('\n') == std::string::npos && detail::trim(v) == v, key,
              " value \"", v, "\" cannot be written to a config file");
    out += std::string(key) + " = " + v + "\n";
  });
  return out;
}

// ---------------------------------------------------------------------------
// Poses

inline CameraPose flip_pose(const CameraPose& pose) {
  CameraPose p = pose;
  p.yaw = -p.yaw;
  return p;
}

/// One pose per frame from "yaw pitch" lines (whitespace or comma separated,
/// `#` comments). Must cover at least `frames` frames.
inline std::vector<CameraPose> load_pose_track(const std::string& path, const CameraPose& base, std::size_t frames) {
  std::ifstream is(path);
  NFS_CHECK(is, "cannot open pose track \"", path, "\"");
  std::vector<CameraPose> out;
  std::string raw;
  for (int n = 1; std::getline(is, raw) && out.size() < frames; ++n) {
    if (const auto hash = raw.find('#'); hash != std::string::npos) raw.resize(hash);
    std::replace(raw.begin(), raw.end(), ',', ' ');
    std::istringstream ls(raw);
    std::string a, b, extra;
    if (!(ls >> a)) continue;
    NFS_CHECK(ls >> b && !(ls >> extra), path, ":", n, ": expected \"yaw pitch\"");
    CameraPose p = base;
    NFS_CHECK(detail::parse_number(a, p.yaw) && detail::parse_number(b, p.pitch), path, ":", n,
              ": yaw and pitch must be numbers");
    try {
      p.validate();
    } catch (const Error& e) {
      fail(path, ":", n, ": ", e.what());
    }
    out.push_back(p);
  }
  NFS_CHECK(out.size() == frames, "pose track \"", path, "\" has ", out.size(), " poses, the sequence needs ", frames);
  return out;
}

// ---------------------------------------------------------------------------
// Assets

struct PrepStats {
  double refine_initial_error = 0;
  double refine_final_error = 0;
  double lipaint_heldout_initial = 0;
  double lipaint_heldout_final = 0;
  double discriminator_heldout_accuracy = -1;  // -1: not trained
  double inversion_final_loss = -1;            // -1: golden latent, no inversion
};

/// Everything the animation loop needs besides the audio.
struct Assets {
  BlendshapeBasis basis;
  FieldBundle bundle;
  StyleLatent w_id;
  FittedShape shape;
  LipaintParams lipaint;
  PrepStats stats;
};

namespace detail {

template <typename Fn>
auto stage(const char* name, long frame, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const std::exception& e) {
    if (frame >= 0) fail("stage ", name, ", frame ", frame, ": ", e.what());
    fail("stage ", name, ": ", e.what());
  }
}

}  // namespace detail

/// Builds the face basis and generator, fixes the identity (golden latent or
/// inversion of `target_image`), refines shape coefficients against its
/// landmarks and trains the discriminator and LipaintNet.
inline Assets prepare_assets(const PipelineConfig& c, const std::function<void(const std::string&)>& log = {}) {
  c.validate();
  auto note = [&](const std::string& s) {
    if (log) log(s);
  };
  const Rng root(c.seed);
  Assets a;
  a.basis = detail::stage("basis", -1, [&] {
    return build_toy_basis(root.fork(1).next_u64(), static_cast<std::size_t>(c.num_vertices), c.k_id, c.k_exp,
                           c.symmetric_basis);
  });
  a.bundle = init_bundle(root.fork(2).next_u64());
  if (c.symmetric_field) make_mirror_symmetric(a.bundle);

  if (c.target_image.empty()) {
    Rng ir(c.identity_seed);
    a.w_id = map_latent(a.bundle, sample_z(a.bundle.dims, ir));
  } else {
    detail::stage("inversion", -1, [&] {
      const Image target = load_png(c.target_image);
      const int f = a.bundle.dims.upsample_factor;
      NFS_CHECK(target.height == c.height * f && target.width == c.width * f, "target image is ", target.height, "x",
                target.width, ", expected ", c.height * f, "x", c.width * f);
      note("inverting " + c.target_image);
      InversionConfig ic;
      ic.projection_steps = c.projection_steps;
      ic.tuning_steps = c.tuning_steps;
      auto r = invert(a.bundle, target, c.render_spec(), ic);
      a.bundle = std::move(r.tuned_bundle);
      a.w_id = std::move(r.w_inv);
      a.stats.inversion_final_loss = r.final_loss;
    });
  }

  const LatentProbe probe = fit_latent_probe(a.bundle, c.k_exp);

  detail::stage("refinement", -1, [&] {
    // Synthetic landmark detector: the identity's shape plus Gaussian noise.
    Rng sr = Rng(c.identity_seed).fork(3);
    FittedShape truth;
    truth.coeffs.alpha = Eigen::VectorXd::NullaryExpr(c.k_id, [&] { return 0.5 * sr.normal(); });
    truth.coeffs.beta = probe.beta(a.w_id).cwiseMax(-1.0).cwiseMin(1.0);
    Points3 target = posed_landmarks(a.basis, truth);
    for (Eigen::Index i = 0; i < target.size(); ++i) target.data()[i] += c.landmark_noise * sr.normal();
    FittedShape init;
    init.coeffs = ShapeCoeffs::zeros(c.k_id, c.k_exp);
    auto r = refine_coefficients(a.basis, init, target, c.refine_steps);
    a.shape = r.shape;
    a.stats.refine_initial_error = r.errors.front();
    a.stats.refine_final_error = r.final_error;
  });

  std::optional<ToyDiscriminator> disc;
  if (c.discriminator_steps > 0) {
    note("training discriminator");
    disc = detail::stage("discriminator", -1, [&] {
      DiscriminatorConfig dc;
      dc.steps = c.discriminator_steps;
      return train_toy_discriminator(a.bundle, probe, root.fork(4).next_u64(), dc);
    });
    a.stats.discriminator_heldout_accuracy = disc->heldout_accuracy;
  }

  note("training LipaintNet");
  detail::stage("lipaint", -1, [&] {
    LipaintConfig lc;
    lc.steps = c.lipaint_steps;
    lc.seed = root.fork(5).next_u64();
    if (!disc) lc.weights.gan = 0.0;
    auto r = train_lipaint(a.bundle, a.basis, probe, disc ? &*disc : nullptr, lc);
    a.lipaint = std::move(r.params);
    a.stats.lipaint_heldout_initial = r.heldout_initial;
    a.stats.lipaint_heldout_final = r.heldout_final;
  });
  return a;
}

inline void save_assets(const std::string& dir, const Assets& a) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_basis((fs::path(dir) / "basis.nfsb").string(), a.basis);
  save_bundle((fs::path(dir) / "bundle.nfsp").string(), a.bundle);
  save_lipaint((fs::path(dir) / "lipaint.nfsp").string(), a.lipaint);
  auto vec = [](const Eigen::VectorXd& v) {
    return ad::Tensor({static_cast<std::size_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
  };
  const auto& s = a.stats;
  ad::TensorMap t;
  t["identity.w"] = vec(a.w_id);
  t["identity.alpha"] = vec(a.shape.coeffs.alpha);
  t["identity.beta"] = vec(a.shape.coeffs.beta);
  t["identity.pose"] = ad::Tensor({2}, {a.shape.yaw, a.shape.pitch});
  t["identity.stats"] = ad::Tensor({6}, {s.refine_initial_error, s.refine_final_error, s.lipaint_heldout_initial,
                                         s.lipaint_heldout_final, s.discriminator_heldout_accuracy,
                                         s.inversion_final_loss});
  ad::save_checkpoint((fs::path(dir) / "identity.nfsp").string(), t);
}

inline Assets load_assets(const std::string& dir) {
  namespace fs = std::filesystem;
  NFS_CHECK(fs::is_directory(dir), "assets directory \"", dir, "\" does not exist");
  Assets a;
  a.basis = load_basis((fs::path(dir) / "basis.nfsb").string());
  a.bundle = load_bundle((fs::path(dir) / "bundle.nfsp").string());
  a.lipaint = load_lipaint((fs::path(dir) / "lipaint.nfsp").string());
  const auto t = ad::load_checkpoint((fs::path(dir) / "identity.nfsp").string());
  auto get = [&](const char* name, std::size_t n) {
    const auto it = t.find(name);
    NFS_CHECK(it != t.end(), "identity checkpoint is missing \"", name, "\"");
    NFS_CHECK(it->second.size() == n, "\"", name, "\" has ", it->second.size(), " values, expected ", n);
    const auto& v = it->second.values();
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  a.w_id = get("identity.w", static_cast<std::size_t>(a.bundle.dims.w_dim));
  a.shape.coeffs.alpha = get("identity.alpha", static_cast<std::size_t>(a.basis.k_id()));
  a.shape.coeffs.beta = get("identity.beta", static_cast<std::size_t>(a.basis.k_exp()));
  const auto pose = get("identity.pose", 2);
  a.shape.yaw = pose(0);
  a.shape.pitch = pose(1);
  const auto s = get("identity.stats", 6);
  a.stats = {s(0), s(1), s(2), s(3), s(4), s(5)};
  NFS_CHECK(a.lipaint.k_exp == a.basis.k_exp() && a.lipaint.w_dim == a.bundle.dims.w_dim,
            "LipaintNet dimensions do not match the basis and bundle in \"", dir, "\"");
  return a;
}

/// Loads `config.assets` when set, otherwise prepares from the seeds.
inline Assets obtain_assets(const PipelineConfig& c, const std::function<void(const std::string&)>& log = {}) {
  return c.assets.empty() ? prepare_assets(c, log) : load_assets(c.assets);
}

// ---------------------------------------------------------------------------
// Animation

struct FrameRecord {
  int index = 0;
  double yaw = 0, pitch = 0;
  double jaw = 0;            // scaled jaw coefficient fed to the face model
  double mouth_opening = 0;  // lip landmark distance of the audio shape
  double rms = 0;            // audio RMS envelope at the frame
  double mask_area = 0;      // mean of the averaged mask
  double psnr_vs_rest = 0;   // against the undeformed render at the same pose
};

struct RunReport {
  std::vector<FrameRecord> frames;
  std::vector<double> seconds;  // wall time per frame; kept out of report files
  std::optional<double> energy_correlation;
  std::string backend;
  std::size_t audio_frames = 0;  // frames the audio supports before truncation
  PrepStats prep;

  std::vector<double> column(double FrameRecord::*m) const {
    std::vector<double> v;
    for (const auto& f : frames) v.push_back(f.*m);
    return v;
  }
};

inline AudioClip pipeline_audio(const PipelineConfig& c) {
  if (!c.audio.empty()) return load_wav(c.audio);
  if (c.synth_audio == "modulated") return modulated_noise(c.audio_seconds, c.audio_rate, c.audio_seed);
  if (c.synth_audio == "sine") return sine_clip(220.0, c.audio_seconds, c.audio_rate);
  AudioClip clip;
  clip.sample_rate = c.audio_rate;
  clip.samples.assign(static_cast<std::size_t>(std::llround(c.audio_seconds * c.audio_rate)), 0.0);
  return clip;
}

inline std::string frame_name(int t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%05d.png", t);
  return buf;
}

inline std::string report_csv(const RunReport& r) {
  std::string out = "frame,yaw,pitch,jaw,mouth_opening,rms,mask_area,psnr_vs_rest\n";
  for (const auto& f : r.frames)
    out += std::to_string(f.index) + "," + format_double(f.yaw) + "," + format_double(f.pitch) + "," +
           format_double(f.jaw) + "," + format_double(f.mouth_opening) + "," + format_double(f.rms) + "," +
           format_double(f.mask_area) + "," + format_double(f.psnr_vs_rest) + "\n";
  return out;
}

inline nlohmann::json metric_json(const MetricReport& m) {
  return {{"name", m.name}, {"mean", m.mean}, {"min", m.min}, {"max", m.max}};
}

/// Run summary. Paths and timings are left out so that identical configs
/// written to different directories give identical files.
inline std::string report_json(const RunReport& r, const PipelineConfig& c) {
  nlohmann::json j;
  j["frames"] = r.frames.size();
  j["audio_frames"] = r.audio_frames;
  j["fps"] = c.fps;
  j["backend"] = r.backend;
  j["alpha_m"] = c.alpha_m;
  j["lambda_exp"] = c.lambda_exp;
  j["mask_window"] = c.mask_window;
  j["seed"] = c.seed;
  j["identity_seed"] = c.identity_seed;
  j["metrics"] = nlohmann::json::array();
  if (!r.frames.empty()) {
    j["metrics"].push_back(metric_json(summarize("mouth_opening", r.column(&FrameRecord::mouth_opening))));
    j["metrics"].push_back(metric_json(summarize("rms", r.column(&FrameRecord::rms))));
    j["metrics"].push_back(metric_json(summarize("mask_area", r.column(&FrameRecord::mask_area))));
    j["metrics"].push_back(metric_json(summarize("psnr_vs_rest", r.column(&FrameRecord::psnr_vs_rest))));
  }
  j["energy_correlation"] = r.energy_correlation ? nlohmann::json(*r.energy_correlation) : nlohmann::json(nullptr);
  const auto& p = r.prep;
  j["preparation"] = {{"refine_initial_error", p.refine_initial_error},
                      {"refine_final_error", p.refine_final_error},
                      {"lipaint_heldout_initial", p.lipaint_heldout_initial},
                      {"lipaint_heldout_final", p.lipaint_heldout_final},
                      {"discriminator_heldout_accuracy", p.discriminator_heldout_accuracy},
                      {"inversion_final_loss", p.inversion_final_loss}};
  return j.dump(2) + "\n";
}

inline void write_text_atomically(const std::filesystem::path& path, const std::string& text) {
  detail::write_atomically(path, [&](const std::filesystem::path& tmp) {
    std::ofstream os(tmp, std::ios::binary);
    NFS_CHECK(os, "cannot open \"", tmp.string(), "\" for writing");
    os << text;
    NFS_CHECK(os.good(), "write failed for \"", tmp.string(), "\"");
  });
}

/// Per frame: audio expression, vertex displacement, deformed render,
/// LipaintNet mouth latent and render, mask averaging, blending and
/// composition. Writes frame_%05d.png (plus mask_%05d.png with dump_masks),
/// report.csv, report.json and timings.csv under `config.output_dir`.
inline RunReport run_pipeline(const PipelineConfig& c, const Assets& a,
                              const std::function<void(int, int)>& progress = {}) {
  namespace fs = std::filesystem;
  c.validate();
  const fs::path out(c.output_dir);
  fs::create_directories(out);
  const BlendshapeBasis& basis = a.basis;
  const Eigen::VectorXd& alpha = a.shape.coeffs.alpha;
  const Eigen::VectorXd& beta_init = a.shape.coeffs.beta;
  NFS_CHECK(alpha.size() == basis.k_id() && beta_init.size() == basis.k_exp(), "assets are inconsistent");

  const AudioConfig ac = c.audio_config();
  std::optional<AudioRegressor> regressor;
  if (ac.backend == AudioBackend::kLearned)
    regressor = detail::stage("audio", -1, [&] { return train_audio_regressor(ac, Rng(c.seed).fork(6).next_u64()); });
  const ExpressionTrack track = detail::stage("audio", -1, [&] {
    return track_from_audio(pipeline_audio(c), basis, beta_init, ac, regressor ? &*regressor : nullptr);
  });

  RunReport report;
  report.backend = track.backend;
  report.prep = a.stats;
  report.audio_frames = static_cast<std::size_t>(track.num_frames());
  const int frames = c.frames > 0 ? std::min<int>(c.frames, static_cast<int>(track.num_frames()))
                                  : static_cast<int>(track.num_frames());
  const std::vector<CameraPose> poses =
      c.pose_track.empty() ? std::vector<CameraPose>(static_cast<std::size_t>(frames), c.pose())
                           : load_pose_track(c.pose_track, c.pose(), static_cast<std::size_t>(frames));

  const VertexSet v_init = evaluate_shape(basis, {alpha, beta_init});
  const VertexBinding binding =
      detail::stage("binding", -1, [&] { return bind_face(v_init, basis.bbox, c.height, c.width); });
  MaskHistory history(static_cast<std::size_t>(c.mask_window));
  std::vector<std::pair<CameraPose, Image>> rest_cache;

  for (int t = 0; t < frames; ++t) {
    const auto start = std::chrono::steady_clock::now();
    RenderSpec spec = c.render_spec();
    spec.pose = poses[static_cast<std::size_t>(t)];
    const Eigen::VectorXd beta_t = track.betas.row(t).transpose();

    const VertexSet v_audio = evaluate_shape(basis, {alpha, beta_t});
    const DisplacementField deform = detail::stage("deformation", t, [&] {
      return build_displacement_field(binding, vertex_displacement(v_init, v_audio), c.deform_k, c.deform_radius);
    });
    const FeatureMap phi_d =
        detail::stage("render", t, [&] { return render_feature_map(a.bundle, a.w_id, spec, &deform); });
    const StyleLatent w_exp = detail::stage("lipaint", t, [&] { return infer_mouth_latent(a.lipaint, beta_t, a.w_id); });
    const FeatureMap phi_exp =
        detail::stage("mouth render", t, [&] { return render_feature_map(a.bundle, w_exp, spec, &deform); });

    const MouthMask mask = detail::stage("mask", t, [&] {
      const Points3 field = scale_to_field(v_audio, basis.bbox);
      Points3 mouth(static_cast<Eigen::Index>(basis.mouth_indices.size()), 3);
      for (std::size_t k = 0; k < basis.mouth_indices.size(); ++k)
        mouth.row(static_cast<Eigen::Index>(k)) = field.row(basis.mouth_indices[k]);
      MouthMask raw = project_mouth_mask(mouth, spec.pose, c.height, c.width, c.mask_feather);
      // the current mask joins the history only after it has been used
      MouthMask used = history.empty() ? raw : average_mask(history);
      history.push(std::move(raw));
      return used;
    });
    const Image frame = detail::stage("compose", t, [&] {
      return compose_final(a.bundle, blend(phi_d, phi_exp, mask), a.w_id);
    });
    detail::stage("write", t, [&] {
      save_png((out / frame_name(t)).string(), frame);
      if (c.dump_masks) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "mask_%05d.png", t);
        save_png((out / buf).string(), mask.to_image());
      }
    });

    auto cached = std::find_if(rest_cache.begin(), rest_cache.end(), [&](const auto& e) {
      return e.first.yaw == spec.pose.yaw && e.first.pitch == spec.pose.pitch;
    });
    if (cached == rest_cache.end()) {
      rest_cache.emplace_back(spec.pose, detail::stage("render", t, [&] { return render_image(a.bundle, a.w_id, spec); }));
      cached = std::prev(rest_cache.end());
    }

    FrameRecord rec;
    rec.index = t;
    rec.yaw = spec.pose.yaw;
    rec.pitch = spec.pose.pitch;
    rec.jaw = beta_t(0);
    rec.mouth_opening = mouth_opening(beta_t, basis, alpha);
    rec.rms = std::exp(track.log_rms[static_cast<std::size_t>(t)]);
    double area = 0;
    for (double m : mask.values) area += m;
    rec.mask_area = area / static_cast<double>(mask.values.size());
    rec.psnr_vs_rest = psnr(frame, cached->second);
    report.frames.push_back(rec);
    report.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
    if (progress) progress(t + 1, frames);
  }

  if (frames >= 3) {
    try {
      report.energy_correlation =
          envelope_correlation(report.column(&FrameRecord::mouth_opening), report.column(&FrameRecord::rms));
    } catch (const Error&) {
      // constant series (silence): no correlation to report
    }
  }

  write_text_atomically(out / "report.csv", report_csv(report));
  write_text_atomically(out / "report.json", report_json(report, c));
  std::string timings = "frame,seconds\n";
  for (std::size_t t = 0; t < report.seconds.size(); ++t)
    timings += std::to_string(t) + "," + format_double(report.seconds[t]) + "\n";
  write_text_atomically(out / "timings.csv", timings);
  return report;
}

// ---------------------------------------------------------------------------
// Internal differences

struct InternalDelta {
  MetricReport psnr;
  MetricReport mad;
  std::size_t worst_frame = 0;  // largest MAD
};

/// Per-frame PSNR and MAD between two sequences, optionally mirroring the
/// second one horizontally first.
class InternalDifference {
 public:
  void add(const Image& a, const Image& b, bool mirror_b) {
    const Image m = mirror_b ? mirror_horizontal(b) : b;
    check_same_shape(a, m, "internal_difference");
    psnr_.push_back(psnr(a, m));
    mad_.push_back(mad(a, m));
  }

  std::size_t size() const { return mad_.size(); }

  InternalDelta result() const {
    NFS_CHECK(!mad_.empty(), "internal_difference needs at least one frame");
    InternalDelta d{summarize("psnr", psnr_), summarize("mad", mad_), 0};
    d.worst_frame = static_cast<std::size_t>(std::max_element(mad_.begin(), mad_.end()) - mad_.begin());
    return d;
  }

 private:
  std::vector<double> psnr_, mad_;
};

inline InternalDelta internal_difference(const std::vector<Image>& frames_a, const std::vector<Image>& frames_b,
                                         bool mirror_b) {
  NFS_CHECK(frames_a.size() == frames_b.size(), "internal_difference: sequences have ", frames_a.size(), " and ",
            frames_b.size(), " frames");
  InternalDifference acc;
  for (std::size_t t = 0; t < frames_a.size(); ++t) acc.add(frames_a[t], frames_b[t], mirror_b);
  return acc.result();
}

struct IdReport {
  InternalDelta deformed;  // animated sequence at the input pose vs the flipped pose
  InternalDelta still;     // undeformed render at both poses
  double ratio = 0;        // deformed MAD / static MAD (infinite when static MAD is 0)
};

/// Runs the animation at the configured pose and at its mirror (into
/// `output_dir`/input and `output_dir`/flipped), then compares the emitted
/// frames after mirroring the flipped sequence. The same comparison for the
/// undeformed identity renders gives the static baseline.
inline IdReport run_internal_difference(const PipelineConfig& c, const Assets& a,
                                        const std::function<void(int, int)>& progress = {}) {
  namespace fs = std::filesystem;
  const fs::path root(c.output_dir);
  PipelineConfig in = c, flipped = c;
  in.output_dir = (root / "input").string();
  flipped.output_dir = (root / "flipped").string();
  flipped.yaw = -c.yaw;
  NFS_CHECK(c.pose_track.empty(), "the internal-difference harness uses the configured pose, not a pose track");
  const auto ra = run_pipeline(in, a, progress);
  run_pipeline(flipped, a, progress);

  IdReport r;
  InternalDifference deformed;
  for (std::size_t t = 0; t < ra.frames.size(); ++t)
    deformed.add(load_png((fs::path(in.output_dir) / frame_name(static_cast<int>(t))).string()),
                 load_png((fs::path(flipped.output_dir) / frame_name(static_cast<int>(t))).string()), true);
  r.deformed = deformed.result();

  // static renders go through the same 8-bit quantisation as the frames
  RenderSpec spec = c.render_spec();
  const auto still_a = (root / "static_input.png").string();
  const auto still_b = (root / "static_flipped.png").string();
  save_png(still_a, render_image(a.bundle, a.w_id, spec));
  spec.pose = flip_pose(spec.pose);
  save_png(still_b, render_image(a.bundle, a.w_id, spec));
  InternalDifference still;
  still.add(load_png(still_a), load_png(still_b), true);
  r.still = still.result();
  r.ratio = r.still.mad.mean > 0 ? r.deformed.mad.mean / r.still.mad.mean
                                 : (r.deformed.mad.mean > 0 ? std::numeric_limits<double>::infinity() : 0.0);

  nlohmann::json j;
  auto delta = [](const InternalDelta& d) {
    return nlohmann::json{{"psnr", metric_json(d.psnr)}, {"mad", metric_json(d.mad)}, {"worst_frame", d.worst_frame}};
  };
  j["yaw"] = c.yaw;
  j["deformed"] = delta(r.deformed);
  j["static"] = delta(r.still);
  j["mad_ratio"] = std::isfinite(r.ratio) ? nlohmann::json(r.ratio) : nlohmann::json(nullptr);
  write_text_atomically(root / "iddiff.json", j.dump(2) + "\n");
  return r;
}

}  // namespace nfs
