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

// Audio front end: WAV input, resampling, log-mel features and the mapping
// from mel windows to per-frame expression coefficients.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <fftw3.h>
#include <Eigen/Core>

#include "nfs/autodiff.hpp"
#include "nfs/core.hpp"
#include "nfs/face_model.hpp"

namespace nfs {

struct AudioClip {
  std::vector<double> samples;
  double sample_rate = 16000.0;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
  void validate() const {
    NFS_CHECK(!samples.empty(), "audio clip is empty");
    NFS_CHECK(sample_rate > 0, "sample rate must be positive, got ", sample_rate);
  }
};

// ---------------------------------------------------------------------------
// WAV

namespace detail {

inline std::uint16_t le16(const unsigned char* p) { return static_cast<std::uint16_t>(p[0] | (p[1] << 8)); }
inline std::uint32_t le32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

/// Reads PCM16 or float32 RIFF/WAVE; multichannel audio is averaged to mono.
inline AudioClip load_wav(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  NFS_CHECK(is, "cannot open WAV file \"", path, "\"");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  NFS_CHECK(bytes.size() >= 12, "malformed RIFF header in \"", path, "\": file too short");
  const std::string riff(bytes.begin(), bytes.begin() + 4), wave(bytes.begin() + 8, bytes.begin() + 12);
  NFS_CHECK(riff == "RIFF" && wave == "WAVE", "malformed RIFF header in \"", path, "\": chunk id \"", riff, "\"");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::string id(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.begin() + static_cast<std::ptrdiff_t>(pos + 4));
    const std::size_t size = detail::le32(&bytes[pos + 4]);
    const std::size_t body = pos + 8;
    NFS_CHECK(body + size <= bytes.size() || id == "data", "chunk \"", id, "\" runs past end of file");
    if (id == "fmt ") {
      NFS_CHECK(size >= 16, "chunk \"fmt \" too short (", size, " bytes)");
      format = detail::le16(&bytes[body]);
      channels = detail::le16(&bytes[body + 2]);
      rate = detail::le32(&bytes[body + 4]);
      bits = detail::le16(&bytes[body + 14]);
      if (format == 0xFFFE) {
        NFS_CHECK(size >= 40, "chunk \"fmt \" extensible header too short");
        format = detail::le16(&bytes[body + 24]);
      }
    } else if (id == "data") {
      data = &bytes[body];
      data_size = std::min(size, bytes.size() - body);
    }
    pos = body + size + (size & 1);
  }
  NFS_CHECK(channels > 0 && rate > 0, "missing or invalid chunk \"fmt \" in \"", path, "\"");
  NFS_CHECK(data != nullptr, "missing chunk \"data\" in \"", path, "\"");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) fail("unsupported codec in chunk \"fmt \": format ", format, ", ", bits, " bits");

  const std::size_t frame_bytes = static_cast<std::size_t>(channels) * (bits / 8);
  const std::size_t frames = data_size / frame_bytes;
  AudioClip clip;
  clip.sample_rate = rate;
  clip.samples.resize(frames);
  for (std::size_t f = 0; f < frames; ++f) {
    double acc = 0.0;
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* p = data + f * frame_bytes + c * (bits / 8);
      if (pcm16) {
        acc += static_cast<std::int16_t>(detail::le16(p)) / 32768.0;
      } else {
        const std::uint32_t u = detail::le32(p);
        float v;
        std::memcpy(&v, &u, 4);
        acc += v;
      }
    }
    clip.samples[f] = acc / channels;
  }
  return clip;
}

/// Writes mono PCM16 (values clamped to [-1, 1]).
inline void save_wav(const std::string& path, const AudioClip& clip) {
  std::ofstream os(path, std::ios::binary);
  NFS_CHECK(os, "cannot open \"", path, "\" for writing");
  const auto n = static_cast<std::uint32_t>(clip.samples.size());
  const auto rate = static_cast<std::uint32_t>(std::lround(clip.sample_rate));
  auto u16 = [&](std::uint16_t v) { os.put(static_cast<char>(v & 0xFF)).put(static_cast<char>(v >> 8)); };
  os.write("RIFF", 4);
  io::write_u32(os, 36 + 2 * n);
  os.write("WAVEfmt ", 8);
  io::write_u32(os, 16);
  u16(1);
  u16(1);
  io::write_u32(os, rate);
  io::write_u32(os, 2 * rate);
  u16(2);
  u16(16);
  os.write("data", 4);
  io::write_u32(os, 2 * n);
  for (double s : clip.samples) {
    const long q = std::lround(std::clamp(s, -1.0, 1.0) * 32767.0);
    u16(static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  NFS_CHECK(os.good(), "write failed for \"", path, "\"");
}

// ---------------------------------------------------------------------------
// Resampling

/// Hann-windowed sinc interpolation, 16 zero crossings each side, cutoff at
/// the lower Nyquist rate. Taps are renormalised so DC is preserved.
inline AudioClip resample(const AudioClip& clip, double target_rate) {
  clip.validate();
  NFS_CHECK(target_rate > 0, "target rate must be positive, got ", target_rate);
  if (target_rate == clip.sample_rate) return clip;
  const double ratio = target_rate / clip.sample_rate;
  const double cutoff = std::min(1.0, ratio);
  constexpr int kZeros = 16;
  const double half = kZeros / cutoff;
  const auto n_in = static_cast<long>(clip.samples.size());
  const auto n_out = static_cast<long>(std::llround(static_cast<double>(n_in) * ratio));
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(static_cast<std::size_t>(std::max(1L, n_out)));
  for (long i = 0; i < static_cast<long>(out.samples.size()); ++i) {
    const double t = static_cast<double>(i) / ratio;
    const long lo = static_cast<long>(std::ceil(t - half)), hi = static_cast<long>(std::floor(t + half));
    double acc = 0.0, norm = 0.0;
    for (long j = lo; j <= hi; ++j) {
      const double x = static_cast<double>(j) - t;
      const double arg = kPi * x * cutoff;
      const double s = std::abs(arg) < 1e-12 ? 1.0 : std::sin(arg) / arg;
      const double w = 0.5 + 0.5 * std::cos(kPi * x / half);
      const double k = s * w;
      const long jj = std::clamp(j, 0L, n_in - 1);
      acc += k * clip.samples[static_cast<std::size_t>(jj)];
      norm += k;
    }
    out.samples[static_cast<std::size_t>(i)] = acc / norm;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Mel spectrogram

struct MelConfig {
  double sample_rate = 16000.0;
  int n_fft = 800;
  int hop = 200;
  int n_mels = 80;
  double f_min = 0.0;
  double f_max = 8000.0;
  double log_floor = 1e-5;
};

struct MelSpectrogram {
  Eigen::MatrixXd frames;  // T_a x D, natural-log mel power
  double hop_seconds = 0.0;
  double window_seconds = 0.0;
  double log_floor = 1e-5;

  Eigen::Index num_frames() const { return frames.rows(); }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// Centre frequencies of the D triangular filters.
inline std::vector<double> mel_centers(const MelConfig& c) {
  std::vector<double> out(static_cast<std::size_t>(c.n_mels));
  const double lo = hz_to_mel(c.f_min), hi = hz_to_mel(c.f_max);
  for (int d = 0; d < c.n_mels; ++d) out[static_cast<std::size_t>(d)] = mel_to_hz(lo + (hi - lo) * (d + 1) / (c.n_mels + 1));
  return out;
}

/// D x (n_fft/2 + 1) triangular filters on the HTK mel scale, peak 1.
inline Eigen::MatrixXd mel_filterbank(const MelConfig& c) {
  const int bins = c.n_fft / 2 + 1;
  const double lo = hz_to_mel(c.f_min), hi = hz_to_mel(c.f_max);
  std::vector<double> edges(static_cast<std::size_t>(c.n_mels + 2));
  for (int i = 0; i < c.n_mels + 2; ++i) edges[static_cast<std::size_t>(i)] = mel_to_hz(lo + (hi - lo) * i / (c.n_mels + 1));
  Eigen::MatrixXd fb = Eigen::MatrixXd::Zero(c.n_mels, bins);
  for (int d = 0; d < c.n_mels; ++d) {
    const double left = edges[static_cast<std::size_t>(d)], mid = edges[static_cast<std::size_t>(d + 1)],
                 right = edges[static_cast<std::size_t>(d + 2)];
    for (int k = 0; k < bins; ++k) {
      const double f = k * c.sample_rate / c.n_fft;
      double v = 0.0;
      if (f > left && f <= mid) v = (f - left) / (mid - left);
      else if (f > mid && f < right) v = (right - f) / (right - mid);
      fb(d, k) = v;
    }
  }
  return fb;
}

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) w[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * kPi * i / n);
  return w;
}

namespace detail {

struct FftwPlan {
  int n;
  double* in;
  fftw_complex* out;
  fftw_plan plan;

  explicit FftwPlan(int size) : n(size) {
    in = fftw_alloc_real(static_cast<std::size_t>(n));
    out = fftw_alloc_complex(static_cast<std::size_t>(n / 2 + 1));
    plan = fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
  }
  ~FftwPlan() {
    fftw_destroy_plan(plan);
    fftw_free(in);
    fftw_free(out);
  }
  FftwPlan(const FftwPlan&) = delete;
  FftwPlan& operator=(const FftwPlan&) = delete;
};

}  // namespace detail

/// Power STFT (Hann, centred frames, reflection padding) -> mel filterbank ->
/// log(max(x, floor)).
inline MelSpectrogram mel_spectrogram(const AudioClip& clip, const MelConfig& c = {}) {
  clip.validate();
  NFS_CHECK(std::abs(clip.sample_rate - c.sample_rate) < 1e-9, "mel_spectrogram expects ", c.sample_rate,
            " Hz audio, got ", clip.sample_rate, " (resample first)");
  NFS_CHECK(c.n_fft >= 2 && c.hop >= 1 && c.n_mels >= 1, "invalid mel config");
  const auto n = static_cast<long>(clip.samples.size());
  NFS_CHECK(n >= c.n_fft, "clip of ", n, " samples is shorter than one window (", c.n_fft, ")");
  const long pad = c.n_fft / 2;
  const long frames = 1 + n / c.hop;
  const auto window = hann_window(c.n_fft);
  const Eigen::MatrixXd fb = mel_filterbank(c);
  const int bins = c.n_fft / 2 + 1;

  detail::FftwPlan fft(c.n_fft);
  Eigen::VectorXd power(bins);
  MelSpectrogram out;
  out.frames.resize(frames, c.n_mels);
  out.hop_seconds = c.hop / c.sample_rate;
  out.window_seconds = c.n_fft / c.sample_rate;
  out.log_floor = c.log_floor;
  const double log_floor = std::log(c.log_floor);
  for (long f = 0; f < frames; ++f) {
    for (int i = 0; i < c.n_fft; ++i) {
      long j = f * c.hop + i - pad;
      if (j < 0) j = -j;
      if (j >= n) j = 2 * (n - 1) - j;
      j = std::clamp(j, 0L, n - 1);
      fft.in[i] = clip.samples[static_cast<std::size_t>(j)] * window[static_cast<std::size_t>(i)];
    }
    fftw_execute(fft.plan);
    for (int k = 0; k < bins; ++k) power(k) = fft.out[k][0] * fft.out[k][0] + fft.out[k][1] * fft.out[k][1];
    const Eigen::VectorXd mel = fb * power;
    for (int d = 0; d < c.n_mels; ++d) out.frames(f, d) = mel(d) > c.log_floor ? std::log(mel(d)) : log_floor;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Audio to expression

enum class AudioBackend { kDeterministic, kLearned };

inline const char* backend_name(AudioBackend b) { return b == AudioBackend::kDeterministic ? "deterministic" : "learned"; }

inline AudioBackend parse_backend(const std::string& s) {
  if (s == "deterministic") return AudioBackend::kDeterministic;
  if (s == "learned") return AudioBackend::kLearned;
  fail("unknown audio backend \"", s, "\" (expected deterministic or learned)");
}

struct AudioConfig {
  MelConfig mel;
  int window_frames = 16;  // mel frames per video frame
  double fps = 25.0;
  double alpha_m = 0.5;
  double lambda_exp = 1.5;
  double beta_max = 1.0;
  AudioBackend backend = AudioBackend::kDeterministic;
};

/// Mean mel power of uniform white noise on [-1, 1]: sigma^2 * sum(w^2) per
/// FFT bin, summed by each filter and averaged over filters.
inline double reference_mel_power(const MelConfig& c) {
  const auto w = hann_window(c.n_fft);
  double w2 = 0.0;
  for (double v : w) w2 += v * v;
  return (1.0 / 3.0) * w2 * mel_filterbank(c).rowwise().sum().mean();
}

/// Log-RMS energy of a mel window relative to full-scale white noise. Floor
/// entries count as zero power, so a silent window gives -infinity.
inline double window_log_rms(const Eigen::MatrixXd& window, const MelConfig& c) {
  const double log_floor = std::log(c.log_floor);
  double e = 0.0;
  for (Eigen::Index i = 0; i < window.size(); ++i)
    if (window.data()[i] > log_floor) e += std::exp(window.data()[i]);
  e /= static_cast<double>(window.size());
  if (e <= 0.0) return -std::numeric_limits<double>::infinity();
  return 0.5 * std::log(e / reference_mel_power(c));
}

/// Affine map of log-RMS energy from [log floor, 0] onto [0, beta_max], clamped.
inline double jaw_from_energy(double log_rms, const AudioConfig& c) {
  const double lf = std::log(c.mel.log_floor);
  if (!(log_rms > lf)) return 0.0;
  return std::clamp(c.beta_max * (log_rms - lf) / (-lf), 0.0, c.beta_max);
}

/// Small learned regressor from mean log-mel features to the jaw coefficient.
struct AudioRegressor {
  ad::TensorMap params;
  int hidden = 32;

  bool trained() const { return !params.empty(); }
};

namespace detail {

inline ad::NodeId regressor_graph(ad::Graph& g, ad::NodeId x, std::size_t in, int hidden) {
  auto h = g.leaky_relu(g.linear(x, "audio.l0", in, static_cast<std::size_t>(hidden)));
  return g.linear(h, "audio.l1", static_cast<std::size_t>(hidden), 1);
}

// Per-bin mean log-mel, shifted by the floor and scaled to roughly unit range.
inline ad::Tensor regressor_features(const Eigen::MatrixXd& window, const MelConfig& c) {
  const double lf = std::log(c.log_floor);
  ad::Tensor t({1, static_cast<std::size_t>(window.cols())});
  for (Eigen::Index d = 0; d < window.cols(); ++d) t[static_cast<std::size_t>(d)] = (window.col(d).mean() - lf) / (-lf);
  return t;
}

}  // namespace detail

inline double regressor_jaw(const AudioRegressor& r, const Eigen::MatrixXd& window, const AudioConfig& c) {
  NFS_CHECK(r.trained(), "learned audio backend selected but no regressor weights were loaded");
  ad::Graph g;
  auto x = g.input("x", {1, static_cast<std::size_t>(window.cols())});
  auto y = detail::regressor_graph(g, x, static_cast<std::size_t>(window.cols()), r.hidden);
  ad::TensorMap b = r.params;
  b["x"] = detail::regressor_features(window, c.mel);
  return std::clamp(ad::forward(g, b)[y].item(), 0.0, c.beta_max);
}

/// Maps one mel window to beta_audio. Coefficients other than the jaw are
/// copied from `beta_basis`.
inline Eigen::VectorXd audio_to_expression(const Eigen::MatrixXd& mel_window, const Eigen::VectorXd& beta_basis,
                                           const AudioConfig& c, const AudioRegressor* regressor = nullptr) {
  NFS_CHECK(mel_window.rows() == c.window_frames, "mel window has ", mel_window.rows(), " frames, expected ",
            c.window_frames);
  NFS_CHECK(mel_window.cols() == c.mel.n_mels, "mel window has ", mel_window.cols(), " bins, expected ", c.mel.n_mels);
  NFS_CHECK(beta_basis.size() >= 1, "expression vector is empty");
  Eigen::VectorXd out = beta_basis;
  if (c.backend == AudioBackend::kDeterministic) {
    out(0) = jaw_from_energy(window_log_rms(mel_window, c.mel), c);
  } else {
    NFS_CHECK(regressor != nullptr && regressor->trained(),
              "learned audio backend selected but no regressor weights were loaded");
    out(0) = regressor_jaw(*regressor, mel_window, c);
  }
  return out;
}

/// (1 - alpha_m) * beta_init + alpha_m * beta_prev_audio.
inline Eigen::VectorXd momentum_blend(const Eigen::VectorXd& beta_init, const Eigen::VectorXd& beta_prev_audio,
                                      double alpha_m) {
  NFS_CHECK(alpha_m >= 0.0 && alpha_m <= 1.0, "alpha_m must lie in [0, 1], got ", alpha_m);
  NFS_CHECK(beta_init.size() == beta_prev_audio.size(), "momentum_blend size mismatch");
  if (alpha_m == 0.0) return beta_init;
  if (alpha_m == 1.0) return beta_prev_audio;
  return (1.0 - alpha_m) * beta_init + alpha_m * beta_prev_audio;
}

inline Eigen::VectorXd scale_expression(const Eigen::VectorXd& beta_audio, double lambda_exp) {
  NFS_CHECK(lambda_exp > 0.0, "lambda_exp must be positive, got ", lambda_exp);
  return lambda_exp * beta_audio;
}

/// Rows [c - W/2, c + W/2) around the frame nearest `seconds`, clamped at
/// the clip edges.
inline Eigen::MatrixXd mel_window_at(const MelSpectrogram& mel, double seconds, int width) {
  const auto centre = static_cast<long>(std::llround(seconds / mel.hop_seconds));
  Eigen::MatrixXd w(width, mel.frames.cols());
  for (int i = 0; i < width; ++i) {
    const long r = std::clamp(centre - width / 2 + i, 0L, static_cast<long>(mel.num_frames()) - 1);
    w.row(i) = mel.frames.row(r);
  }
  return w;
}

struct ExpressionTrack {
  Eigen::MatrixXd betas;      // T_f x K_exp, scaled (fed to the face model)
  Eigen::MatrixXd raw_betas;  // T_f x K_exp, before scaling
  std::vector<double> log_rms;
  double fps = 25.0;
  std::string backend;

  Eigen::Index num_frames() const { return betas.rows(); }
};

inline Eigen::Index frame_count(double seconds, double fps) {
  // small epsilon so that 8 s * 25 fps is not floored to 199 by rounding
  return static_cast<Eigen::Index>(std::floor(seconds * fps + 1e-9));
}

/// Per frame t: beta = momentum_blend(beta_init, beta_audio[t-1]),
/// beta_audio[t] = audio_to_expression(window(t), beta), output
/// scale_expression(beta_audio[t]). beta_audio[-1] = beta_init.
inline ExpressionTrack track_from_audio(const AudioClip& clip, const BlendshapeBasis& basis,
                                        const Eigen::VectorXd& beta_init, const AudioConfig& c,
                                        const AudioRegressor* regressor = nullptr) {
  NFS_CHECK(beta_init.size() == basis.k_exp(), "beta_init has ", beta_init.size(), " entries, basis has ",
            basis.k_exp());
  NFS_CHECK(c.fps > 0, "fps must be positive");
  const AudioClip audio = std::abs(clip.sample_rate - c.mel.sample_rate) < 1e-9 ? clip : resample(clip, c.mel.sample_rate);
  const Eigen::Index frames = frame_count(audio.duration(), c.fps);
  NFS_CHECK(frames >= 1, "audio of ", audio.duration(), " s is shorter than one video frame");
  const MelSpectrogram mel = mel_spectrogram(audio, c.mel);
  ExpressionTrack track;
  track.fps = c.fps;
  track.backend = backend_name(c.backend);
  track.betas.resize(frames, basis.k_exp());
  track.raw_betas.resize(frames, basis.k_exp());
  track.log_rms.resize(static_cast<std::size_t>(frames));
  Eigen::VectorXd prev = beta_init;
  for (Eigen::Index t = 0; t < frames; ++t) {
    const Eigen::MatrixXd window = mel_window_at(mel, static_cast<double>(t) / c.fps, c.window_frames);
    const Eigen::VectorXd beta = momentum_blend(beta_init, prev, c.alpha_m);
    const Eigen::VectorXd audio_beta = audio_to_expression(window, beta, c, regressor);
    track.raw_betas.row(t) = audio_beta.transpose();
    track.betas.row(t) = scale_expression(audio_beta, c.lambda_exp).transpose();
    track.log_rms[static_cast<std::size_t>(t)] = window_log_rms(window, c.mel);
    prev = audio_beta;
  }
  return track;
}

// ---------------------------------------------------------------------------
// Synthetic test signals and regressor training

inline AudioClip sine_clip(double freq, double seconds, double rate, double amplitude = 0.5) {
  AudioClip c;
  c.sample_rate = rate;
  c.samples.resize(static_cast<std::size_t>(std::llround(seconds * rate)));
  for (std::size_t i = 0; i < c.samples.size(); ++i) c.samples[i] = amplitude * std::sin(2.0 * kPi * freq * i / rate);
  return c;
}

/// White noise multiplied by a slow envelope in [floor, 1]; `envelope`
/// receives the per-sample gain.
inline AudioClip modulated_noise(double seconds, double rate, std::uint64_t seed, double mod_hz = 1.3,
                                 double floor = 0.02, std::vector<double>* envelope = nullptr) {
  Rng rng(seed);
  AudioClip c;
  c.sample_rate = rate;
  c.samples.resize(static_cast<std::size_t>(std::llround(seconds * rate)));
  if (envelope) envelope->resize(c.samples.size());
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    const double t = static_cast<double>(i) / rate;
    const double g = floor + (1.0 - floor) * 0.5 * (1.0 - std::cos(2.0 * kPi * mod_hz * t));
    if (envelope) (*envelope)[i] = g;
    c.samples[i] = g * rng.uniform(-1.0, 1.0);
  }
  return c;
}

/// Fits the learned backend to the deterministic jaw mapping on windows of
/// random-gain noise. Adam, mean squared error.
inline AudioRegressor train_audio_regressor(const AudioConfig& c, std::uint64_t seed, int steps = 400,
                                            int batch = 16) {
  Rng rng(seed);
  const auto d = static_cast<std::size_t>(c.mel.n_mels);
  AudioRegressor r;
  ad::Graph g;
  auto x = g.input("x", {static_cast<std::size_t>(batch), d});
  auto target = g.input("y", {static_cast<std::size_t>(batch), 1});
  auto pred = detail::regressor_graph(g, x, d, r.hidden);
  auto loss = g.mean(g.square(g.sub(pred, target)));
  for (auto id : g.parameters()) {
    const auto& n = g.node(id);
    ad::Tensor t(n.shape);
    const double bound = n.shape[0] > 1 ? 1.0 / std::sqrt(static_cast<double>(n.shape[0])) : 0.0;
    for (auto& v : t.values()) v = rng.uniform(-bound, bound);
    r.params[n.name] = t;
  }
  // a pool of noise windows with log-uniform gain
  const int pool = 64;
  std::vector<ad::Tensor> feats;
  std::vector<double> jaws;
  AudioConfig det = c;
  det.backend = AudioBackend::kDeterministic;
  for (int i = 0; i < pool; ++i) {
    const double gain = std::exp(rng.uniform(std::log(1e-4), 0.0));
    AudioClip clip;
    clip.sample_rate = c.mel.sample_rate;
    clip.samples.resize(static_cast<std::size_t>(c.mel.hop * (c.window_frames + 4)));
    for (auto& s : clip.samples) s = gain * rng.uniform(-1.0, 1.0);
    const auto mel = mel_spectrogram(clip, c.mel);
    const Eigen::MatrixXd w = mel.frames.middleRows(2, c.window_frames);
    feats.push_back(detail::regressor_features(w, c.mel));
    jaws.push_back(jaw_from_energy(window_log_rms(w, c.mel), det));
  }
  ad::Adam adam({1e-2, 0.9, 0.999, 1e-8});
  for (int s = 0; s < steps; ++s) {
    ad::Tensor xb({static_cast<std::size_t>(batch), d}), yb({static_cast<std::size_t>(batch), 1});
    for (int b = 0; b < batch; ++b) {
      const std::size_t k = rng.index(pool);
      std::copy(feats[k].values().begin(), feats[k].values().end(), xb.values().begin() + static_cast<long>(b * d));
      yb[static_cast<std::size_t>(b)] = jaws[k];
    }
    ad::TensorMap bind = r.params;
    bind["x"] = xb;
    bind["y"] = yb;
    const auto ev = ad::forward(g, bind);
    adam.step(r.params, ad::backward(g, ev, loss));
  }
  return r;
}

}  // namespace nfs
