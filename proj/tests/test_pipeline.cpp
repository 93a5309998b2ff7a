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
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "gtest/gtest.h"
#include "nfs/pipeline.hpp"
#include "test_util.hpp"

using namespace nfs;
namespace fs = std::filesystem;

namespace {

std::string read_file(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

std::string error_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

// Small enough to run a few sequences per test.
PipelineConfig tiny_config(const fs::path& out) {
  PipelineConfig c;
  c.output_dir = out.string();
  c.height = 24;
  c.width = 24;
  c.num_samples = 16;
  c.audio_seconds = 0.5;
  c.num_vertices = 300;
  c.k_id = 4;
  c.lipaint_steps = 10;
  c.discriminator_steps = 0;
  c.mask_window = 3;
  c.refine_steps = 50;
  return c;
}

const Assets& tiny_assets() {
  static const Assets a = prepare_assets(tiny_config("unused"));
  return a;
}

}  // namespace

TEST(Config, EmptyTextGivesDefaults) {
  const auto c = parse_config_text("");
  EXPECT_EQ(c.alpha_m, 0.5);
  EXPECT_EQ(c.lambda_exp, 1.5);
  EXPECT_EQ(c.mask_window, 7);
  EXPECT_EQ(serialize_config(c), serialize_config(PipelineConfig{}));
}

TEST(Config, ParsesValuesAndComments) {
  const auto c = parse_config_text("# header\n\nalpha_m = 0.25  # trailing\n  fps=30\nsynth_audio = silence\n"
                                   "symmetric_basis = true\nseed = 18446744073709551615\n");
  EXPECT_EQ(c.alpha_m, 0.25);
  EXPECT_EQ(c.fps, 30.0);
  EXPECT_EQ(c.synth_audio, "silence");
  EXPECT_TRUE(c.symmetric_basis);
  EXPECT_EQ(c.seed, 18446744073709551615ull);
}

TEST(Config, RangeErrorNamesKeyAndLine) {
  const auto msg = error_of([] { parse_config_text("fps = 25\nalpha_m = 2.0\n"); });
  EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
  EXPECT_NE(msg.find("alpha_m"), std::string::npos) << msg;
}

TEST(Config, TypeErrorNamesKeyAndLine) {
  const auto msg = error_of([] { parse_config_text("\n\nmask_window = seven\n"); });
  EXPECT_NE(msg.find("line 3"), std::string::npos) << msg;
  EXPECT_NE(msg.find("mask_window"), std::string::npos) << msg;
  EXPECT_THROW(parse_config_text("mask_window = 7.5"), Error);
  EXPECT_THROW(parse_config_text("dump_masks = yes"), Error);
  EXPECT_THROW(parse_config_text("fps = nan"), Error);
  EXPECT_THROW(parse_config_text("seed = -1"), Error);
}

TEST(Config, StructuralErrors) {
  EXPECT_NE(error_of([] { parse_config_text("bogus = 1"); }).find("unknown key"), std::string::npos);
  EXPECT_NE(error_of([] { parse_config_text("fps 25"); }).find("line 1"), std::string::npos);
  EXPECT_NE(error_of([] { parse_config_text("fps = 25\nfps = 30"); }).find("repeats"), std::string::npos);
  EXPECT_THROW(parse_config_text("t_near = 4\n"), Error);  // t_far must exceed it
  EXPECT_THROW(parse_config("/nonexistent/config.txt"), Error);
}

TEST(Config, SerializeParseRoundTrip) {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    PipelineConfig c;
    c.alpha_m = rng.uniform();
    c.lambda_exp = rng.uniform(0.1, 3.0);
    c.fps = rng.uniform(1, 60);
    c.yaw = rng.uniform(-1, 1);
    c.mask_feather = rng.uniform(0, 3);
    c.mask_window = 1 + static_cast<int>(rng.index(20));
    c.seed = rng.next_u64();
    c.dump_masks = rng.uniform() < 0.5;
    c.output_dir = "run " + std::to_string(trial);
    c.audio_backend = rng.uniform() < 0.5 ? "learned" : "deterministic";
    const auto text = serialize_config(c);
    const auto back = parse_config_text(text);
    EXPECT_EQ(serialize_config(back), text);
    EXPECT_EQ(back.alpha_m, c.alpha_m);
    EXPECT_EQ(back.yaw, c.yaw);
    EXPECT_EQ(back.seed, c.seed);
    EXPECT_EQ(back.output_dir, c.output_dir);
  }
}

TEST(Config, FileRoundTrip) {
  const auto dir = test::scratch_dir("config_file");
  PipelineConfig c;
  c.lambda_exp = 1.25;
  std::ofstream(dir / "c.txt") << serialize_config(c);
  EXPECT_EQ(parse_config((dir / "c.txt").string()).lambda_exp, 1.25);
}

TEST(FlipPose, NegatesYawOnly) {
  CameraPose p;
  EXPECT_EQ(flip_pose(p).yaw, 0.0);
  p.yaw = 0.3;
  p.pitch = 0.1;
  p.radius = 3.0;
  const auto f = flip_pose(p);
  EXPECT_EQ(f.yaw, -0.3);
  EXPECT_EQ(f.pitch, 0.1);
  EXPECT_EQ(f.radius, 3.0);
  EXPECT_EQ(f.fov_y, p.fov_y);
  EXPECT_EQ(flip_pose(f).yaw, p.yaw);
}

TEST(InternalDifference, IdenticalSequences) {
  std::vector<Image> a;
  Rng rng(1);
  for (int t = 0; t < 3; ++t) {
    Image img(6, 5, 3);
    for (auto& v : img.data) v = rng.uniform();
    a.push_back(img);
  }
  const auto d = internal_difference(a, a, false);
  EXPECT_EQ(d.psnr.mean, kPsnrCap);
  EXPECT_EQ(d.mad.mean, 0.0);
}

TEST(InternalDifference, GrayVersusBlackIsTheGrayLevel) {
  Image gray(4, 4, 3), black(4, 4, 3);
  std::fill(gray.data.begin(), gray.data.end(), 0.375);
  const auto d = internal_difference({gray, gray}, {black, black}, true);
  EXPECT_EQ(d.mad.mean, 0.375);
  EXPECT_EQ(d.mad.max, 0.375);
}

TEST(InternalDifference, MirrorsSecondSequenceAndFindsWorstFrame) {
  Image a(3, 4, 1), b(3, 4, 1);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) {
      a.at(i, j, 0) = 0.1 * j + 0.01 * i;
      b.at(i, 3 - j, 0) = a.at(i, j, 0);
    }
  EXPECT_EQ(internal_difference({a}, {b}, true).mad.mean, 0.0);
  EXPECT_GT(internal_difference({a}, {b}, false).mad.mean, 0.0);
  Image c = a;
  c.at(0, 0, 0) += 0.5;
  EXPECT_EQ(internal_difference({a, a, a}, {a, c, a}, false).worst_frame, 1u);
  EXPECT_THROW(internal_difference({a}, {a, a}, false), Error);
}

TEST(PoseTrack, ParsesAndChecksLength) {
  const auto dir = test::scratch_dir("pose_track");
  std::ofstream(dir / "p.txt") << "# yaw pitch\n0.1 0.0\n0.2, -0.1\n\n0.3 0.05\n";
  const auto poses = load_pose_track((dir / "p.txt").string(), CameraPose{}, 3);
  ASSERT_EQ(poses.size(), 3u);
  EXPECT_EQ(poses[1].yaw, 0.2);
  EXPECT_EQ(poses[1].pitch, -0.1);
  EXPECT_THROW(load_pose_track((dir / "p.txt").string(), CameraPose{}, 4), Error);
  std::ofstream(dir / "bad.txt") << "0.1\n";
  EXPECT_THROW(load_pose_track((dir / "bad.txt").string(), CameraPose{}, 1), Error);
}

TEST(Assets, SaveLoadRoundTrip) {
  const auto dir = test::scratch_dir("assets");
  save_assets(dir.string(), tiny_assets());
  const auto b = load_assets(dir.string());
  EXPECT_EQ(checksum(b.bundle), checksum(tiny_assets().bundle));
  EXPECT_EQ(b.w_id, tiny_assets().w_id);
  EXPECT_EQ(b.shape.coeffs.alpha, tiny_assets().shape.coeffs.alpha);
  EXPECT_EQ(b.shape.coeffs.beta, tiny_assets().shape.coeffs.beta);
  EXPECT_EQ(b.stats.refine_final_error, tiny_assets().stats.refine_final_error);
  EXPECT_LT(b.stats.refine_final_error, b.stats.refine_initial_error);
  EXPECT_THROW(load_assets((dir / "missing").string()), Error);
}

TEST(Pipeline, FrameCountAndOutputs) {
  const auto dir = test::scratch_dir("pipeline_count");
  auto c = tiny_config(dir);
  c.audio_seconds = 0.5;
  c.fps = 25;
  c.dump_masks = true;
  const auto r = run_pipeline(c, tiny_assets());
  ASSERT_EQ(r.frames.size(), 12u);  // floor(0.5 * 25)
  for (int t = 0; t < 12; ++t) EXPECT_TRUE(fs::exists(dir / frame_name(t)));
  for (const char* name : {"mask_00000.png", "mask_00011.png"})
    EXPECT_EQ(load_png((dir / name).string()).height, c.height);
  EXPECT_FALSE(fs::exists(dir / frame_name(12)));
  const auto frame = load_png((dir / frame_name(0)).string());
  EXPECT_EQ(frame.height, c.height * tiny_assets().bundle.dims.upsample_factor);
  EXPECT_TRUE(fs::exists(dir / "report.csv"));
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  const auto csv = read_file(dir / "report.csv");
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 13);
  for (const auto& f : r.frames) {
    EXPECT_TRUE(std::isfinite(f.mouth_opening) && std::isfinite(f.psnr_vs_rest) && std::isfinite(f.rms));
    EXPECT_GE(f.mask_area, 0.0);
  }

  auto t = c;
  t.output_dir = (dir / "trunc").string();
  t.frames = 5;
  const auto rt = run_pipeline(t, tiny_assets());
  EXPECT_EQ(rt.frames.size(), 5u);
  EXPECT_EQ(rt.audio_frames, 12u);
  EXPECT_EQ(read_file(dir / frame_name(4)), read_file(fs::path(t.output_dir) / frame_name(4)));
}

TEST(Pipeline, SilenceIsStaticAfterWarmUp) {
  const auto dir = test::scratch_dir("pipeline_silence");
  auto c = tiny_config(dir);
  c.synth_audio = "silence";
  c.audio_seconds = 0.4;  // 10 frames, window 3
  const auto r = run_pipeline(c, tiny_assets());
  EXPECT_FALSE(r.energy_correlation.has_value());
  const auto ref = read_file(dir / frame_name(c.mask_window));
  for (int t = c.mask_window; t < 10; ++t) EXPECT_EQ(read_file(dir / frame_name(t)), ref) << t;
}

TEST(Pipeline, DeterministicAcrossRuns) {
  const auto dir = test::scratch_dir("pipeline_det");
  auto a = tiny_config(dir / "a");
  auto b = tiny_config(dir / "b");
  a.frames = b.frames = 4;
  run_pipeline(a, prepare_assets(a));
  run_pipeline(b, prepare_assets(b));
  for (const auto* name : {"report.csv", "report.json"})
    EXPECT_EQ(read_file(dir / "a" / name), read_file(dir / "b" / name)) << name;
  for (int t = 0; t < 4; ++t) EXPECT_EQ(read_file(dir / "a" / frame_name(t)), read_file(dir / "b" / frame_name(t)));
}

TEST(Pipeline, MouthOpeningFollowsEnergy) {
  const auto dir = test::scratch_dir("pipeline_energy");
  auto c = tiny_config(dir);
  c.audio_seconds = 2.0;
  c.height = c.width = 16;
  c.num_samples = 4;
  const auto r = run_pipeline(c, prepare_assets(c));
  ASSERT_TRUE(r.energy_correlation.has_value());
  EXPECT_GT(*r.energy_correlation, 0.5);
}

TEST(Pipeline, StageErrorsNameStageAndFrameAndLeaveNoFrame) {
  const auto dir = test::scratch_dir("pipeline_error");
  Assets broken = tiny_assets();
  broken.w_id.resize(3);
  const auto msg = error_of([&] { run_pipeline(tiny_config(dir), broken); });
  EXPECT_NE(msg.find("stage render, frame 0"), std::string::npos) << msg;
  for (const auto& e : fs::directory_iterator(dir)) {
    const auto name = e.path().filename().string();
    EXPECT_EQ(name.find("frame_"), std::string::npos) << name;
  }
}

TEST(Pipeline, SymmetricSceneMirrorsItself) {
  const auto dir = test::scratch_dir("pipeline_symmetric");
  auto c = tiny_config(dir);
  c.symmetric_basis = c.symmetric_field = true;
  c.frames = 3;
  const auto a = prepare_assets(c);
  run_pipeline(c, a);
  std::vector<Image> seq;
  for (int t = 0; t < 3; ++t) seq.push_back(load_png((dir / frame_name(t)).string()));
  EXPECT_LT(internal_difference(seq, seq, true).mad.max, 1e-3);
}

TEST(Pipeline, InternalDifferenceHarnessWritesBothSequences) {
  const auto dir = test::scratch_dir("pipeline_iddiff");
  auto c = tiny_config(dir);
  c.symmetric_basis = true;
  c.yaw = 0.3;
  c.frames = 3;
  const auto r = run_internal_difference(c, prepare_assets(c));
  EXPECT_TRUE(fs::exists(dir / "input" / frame_name(2)));
  EXPECT_TRUE(fs::exists(dir / "flipped" / frame_name(2)));
  EXPECT_TRUE(fs::exists(dir / "iddiff.json"));
  EXPECT_EQ(r.deformed.mad.values.size(), 3u);
  EXPECT_GT(r.still.mad.mean, 0.0);  // the generator itself is not symmetric
  EXPECT_TRUE(std::isfinite(r.ratio));
}
