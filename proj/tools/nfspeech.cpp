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

// nfspeech: prepare assets, animate from audio, measure flipped-pose
// differences and run the built-in invariant checks.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "nfs/checks.hpp"
#include "nfs/pipeline.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::optional<int> frames;
  bool dump_masks = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool animation_flags) {
  cmd->add_option("--config", f.config, "Config file (key = value lines)")->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "Output directory (overrides output_dir)");
  cmd->add_option("--seed", f.seed, "Master seed (overrides seed)");
  if (animation_flags) {
    cmd->add_option("--frames", f.frames, "Emit at most this many frames")->check(CLI::PositiveNumber);
    cmd->add_flag("--dump-masks", f.dump_masks, "Also write the averaged mouth masks");
  }
}

nfs::PipelineConfig load(const CommonFlags& f) {
  nfs::PipelineConfig c = f.config.empty() ? nfs::PipelineConfig{} : nfs::parse_config(f.config);
  if (!f.out.empty()) c.output_dir = f.out;
  if (f.seed) c.seed = *f.seed;
  if (f.frames) c.frames = *f.frames;
  if (f.dump_masks) c.dump_masks = true;
  c.validate();
  return c;
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

void progress(int done, int total) {
  if (done == total || done % 25 == 0) std::cerr << "frame " << done << "/" << total << "\n";
}

int prepare(const CommonFlags& f) {
  const auto c = load(f);
  const auto a = nfs::prepare_assets(c, log_line);
  nfs::save_assets(c.output_dir, a);
  nfs::write_text_atomically(std::filesystem::path(c.output_dir) / "config.txt", nfs::serialize_config(c));
  std::printf("assets written to %s\n", c.output_dir.c_str());
  std::printf("refinement error %.6g -> %.6g\n", a.stats.refine_initial_error, a.stats.refine_final_error);
  std::printf("LipaintNet held-out loss %.6g -> %.6g\n", a.stats.lipaint_heldout_initial,
              a.stats.lipaint_heldout_final);
  if (a.stats.discriminator_heldout_accuracy >= 0)
    std::printf("discriminator held-out accuracy %.3f\n", a.stats.discriminator_heldout_accuracy);
  if (a.stats.inversion_final_loss >= 0) std::printf("inversion final MSE %.6g\n", a.stats.inversion_final_loss);
  return 0;
}

int animate(const CommonFlags& f) {
  const auto c = load(f);
  const auto a = nfs::obtain_assets(c, log_line);
  const auto r = nfs::run_pipeline(c, a, progress);
  std::printf("%zu frames written to %s\n", r.frames.size(), c.output_dir.c_str());
  if (r.energy_correlation) std::printf("mouth opening / RMS correlation %.4f\n", *r.energy_correlation);
  return 0;
}

int iddiff(const CommonFlags& f) {
  const auto c = load(f);
  const auto a = nfs::obtain_assets(c, log_line);
  const auto r = nfs::run_internal_difference(c, a, progress);
  std::printf("yaw %+.3f vs %+.3f, mirrored\n", c.yaw, -c.yaw);
  std::printf("animated: MAD %.6g (worst frame %zu), PSNR %.3f dB\n", r.deformed.mad.mean, r.deformed.worst_frame,
              r.deformed.psnr.mean);
  std::printf("static:   MAD %.6g, PSNR %.3f dB\n", r.still.mad.mean, r.still.psnr.mean);
  std::printf("MAD ratio %.4g\n", r.ratio);
  return 0;
}

int selftest() {
  struct Item {
    const char* name;
    nfs::checks::Verdict (*fn)();
  };
  const Item items[] = {{"renderer", nfs::checks::renderer},
                        {"deformation identity", nfs::checks::deformation_identity},
                        {"binding oracle", nfs::checks::binding_oracle},
                        {"gradients", nfs::checks::gradients},
                        {"blending", nfs::checks::blending}};
  int failed = 0;
  for (const auto& item : items) {
    const auto v = nfs::checks::timed(item.fn);
    std::printf("%s  %-22s %7.2fs  %s\n", v.pass ? "PASS" : "FAIL", item.name, v.seconds, v.detail.c_str());
    failed += v.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Audio-driven talking-head animation with a deformable neural field"};
  app.require_subcommand(1);
  CommonFlags prep_flags, anim_flags, id_flags;
  auto* prep = app.add_subcommand("prepare", "Build the face basis, generator and trained networks");
  add_common(prep, prep_flags, false);
  auto* anim = app.add_subcommand("animate", "Render frames driven by audio");
  add_common(anim, anim_flags, true);
  auto* id = app.add_subcommand("iddiff", "Compare animation at a pose and its mirror");
  add_common(id, id_flags, true);
  auto* self = app.add_subcommand("selftest", "Run the built-in invariant checks");
  CLI11_PARSE(app, argc, argv);
  try {
    if (*prep) return prepare(prep_flags);
    if (*anim) return animate(anim_flags);
    if (*id) return iddiff(id_flags);
    if (*self) return selftest();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
