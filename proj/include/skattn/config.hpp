#pragma once

// Run configuration: every tunable constant, serializable to and from JSON.

#include <cstdint>
#include <string>

#include <json.hpp>

#include "skattn/pipeline.hpp"
#include "skattn/synth.hpp"

namespace skattn {

struct TrainConfig {
  // Phase 0: unconditional denoising pretraining of the base network, which
  // is frozen afterwards. 0 keeps the seeded random base.
  int base_steps = 1500;
  int base_batch_size = 2;
  int base_samples = 512;
  double base_lr = 2e-3;

  int steps = 2000;
  int batch_size = 2;
  int samples = 256;
  int heldout_samples = 32;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  double grad_clip = 1.0;
  double eps_norm = 1e-8;
  int blur_min = 0;
  int blur_max = 2;
  int log_every = 1;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  int motion_steps = 200;
  int motion_frames = 4;
  double motion_lr = 1e-3;
};

struct SamplingConfig {
  int stage1_steps = 8;
  int eval_steps = 8;
  bool clip_x0 = true;
  Stage2Config stage2;
  int clip_frames = 24;
  double fps = 8.0;
};

struct RunConfig {
  std::uint64_t seed = 1;
  UNetConfig unet;
  AdapterConfig adapter;
  ScheduleConfig schedule;
  SynthConfig synth;
  TrainConfig train;
  SamplingConfig sampling;

  /// Applies SKATTN_SEED when set and checks cross-section consistency.
  /// Throws InvalidArgument.
  void finalize();
};

void to_json(nlohmann::json& j, Prediction p);
/// Accepts "epsilon" or "sample"; throws InvalidArgument otherwise.
void from_json(const nlohmann::json& j, Prediction& p);

nlohmann::json to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys are rejected.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::string& path);

}  // namespace skattn
