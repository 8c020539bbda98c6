#pragma once

// Conditioned denoising: model bundle, sampling (single frame, frame-by-frame
// and patch-wise joint), and the adapter training step.

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "skattn/diffusion.hpp"
#include "skattn/optim.hpp"
#include "skattn/unet.hpp"

namespace skattn {

/// What the network output stands for: the added noise, or the clean latent.
enum class Prediction { kEpsilon, kSample };

struct ScheduleConfig {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  Prediction prediction = Prediction::kSample;
};

struct Model {
  UNetConfig unet_config;
  AdapterConfig adapter_config;
  ScheduleConfig schedule_config;
  BaseUNet base;
  AdapterWeights adapters;
  ToyPatchEncoder encoder;
  NoiseSchedule schedule;

  static Model create(const UNetConfig& unet, const AdapterConfig& adapter,
                      const ScheduleConfig& schedule);
};

/// Driving signal for one frame.
struct FrameCondition {
  PoseImage pose;
  ExpressionCoefficients coefficients;
  Image eye_patch;
  Image mouth_patch;
};

ControlPyramid encode_condition(const Model& model, const FrameCondition& condition);

struct VideoClip {
  std::vector<Tensor> frames;
  double fps = 8.0;

  /// Throws ShapeMismatch when frames differ in shape.
  void validate() const;
};

/// Loss target for a noised example: `noise` or `clean` depending on the parameterization.
const Tensor& prediction_target(const Model& model, const Tensor& clean, const Tensor& noise);

/// Network output at (x_t, t) converted to a noise estimate.
std::vector<double> noise_estimate(const Model& model, std::span<const double> x_t,
                                   std::span<const double> output, int t);

/// Deterministic DDIM from `start_t` (default T-1) to a clean sample. All
/// frames are denoised jointly at the same timesteps; with `motion` the
/// temporal blocks see the whole set. `controls` is empty or one per frame.
std::vector<Tensor> ddim_denoise(const Model& model, std::vector<Tensor> latents, int start_t,
                                 int steps, const std::vector<ControlPyramid>& controls,
                                 const ReferenceFeatures* reference, bool motion, bool clip_x0);

/// Single-frame DDIM sample from noise at T-1.
Tensor ddim_sample(const Model& model, const Tensor& initial_noise, const ControlPyramid* control,
                   const ReferenceFeatures* reference, int steps, bool clip_x0 = true);

/// Every frame sampled independently from the same initial noise.
VideoClip stage1_generate(const Model& model, const ReferenceFeatures& reference,
                          const std::vector<ControlPyramid>& conditions, const Tensor& shared_noise,
                          int steps, bool clip_x0 = true);

struct Stage2Config {
  double renoise_strength = 0.6;
  int patch_len = 16;
  int overlap = 4;
  int steps = 25;
  bool clip_x0 = true;

  /// Throws PatchConfigInvalid.
  void validate() const;
};

struct PatchOutput {
  int start = 0;
  std::vector<Tensor> frames;  // before blending
};

struct Stage2Result {
  VideoClip clip;
  std::vector<PatchOutput> patches;
};

/// Patch start offsets: 0, s, 2s, ... with stride patch_len - overlap, until
/// a patch reaches the last frame.
std::vector<int> patch_starts(int frames, int patch_len, int overlap);

/// Re-noises every stage-1 frame to t = round(strength * (T-1)) with one
/// shared noise tensor, denoises patches jointly with the temporal blocks,
/// and cross-fades the `overlap` frames shared by consecutive patches with
/// weight w_i = (i+1)/(overlap+1) on the later patch.
Stage2Result stage2_generate(const Model& model, const VideoClip& stage1,
                             const ReferenceFeatures& reference,
                             const std::vector<ControlPyramid>& conditions,
                             const Tensor& renoise_noise, const Stage2Config& config);

/// One self-reenactment training pair.
struct TrainExample {
  Tensor reference_latent;
  Tensor driving_latent;
  FrameCondition condition;
  Tensor mask;  // [1,S,S]
  const ReferenceFeatures* reference_features = nullptr;  // cached reference pass, optional
};

struct TrainOptions {
  double eps_norm = 1e-8;
  int blur_min = 0;
  int blur_max = 2;
};

struct TrainStepResult {
  double loss_total = 0.0;
  double loss_mean = 0.0;
  double loss_masked = 0.0;
  std::vector<int> timesteps;
  double lr = 0.0;
};

/// Samples t and noise per example from `rng`, blurs the patches, evaluates
/// the weighted loss averaged over the batch, and applies one optimizer step
/// to the adapter parameters held by `optimizer`.
TrainStepResult train_step(Model& model, Adam& optimizer, std::span<const TrainExample> batch,
                           std::mt19937_64& rng, const TrainOptions& options);

/// A short clip of consecutive frames sharing one reference.
struct MotionExample {
  std::vector<Tensor> latents;
  std::vector<FrameCondition> conditions;
  const ReferenceFeatures* reference_features = nullptr;
};

/// Joint noise-prediction loss over the clip with the temporal blocks active.
TrainStepResult motion_train_step(Model& model, Adam& optimizer, const MotionExample& clip,
                                  std::mt19937_64& rng, const TrainOptions& options);

/// Standard normal tensor from `rng`.
Tensor gaussian_noise(const Shape& shape, std::mt19937_64& rng);

}  // namespace skattn
