#pragma once

// Procedural talking-head surrogate: a planar elliptical face with eyes and a
// mouth, posed in 3D and rendered at latent resolution.

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "skattn/pipeline.hpp"
#include "skattn/pose.hpp"

namespace skattn {

struct SynthConfig {
  int image_size = 16;
  int channels = 4;
  int supersample = 4;
  double focal_scale = 1.4;  // focal length = focal_scale * image side
  double canonical_depth = 4.5;
  double max_yaw_deg = 20.0;
  double max_pitch_deg = 15.0;
  double max_roll_deg = 30.0;
  double max_shift = 0.6;
  double depth_min = 4.0;
  double depth_max = 5.2;
  int active_coefficients = 2;  // coefficient 0 opens the eyes, 1 the mouth
  int pose_scale = 4;           // pose raster side / image side
  BoxHalfExtents box;
};

struct Identity {
  std::array<double, 4> background{};
  std::array<double, 4> skin{};
  std::array<double, 4> hair{};
  std::array<double, 4> feature{};
};

struct SynthSample {
  Identity identity;
  Tensor reference;  // [C,S,S] in [-1,1], canonical pose
  Tensor driving;    // [C,S,S] in [-1,1]
  PoseRT pose;
  ExpressionCoefficients coefficients;
  ExpressionCoefficients reference_coefficients;
  Image eye_patch;    // 16x16 gray, head-aligned
  Image mouth_patch;  // 16x16 gray, head-aligned
  Tensor mask;        // [1,S,S] binary
  PoseImage pose_image;

  FrameCondition condition() const;
};

CameraIntrinsics synth_camera(const SynthConfig& config);
PoseRT canonical_pose(const SynthConfig& config);

Identity random_identity(std::mt19937_64& rng);
PoseRT random_pose(const SynthConfig& config, std::mt19937_64& rng);
ExpressionCoefficients random_coefficients(const SynthConfig& config, std::mt19937_64& rng);

/// Image in [-1,1], [C,S,S].
Tensor render_face(const Identity& id, const PoseRT& pose, const ExpressionCoefficients& coeffs,
                   const SynthConfig& config);
/// Pixels touched by the eyes or mouth at full aperture under `pose`.
Tensor region_mask(const PoseRT& pose, const SynthConfig& config);
Image render_eye_patch(const Identity& id, const ExpressionCoefficients& coeffs);
Image render_mouth_patch(const Identity& id, const ExpressionCoefficients& coeffs);
PoseImage render_pose_image(const PoseRT& pose, const SynthConfig& config);

SynthSample make_sample(const Identity& id, const PoseRT& pose, const ExpressionCoefficients& coeffs,
                        const ExpressionCoefficients& reference_coeffs, const SynthConfig& config);

/// n independent identities, each with a random driving pose and expression.
std::vector<SynthSample> synth_dataset(int n, std::uint64_t seed, const SynthConfig& config = {});

/// One identity moving smoothly between two random poses and expressions.
std::vector<SynthSample> synth_clip(int frames, std::uint64_t seed, const SynthConfig& config = {});

/// [-1,1] latent to [0,1] image values, clamped.
Tensor to_unit_range(const Tensor& latent);
/// Latent as an 8-bit image of its first three channels.
Image latent_to_image(const Tensor& latent);

}  // namespace skattn
