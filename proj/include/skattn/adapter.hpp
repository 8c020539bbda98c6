#pragma once

// Conditioning branches grafted onto the frozen denoiser. Every branch ends in
// a zero-initialized 1x1 convolution, so fresh adapters leave the base
// network's output untouched.

#include <array>
#include <random>
#include <vector>

#include "skattn/attention.hpp"
#include "skattn/model_config.hpp"
#include "skattn/pose.hpp"

namespace skattn {

/// 1x1 convolution gate.
struct ZeroConv {
  Tensor w;  // [c_out, c_in]
  Tensor b;  // [c_out]

  FeatureMap2D apply(const FeatureMap2D& x) const;
  NamedTensors named(const std::string& prefix) const;
};

/// W = 0, b = 0.
ZeroConv zero_conv_init(int c_in, int c_out, bool requires_grad = true);

/// Condition features at the three UNet levels (sizes s, s/2, s/4).
struct ControlPyramid {
  std::array<FeatureMap2D, kLevels> maps;
};

/// Strided 3x3 encoder from the pose raster to the three level resolutions.
struct ControlEncoder {
  std::vector<Tensor> stem_w, stem_b;  // pose_size -> latent_size
  std::array<Tensor, kLevels - 1> down_w, down_b;  // level l -> l + 1

  NamedTensors named(const std::string& prefix) const;
};

/// Self-attention across frames at each spatial position.
struct MotionBlock {
  StageParams stage;
  int n_heads = 1;
  ZeroConv gate;

  NamedTensors named(const std::string& prefix) const;
};

struct AdapterWeights {
  AdapterConfig config;
  ExpressionProjection expression;
  ControlEncoder encoder;
  std::array<AttentionParams, kLevels> control_attention;
  std::array<ZeroConv, kLevels> control_gates;
  std::array<AttentionParams, kSiteCount> reference_attention;
  std::array<ZeroConv, kSiteCount> reference_gates;
  std::array<MotionBlock, kLevels> motion;  // one per level on the up path

  static AdapterWeights init(const AdapterConfig& config, const UNetConfig& unet);

  /// Everything except the motion blocks.
  NamedTensors appearance_parameters() const;
  NamedTensors motion_parameters() const;
  /// All tensors, keyed by site/level id.
  NamedTensors named() const;
};

/// Pose raster + expression tokens -> gated three-scale control features.
ControlPyramid control_pyramid(const PoseImage& pose, const TokenSequence& expression,
                               const AdapterWeights& weights, const UNetConfig& unet);

/// Elementwise sum; throws ShapeMismatch.
FeatureMap2D add_control(const FeatureMap2D& hidden, const FeatureMap2D& control);

/// hidden + gate(sk_reference_attention(hidden, ref_hidden)).
FeatureMap2D inject_reference(const FeatureMap2D& hidden, const FeatureMap2D& ref_hidden,
                              const AttentionParams& attention, const ZeroConv& gate);

/// n copies of a D-vector as an [n, D] sequence.
TokenSequence tile_id_feature(const std::vector<double>& id, int n = 5);

/// Frames share one shape; attention runs along the frame axis at every pixel,
/// and each frame receives frame + gate(attention output).
std::vector<FeatureMap2D> temporal_attention(const std::vector<FeatureMap2D>& frames,
                                             const MotionBlock& block);

}  // namespace skattn
