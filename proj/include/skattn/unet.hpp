#pragma once

// Frozen three-level latent denoiser with adapter hooks.

#include <array>
#include <vector>

#include "skattn/adapter.hpp"
#include "skattn/model_config.hpp"

namespace skattn {

struct ResBlockWeights {
  Tensor gn1_gamma, gn1_beta, conv1_w, conv1_b;
  Tensor time_w, time_b;  // [time_dim, C], [C]
  Tensor gn2_gamma, gn2_beta, conv2_w, conv2_b;
};

/// Seeded random weights; nothing requires grad.
struct BaseUNet {
  UNetConfig config;
  Tensor time_w1, time_b1, time_w2, time_b2;
  Tensor in_w, in_b;
  std::array<std::vector<ResBlockWeights>, kLevels> down, up;
  std::array<Tensor, kLevels - 1> downsample_w, downsample_b;  // level l -> l + 1
  std::array<Tensor, kLevels - 1> upsample_w, upsample_b;      // level l + 1 -> l
  Tensor out_gn_gamma, out_gn_beta, out_w, out_b;

  static BaseUNet init(const UNetConfig& config);
  NamedTensors named() const;
};

/// Hidden maps captured at every injection site.
using ReferenceFeatures = std::array<FeatureMap2D, kSiteCount>;

struct UNetInputs {
  std::vector<Tensor> latents;  // frames [latent_channels, S, S] sharing one timestep
  int timestep = 0;
  std::vector<ControlPyramid> controls;  // empty, or one per frame
  const ReferenceFeatures* reference = nullptr;
  bool motion = false;  // temporal blocks across the frames
};

/// Noise prediction per frame. With `adapters` null (or absent conditions)
/// the corresponding branches are skipped; with fresh adapters the result is
/// bit-identical to the base network. `capture` receives each site's hidden
/// map for frame 0.
std::vector<Tensor> unet_forward(const BaseUNet& base, const AdapterWeights* adapters,
                                 const UNetInputs& inputs, ReferenceFeatures* capture = nullptr);

/// Single-frame convenience overload.
Tensor unet_forward(const BaseUNet& base, const AdapterWeights* adapters, const Tensor& latent,
                    int timestep, const ControlPyramid* control,
                    const ReferenceFeatures* reference);

/// Base network on the clean reference latent at the configured reference timestep.
ReferenceFeatures reference_pass(const Tensor& ref_latent, const BaseUNet& base);

/// Sinusoidal timestep features [1, width].
Tensor timestep_embedding(int timestep, int width);

}  // namespace skattn
