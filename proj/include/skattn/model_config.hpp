#pragma once

#include <array>
#include <cstdint>
#include <string>

namespace skattn {

/// Frozen denoiser shape.
struct UNetConfig {
  int latent_channels = 4;
  int latent_size = 16;
  std::array<int, 3> channels{32, 64, 128};
  int res_blocks = 2;
  int groups = 8;
  int time_dim = 128;
  int reference_timestep = 0;
  std::uint64_t seed = 1234;

  /// Throws InvalidArgument on an inconsistent configuration.
  void validate() const;
  int level_size(int level) const { return latent_size >> level; }
};

/// Trainable conditioning branches.
struct AdapterConfig {
  int expr_width = 64;
  int heads = 4;
  int pose_scale = 4;     // pose raster side = latent_size * pose_scale
  int stem_channels = 16;
  bool positional_encoding = true;
  int motion_heads = 4;
  bool motion_positional_encoding = false;
  std::uint64_t seed = 99;
  std::uint64_t encoder_seed = 5;

  void validate(const UNetConfig& unet) const;
  int pose_size(const UNetConfig& unet) const { return unet.latent_size * pose_scale; }
};

inline constexpr int kLevels = 3;

/// Injection sites in evaluation order: one per level on the way down and up.
enum class Site : int { kDown0 = 0, kDown1, kDown2, kUp2, kUp1, kUp0 };
inline constexpr int kSiteCount = 6;
inline constexpr std::array<Site, kSiteCount> kAllSites{Site::kDown0, Site::kDown1, Site::kDown2,
                                                        Site::kUp2,   Site::kUp1,   Site::kUp0};

int site_level(Site site);
std::string site_name(Site site);

}  // namespace skattn
