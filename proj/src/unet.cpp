#include "skattn/unet.hpp"

#include <cmath>
#include <random>

#include "skattn/error.hpp"
#include "skattn/ops.hpp"

namespace skattn {

void UNetConfig::validate() const {
  if (latent_channels < 1 || res_blocks < 1 || groups < 1 || time_dim < 4) {
    throw InvalidArgument("unet: non-positive size");
  }
  if (latent_size < 4 || latent_size % 4 != 0) {
    throw InvalidArgument("unet: latent size must be a positive multiple of 4");
  }
  for (int c : channels) {
    if (c < 1 || c % groups != 0) throw InvalidArgument("unet: channels must be divisible by groups");
  }
  if (reference_timestep < 0) throw InvalidArgument("unet: negative reference timestep");
}

void AdapterConfig::validate(const UNetConfig& unet) const {
  if (expr_width < 1 || stem_channels < 1) throw InvalidArgument("adapter: non-positive width");
  if (pose_scale < 1 || (pose_scale & (pose_scale - 1)) != 0) {
    throw InvalidArgument("adapter: pose_scale must be a power of two");
  }
  for (int c : unet.channels) {
    if (heads < 1 || c % heads != 0 || motion_heads < 1 || c % motion_heads != 0) {
      throw InvalidArgument("adapter: heads must divide every level width");
    }
  }
}

int site_level(Site site) {
  switch (site) {
    case Site::kDown0:
    case Site::kUp0:
      return 0;
    case Site::kDown1:
    case Site::kUp1:
      return 1;
    case Site::kDown2:
    case Site::kUp2:
      return 2;
  }
  return 0;
}

std::string site_name(Site site) {
  static const char* names[] = {"down0", "down1", "down2", "up2", "up1", "up0"};
  return names[static_cast<int>(site)];
}

namespace {

struct Init {
  std::mt19937_64 rng;

  Tensor normal(Shape shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = dist(rng);
    return Tensor::create(std::move(shape), std::move(v));
  }
  Tensor conv(int c_out, int c_in) { return normal({c_out, c_in, 3, 3}, 1.0 / std::sqrt(9.0 * c_in)); }
  Tensor bias(int c) { return normal({c}, 0.05); }
  ResBlockWeights block(int c, int time_dim) {
    ResBlockWeights b;
    b.gn1_gamma = Tensor::full({c}, 1.0);
    b.gn1_beta = Tensor::zeros({c});
    b.conv1_w = conv(c, c);
    b.conv1_b = bias(c);
    b.time_w = normal({time_dim, c}, 1.0 / std::sqrt(time_dim));
    b.time_b = bias(c);
    b.gn2_gamma = Tensor::full({c}, 1.0);
    b.gn2_beta = Tensor::zeros({c});
    b.conv2_w = conv(c, c);
    b.conv2_b = bias(c);
    return b;
  }
};

int frequency_width(const UNetConfig& cfg) { return cfg.time_dim / 4; }

void add_block(NamedTensors& out, const std::string& p, const ResBlockWeights& b) {
  out.insert(out.end(), {{p + ".gn1.gamma", b.gn1_gamma},
                         {p + ".gn1.beta", b.gn1_beta},
                         {p + ".conv1.w", b.conv1_w},
                         {p + ".conv1.b", b.conv1_b},
                         {p + ".time.w", b.time_w},
                         {p + ".time.b", b.time_b},
                         {p + ".gn2.gamma", b.gn2_gamma},
                         {p + ".gn2.beta", b.gn2_beta},
                         {p + ".conv2.w", b.conv2_w},
                         {p + ".conv2.b", b.conv2_b}});
}

Tensor res_block(const Tensor& x, const Tensor& temb, const ResBlockWeights& b, int groups) {
  Tensor h = ops::conv3x3(ops::silu(ops::group_norm(x, groups, b.gn1_gamma, b.gn1_beta)), b.conv1_w,
                          b.conv1_b);
  const Tensor shift = ops::linear(temb, b.time_w, b.time_b);
  h = ops::add_channel_bias(h, ops::reshape(shift, {shift.dim(1)}));
  h = ops::conv3x3(ops::silu(ops::group_norm(h, groups, b.gn2_gamma, b.gn2_beta)), b.conv2_w,
                   b.conv2_b);
  return ops::add(x, h);
}

}  // namespace

BaseUNet BaseUNet::init(const UNetConfig& config) {
  config.validate();
  Init init{std::mt19937_64(config.seed)};
  BaseUNet u;
  u.config = config;
  const int fw = frequency_width(config);
  u.time_w1 = init.normal({fw, config.time_dim}, 1.0 / std::sqrt(fw));
  u.time_b1 = init.bias(config.time_dim);
  u.time_w2 = init.normal({config.time_dim, config.time_dim}, 1.0 / std::sqrt(config.time_dim));
  u.time_b2 = init.bias(config.time_dim);
  u.in_w = init.conv(config.channels[0], config.latent_channels);
  u.in_b = init.bias(config.channels[0]);
  for (int l = 0; l < kLevels; ++l) {
    for (int i = 0; i < config.res_blocks; ++i) {
      u.down[l].push_back(init.block(config.channels[l], config.time_dim));
    }
    if (l + 1 < kLevels) {
      u.downsample_w[l] = init.conv(config.channels[l + 1], config.channels[l]);
      u.downsample_b[l] = init.bias(config.channels[l + 1]);
    }
  }
  for (int l = kLevels - 1; l >= 0; --l) {
    if (l + 1 < kLevels) {
      u.upsample_w[l] = init.conv(config.channels[l], config.channels[l + 1]);
      u.upsample_b[l] = init.bias(config.channels[l]);
    }
    for (int i = 0; i < config.res_blocks; ++i) {
      u.up[l].push_back(init.block(config.channels[l], config.time_dim));
    }
  }
  u.out_gn_gamma = Tensor::full({config.channels[0]}, 1.0);
  u.out_gn_beta = Tensor::zeros({config.channels[0]});
  u.out_w = init.conv(config.latent_channels, config.channels[0]);
  u.out_b = init.bias(config.latent_channels);
  return u;
}

NamedTensors BaseUNet::named() const {
  NamedTensors out{{"time.w1", time_w1}, {"time.b1", time_b1}, {"time.w2", time_w2},
                   {"time.b2", time_b2}, {"in.w", in_w},       {"in.b", in_b}};
  for (int l = 0; l < kLevels; ++l) {
    for (std::size_t i = 0; i < down[l].size(); ++i) {
      add_block(out, "down" + std::to_string(l) + ".block" + std::to_string(i), down[l][i]);
    }
    if (l + 1 < kLevels) {
      out.emplace_back("downsample" + std::to_string(l) + ".w", downsample_w[l]);
      out.emplace_back("downsample" + std::to_string(l) + ".b", downsample_b[l]);
    }
  }
  for (int l = kLevels - 1; l >= 0; --l) {
    if (l + 1 < kLevels) {
      out.emplace_back("upsample" + std::to_string(l) + ".w", upsample_w[l]);
      out.emplace_back("upsample" + std::to_string(l) + ".b", upsample_b[l]);
    }
    for (std::size_t i = 0; i < up[l].size(); ++i) {
      add_block(out, "up" + std::to_string(l) + ".block" + std::to_string(i), up[l][i]);
    }
  }
  out.insert(out.end(), {{"out.gn.gamma", out_gn_gamma},
                         {"out.gn.beta", out_gn_beta},
                         {"out.w", out_w},
                         {"out.b", out_b}});
  return out;
}

Tensor timestep_embedding(int timestep, int width) {
  const int half = width / 2;
  std::vector<double> v(static_cast<std::size_t>(width), 0.0);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    v[i] = std::sin(timestep * freq);
    v[half + i] = std::cos(timestep * freq);
  }
  return Tensor::create({1, width}, std::move(v));
}

std::vector<Tensor> unet_forward(const BaseUNet& base, const AdapterWeights* adapters,
                                 const UNetInputs& in, ReferenceFeatures* capture) {
  const auto& cfg = base.config;
  const int frames = static_cast<int>(in.latents.size());
  if (frames == 0) throw ShapeMismatch("unet_forward: no latents");
  const Shape latent_shape{cfg.latent_channels, cfg.latent_size, cfg.latent_size};
  for (const auto& z : in.latents) {
    if (z.shape() != latent_shape) {
      throw ShapeMismatch("unet_forward: latent " + shape_str(z.shape()) + ", expected " +
                          shape_str(latent_shape));
    }
  }
  if (!in.controls.empty() && static_cast<int>(in.controls.size()) != frames) {
    throw ShapeMismatch("unet_forward: one control pyramid per frame required");
  }
  const bool use_control = adapters && !in.controls.empty();
  const bool use_reference = adapters && in.reference;
  const bool use_motion = adapters && in.motion;

  const Tensor temb = ops::linear(
      ops::silu(ops::linear(timestep_embedding(in.timestep, frequency_width(cfg)), base.time_w1,
                            base.time_b1)),
      base.time_w2, base.time_b2);

  std::vector<Tensor> h(frames);
  for (int f = 0; f < frames; ++f) h[f] = ops::conv3x3(in.latents[f], base.in_w, base.in_b);

  auto site = [&](Site s) {
    const int i = static_cast<int>(s);
    const int level = site_level(s);
    for (int f = 0; f < frames; ++f) {
      FeatureMap2D x(h[f]);
      if (use_control && i < kLevels) x = add_control(x, in.controls[f].maps[level]);
      if (use_reference) {
        x = inject_reference(x, (*in.reference)[i], adapters->reference_attention[i],
                             adapters->reference_gates[i]);
      }
      h[f] = x.tensor();
    }
    if (capture) (*capture)[i] = FeatureMap2D(h[0]);
  };

  std::array<std::vector<Tensor>, kLevels> skips;
  for (int l = 0; l < kLevels; ++l) {
    for (int f = 0; f < frames; ++f) {
      if (l > 0) h[f] = ops::conv3x3(h[f], base.downsample_w[l - 1], base.downsample_b[l - 1], 2);
      for (const auto& b : base.down[l]) h[f] = res_block(h[f], temb, b, cfg.groups);
    }
    site(static_cast<Site>(l));
    skips[l] = h;
  }
  for (int l = kLevels - 1; l >= 0; --l) {
    for (int f = 0; f < frames; ++f) {
      if (l + 1 < kLevels) {
        h[f] = ops::add(ops::conv3x3(ops::upsample2x(h[f]), base.upsample_w[l], base.upsample_b[l]),
                        skips[l][f]);
      }
      for (const auto& b : base.up[l]) h[f] = res_block(h[f], temb, b, cfg.groups);
    }
    site(static_cast<Site>(kSiteCount - 1 - l));
    if (use_motion) {
      std::vector<FeatureMap2D> maps;
      maps.reserve(frames);
      for (const auto& t : h) maps.emplace_back(t);
      const auto moved = temporal_attention(maps, adapters->motion[l]);
      for (int f = 0; f < frames; ++f) h[f] = moved[f].tensor();
    }
  }
  std::vector<Tensor> out(frames);
  for (int f = 0; f < frames; ++f) {
    out[f] = ops::conv3x3(
        ops::silu(ops::group_norm(h[f], cfg.groups, base.out_gn_gamma, base.out_gn_beta)),
        base.out_w, base.out_b);
  }
  return out;
}

Tensor unet_forward(const BaseUNet& base, const AdapterWeights* adapters, const Tensor& latent,
                    int timestep, const ControlPyramid* control,
                    const ReferenceFeatures* reference) {
  UNetInputs in;
  in.latents = {latent};
  in.timestep = timestep;
  if (control) in.controls = {*control};
  in.reference = reference;
  return unet_forward(base, adapters, in)[0];
}

ReferenceFeatures reference_pass(const Tensor& ref_latent, const BaseUNet& base) {
  UNetInputs in;
  in.latents = {ref_latent.detach()};
  in.timestep = base.config.reference_timestep;
  ReferenceFeatures feats;
  unet_forward(base, nullptr, in, &feats);
  return feats;
}

}  // namespace skattn
