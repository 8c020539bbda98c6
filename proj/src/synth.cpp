#include "skattn/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "skattn/error.hpp"

namespace skattn {

namespace {

constexpr double kDeg = std::numbers::pi / 180.0;

// Head-frame layout (x right, y down, head units).
constexpr double kFaceA = 1.0, kFaceB = 1.3;
constexpr double kHairLine = -0.7;
constexpr double kEyeX = 0.4, kEyeY = -0.3, kEyeA = 0.3;
constexpr double kMouthY = 0.6, kMouthA = 0.45;

double eye_height(double c) { return 0.05 + 0.25 * c; }
double mouth_height(double c) { return 0.05 + 0.35 * c; }

bool in_ellipse(double x, double y, double cx, double cy, double a, double b) {
  const double dx = (x - cx) / a, dy = (y - cy) / b;
  return dx * dx + dy * dy <= 1.0;
}

enum class Region { kBackground, kSkin, kHair, kFeature };

bool in_eyes(double x, double y, double c) {
  return in_ellipse(x, y, -kEyeX, kEyeY, kEyeA, eye_height(c)) ||
         in_ellipse(x, y, kEyeX, kEyeY, kEyeA, eye_height(c));
}

bool in_mouth(double x, double y, double c) {
  return in_ellipse(x, y, 0.0, kMouthY, kMouthA, mouth_height(c));
}

Region classify(double x, double y, double eye_c, double mouth_c) {
  if (!in_ellipse(x, y, 0.0, 0.0, kFaceA, kFaceB)) return Region::kBackground;
  if (y < kHairLine) return Region::kHair;
  if (in_eyes(x, y, eye_c) || in_mouth(x, y, mouth_c)) return Region::kFeature;
  return Region::kSkin;
}

const std::array<double, 4>& color_of(const Identity& id, Region r) {
  switch (r) {
    case Region::kSkin:
      return id.skin;
    case Region::kHair:
      return id.hair;
    case Region::kFeature:
      return id.feature;
    case Region::kBackground:
      break;
  }
  return id.background;
}

// Back-projects image point (u,v) onto the head plane; false when the ray
// misses it.
bool to_head_plane(double u, double v, const PoseRT& pose, const CameraIntrinsics& cam, double& hx,
                   double& hy) {
  const auto& r = pose.rotation;
  const auto& t = pose.translation;
  const double d[3] = {(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0};
  const double n[3] = {r[2], r[5], r[8]};
  const double nd = n[0] * d[0] + n[1] * d[1] + n[2] * d[2];
  if (std::abs(nd) < 1e-12) return false;
  const double s = (n[0] * t[0] + n[1] * t[1] + n[2] * t[2]) / nd;
  if (s <= 0.0) return false;
  const double p[3] = {s * d[0] - t[0], s * d[1] - t[1], s * d[2] - t[2]};
  hx = r[0] * p[0] + r[3] * p[1] + r[6] * p[2];
  hy = r[1] * p[0] + r[4] * p[1] + r[7] * p[2];
  return true;
}

template <typename Shade>
void supersample(int size, int ss, Shade shade) {
  for (int py = 0; py < size; ++py)
    for (int px = 0; px < size; ++px)
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          shade(px, py, px - 0.5 + (sx + 0.5) / ss, py - 0.5 + (sy + 0.5) / ss);
        }
}

Image render_patch(const Identity& id, const ExpressionCoefficients& coeffs, double x0, double x1,
                   double y0, double y1) {
  constexpr int n = ToyPatchEncoder::kPatchSize, ss = 4;
  Image img = Image::blank(n, n, 1);
  for (int py = 0; py < n; ++py) {
    for (int px = 0; px < n; ++px) {
      double acc = 0.0;
      for (int sy = 0; sy < ss; ++sy) {
        for (int sx = 0; sx < ss; ++sx) {
          const double x = x0 + (x1 - x0) * (px + (sx + 0.5) / ss) / n;
          const double y = y0 + (y1 - y0) * (py + (sy + 0.5) / ss) / n;
          const auto& c = color_of(id, classify(x, y, coeffs[0], coeffs[1]));
          acc += (c[0] + c[1] + c[2] + c[3]) / 4.0;
        }
      }
      img.at(px, py) = static_cast<std::uint8_t>(std::lround(255.0 * acc / (ss * ss)));
    }
  }
  return img;
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

}  // namespace

CameraIntrinsics synth_camera(const SynthConfig& config) {
  return CameraIntrinsics::for_image(config.image_size, config.image_size, config.focal_scale);
}

PoseRT canonical_pose(const SynthConfig& config) {
  PoseRT p;
  p.translation = {0.0, 0.0, config.canonical_depth};
  return p;
}

Identity random_identity(std::mt19937_64& rng) {
  Identity id;
  for (int c = 0; c < 4; ++c) {
    id.background[c] = uniform(rng, 0.0, 1.0);
    id.skin[c] = uniform(rng, 0.0, 1.0);
    id.hair[c] = uniform(rng, 0.0, 1.0);
    id.feature[c] = 1.0 - id.skin[c];
  }
  return id;
}

PoseRT random_pose(const SynthConfig& c, std::mt19937_64& rng) {
  const double yaw = uniform(rng, -c.max_yaw_deg, c.max_yaw_deg) * kDeg;
  const double pitch = uniform(rng, -c.max_pitch_deg, c.max_pitch_deg) * kDeg;
  const double roll = uniform(rng, -c.max_roll_deg, c.max_roll_deg) * kDeg;
  const Vec3 t{uniform(rng, -c.max_shift, c.max_shift), uniform(rng, -c.max_shift, c.max_shift),
               uniform(rng, c.depth_min, c.depth_max)};
  return PoseRT::from_angles(yaw, pitch, roll, t);
}

ExpressionCoefficients random_coefficients(const SynthConfig& config, std::mt19937_64& rng) {
  std::vector<double> v(kExpressionCoefficients, 0.0);
  for (int i = 0; i < std::min(config.active_coefficients, kExpressionCoefficients); ++i) {
    v[i] = uniform(rng, 0.0, 1.0);
  }
  return ExpressionCoefficients(std::move(v));
}

Tensor render_face(const Identity& id, const PoseRT& pose, const ExpressionCoefficients& coeffs,
                   const SynthConfig& config) {
  const int s = config.image_size, ss = config.supersample, ch = config.channels;
  const auto cam = synth_camera(config);
  std::vector<double> acc(static_cast<std::size_t>(ch) * s * s, 0.0);
  supersample(s, ss, [&](int px, int py, double u, double v) {
    double hx = 0, hy = 0;
    const Region r = to_head_plane(u, v, pose, cam, hx, hy) ? classify(hx, hy, coeffs[0], coeffs[1])
                                                            : Region::kBackground;
    const auto& c = color_of(id, r);
    for (int k = 0; k < ch; ++k) acc[(static_cast<std::size_t>(k) * s + py) * s + px] += c[k % 4];
  });
  for (double& v : acc) v = 2.0 * v / (ss * ss) - 1.0;
  return Tensor::create({ch, s, s}, std::move(acc));
}

Tensor region_mask(const PoseRT& pose, const SynthConfig& config) {
  const int s = config.image_size;
  const auto cam = synth_camera(config);
  std::vector<double> m(static_cast<std::size_t>(s) * s, 0.0);
  supersample(s, config.supersample, [&](int px, int py, double u, double v) {
    double hx = 0, hy = 0;
    if (to_head_plane(u, v, pose, cam, hx, hy) && in_ellipse(hx, hy, 0.0, 0.0, kFaceA, kFaceB) &&
        (in_eyes(hx, hy, 1.0) || in_mouth(hx, hy, 1.0))) {
      m[static_cast<std::size_t>(py) * s + px] = 1.0;
    }
  });
  return Tensor::create({1, s, s}, std::move(m));
}

Image render_eye_patch(const Identity& id, const ExpressionCoefficients& coeffs) {
  return render_patch(id, coeffs, -0.8, 0.8, -0.7, 0.1);
}

Image render_mouth_patch(const Identity& id, const ExpressionCoefficients& coeffs) {
  return render_patch(id, coeffs, -0.7, 0.7, 0.2, 1.0);
}

PoseImage render_pose_image(const PoseRT& pose, const SynthConfig& config) {
  const int side = config.image_size * config.pose_scale;
  return rasterize_box_edges(pose, synth_camera(config).scaled(config.pose_scale), config.box, side,
                             side);
}

FrameCondition SynthSample::condition() const {
  return FrameCondition{pose_image, coefficients, eye_patch, mouth_patch};
}

SynthSample make_sample(const Identity& id, const PoseRT& pose, const ExpressionCoefficients& coeffs,
                        const ExpressionCoefficients& reference_coeffs, const SynthConfig& config) {
  SynthSample s;
  s.identity = id;
  s.pose = pose;
  s.coefficients = coeffs;
  s.reference_coefficients = reference_coeffs;
  s.reference = render_face(id, canonical_pose(config), reference_coeffs, config);
  s.driving = render_face(id, pose, coeffs, config);
  s.eye_patch = render_eye_patch(id, coeffs);
  s.mouth_patch = render_mouth_patch(id, coeffs);
  s.mask = region_mask(pose, config);
  s.pose_image = render_pose_image(pose, config);
  return s;
}

std::vector<SynthSample> synth_dataset(int n, std::uint64_t seed, const SynthConfig& config) {
  if (n < 1) throw InvalidArgument("synth_dataset: n must be >= 1");
  std::mt19937_64 rng(seed);
  std::vector<SynthSample> out;
  out.reserve(n);
  for (int i = 0; i < n; ++i) {
    const Identity id = random_identity(rng);
    const PoseRT pose = random_pose(config, rng);
    const auto coeffs = random_coefficients(config, rng);
    const auto ref_coeffs = random_coefficients(config, rng);
    out.push_back(make_sample(id, pose, coeffs, ref_coeffs, config));
  }
  return out;
}

std::vector<SynthSample> synth_clip(int frames, std::uint64_t seed, const SynthConfig& config) {
  if (frames < 1) throw InvalidArgument("synth_clip: frames must be >= 1");
  std::mt19937_64 rng(seed);
  const Identity id = random_identity(rng);
  const auto ref_coeffs = random_coefficients(config, rng);
  auto angles = [&] {
    return std::array<double, 6>{uniform(rng, -config.max_yaw_deg, config.max_yaw_deg) * kDeg,
                                 uniform(rng, -config.max_pitch_deg, config.max_pitch_deg) * kDeg,
                                 uniform(rng, -config.max_roll_deg, config.max_roll_deg) * kDeg,
                                 uniform(rng, -config.max_shift, config.max_shift),
                                 uniform(rng, -config.max_shift, config.max_shift),
                                 uniform(rng, config.depth_min, config.depth_max)};
  };
  const auto a = angles(), b = angles();
  const auto ca = random_coefficients(config, rng), cb = random_coefficients(config, rng);
  std::vector<SynthSample> out;
  out.reserve(frames);
  for (int f = 0; f < frames; ++f) {
    const double w = frames == 1 ? 0.0 : static_cast<double>(f) / (frames - 1);
    std::array<double, 6> p{};
    for (int i = 0; i < 6; ++i) p[i] = (1 - w) * a[i] + w * b[i];
    std::vector<double> c(kExpressionCoefficients);
    for (int i = 0; i < kExpressionCoefficients; ++i) c[i] = (1 - w) * ca[i] + w * cb[i];
    out.push_back(make_sample(id, PoseRT::from_angles(p[0], p[1], p[2], {p[3], p[4], p[5]}),
                              ExpressionCoefficients(std::move(c)), ref_coeffs, config));
  }
  return out;
}

Tensor to_unit_range(const Tensor& latent) {
  std::vector<double> v(latent.numel());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::clamp((latent.data()[i] + 1.0) / 2.0, 0.0, 1.0);
  return Tensor::create(latent.shape(), std::move(v));
}

Image latent_to_image(const Tensor& latent) {
  if (latent.rank() != 3) throw ShapeMismatch("latent_to_image: expected [C,H,W]");
  const int c = std::min(3, latent.dim(0)), h = latent.dim(1), w = latent.dim(2);
  Image img = Image::blank(w, h, c == 1 ? 1 : 3);
  const Tensor unit = to_unit_range(latent);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int k = 0; k < img.channels; ++k) {
        const int src = std::min(k, c - 1);
        img.at(x, y, k) = static_cast<std::uint8_t>(
            std::lround(255.0 * unit.data()[(static_cast<std::size_t>(src) * h + y) * w + x]));
      }
  return img;
}

}  // namespace skattn
