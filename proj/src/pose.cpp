#include "skattn/pose.hpp"

#include <algorithm>
#include <cmath>

#include "skattn/error.hpp"
#include "skattn/ops.hpp"

namespace skattn {

PoseRT PoseRT::from_angles(double yaw, double pitch, double roll, Vec3 translation) {
  const double cy = std::cos(yaw), sy = std::sin(yaw);
  const double cp = std::cos(pitch), sp = std::sin(pitch);
  const double cr = std::cos(roll), sr = std::sin(roll);
  const Mat3 ry{cy, 0, sy, 0, 1, 0, -sy, 0, cy};
  const Mat3 rx{1, 0, 0, 0, cp, -sp, 0, sp, cp};
  const Mat3 rz{cr, -sr, 0, sr, cr, 0, 0, 0, 1};
  auto mul = [](const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j)
        for (int k = 0; k < 3; ++k) c[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
    return c;
  };
  PoseRT pose;
  pose.rotation = mul(rz, mul(rx, ry));
  pose.translation = translation;
  return pose;
}

void PoseRT::validate() const {
  const auto& r = rotation;
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (int k = 0; k < 3; ++k) dot += r[k * 3 + i] * r[k * 3 + j];
      if (std::abs(dot - (i == j ? 1.0 : 0.0)) > 1e-9) {
        throw InvalidRotation("rotation is not orthonormal");
      }
    }
  }
  const double det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6]) +
                     r[2] * (r[3] * r[7] - r[4] * r[6]);
  if (std::abs(det - 1.0) > 1e-9) throw InvalidRotation("rotation determinant is not +1");
}

CameraIntrinsics CameraIntrinsics::for_image(int width, int height, double focal_scale) {
  const double f = focal_scale * std::max(width, height);
  return {f, f, width / 2.0, height / 2.0};
}

CameraIntrinsics CameraIntrinsics::scaled(double factor) const {
  return {fx * factor, fy * factor, cx * factor, cy * factor};
}

Image Image::blank(int width, int height, int channels) {
  Image img;
  img.width = width;
  img.height = height;
  img.channels = channels;
  img.pixels.assign(static_cast<std::size_t>(width) * height * channels, 0);
  return img;
}

EdgeColors default_edge_colors() {
  return {Rgb{255, 0, 0}, Rgb{0, 255, 0}, Rgb{0, 0, 255}, Rgb{255, 255, 0}};
}

std::vector<Vec3> rt_transform(const std::vector<Vec3>& points, const PoseRT& pose) {
  pose.validate();
  std::vector<Vec3> out;
  out.reserve(points.size());
  const auto& r = pose.rotation;
  for (const auto& p : points) {
    Vec3 q{};
    for (int i = 0; i < 3; ++i) {
      q[i] = r[i * 3] * p[0] + r[i * 3 + 1] * p[1] + r[i * 3 + 2] * p[2] + pose.translation[i];
    }
    out.push_back(q);
  }
  return out;
}

std::vector<Vec2> perspective_project(const std::vector<Vec3>& points, const CameraIntrinsics& cam) {
  if (!(cam.fx > 0.0) || !(cam.fy > 0.0)) throw InvalidArgument("focal lengths must be positive");
  std::vector<Vec2> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    if (!(p[2] > 0.0)) throw BehindCamera("point at depth " + std::to_string(p[2]));
    out.push_back({cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy});
  }
  return out;
}

std::array<Vec3, 4> canonical_box_corners(const BoxHalfExtents& box) {
  return {Vec3{-box.a, -box.b, 0}, Vec3{box.a, -box.b, 0}, Vec3{box.a, box.b, 0},
          Vec3{-box.a, box.b, 0}};
}

std::array<std::array<int, 2>, 4> box_corner_pixels(const PoseRT& pose, const CameraIntrinsics& cam,
                                                    const BoxHalfExtents& box) {
  const auto corners = canonical_box_corners(box);
  const auto uv = perspective_project(rt_transform({corners.begin(), corners.end()}, pose), cam);
  std::array<std::array<int, 2>, 4> px{};
  for (int i = 0; i < 4; ++i) {
    px[i] = {static_cast<int>(std::floor(uv[i][0] + 0.5)), static_cast<int>(std::floor(uv[i][1] + 0.5))};
  }
  return px;
}

void draw_line(Image& image, int x0, int y0, int x1, int y1, Rgb color) {
  const int dx = std::abs(x1 - x0), sx = x0 < x1 ? 1 : -1;
  const int dy = -std::abs(y1 - y0), sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  for (;;) {
    if (x0 >= 0 && x0 < image.width && y0 >= 0 && y0 < image.height) {
      image.at(x0, y0, 0) = color.r;
      image.at(x0, y0, 1) = color.g;
      image.at(x0, y0, 2) = color.b;
    }
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

PoseImage rasterize_box_edges(const PoseRT& pose, const CameraIntrinsics& cam,
                              const BoxHalfExtents& box, int width, int height,
                              const EdgeColors& colors) {
  if (width < 1 || height < 1) throw InvalidArgument("image size must be positive");
  const auto px = box_corner_pixels(pose, cam, box);
  for (int i = 0; i < 4; ++i) {
    for (int j = i + 1; j < 4; ++j) {
      if (px[i] == px[j]) {
        throw DegenerateProjection("box corners " + std::to_string(i) + " and " +
                                   std::to_string(j) + " project to the same pixel");
      }
    }
  }
  PoseImage img = Image::blank(width, height, 3);
  for (int e = 0; e < 4; ++e) {
    const auto& p0 = px[e];
    const auto& p1 = px[(e + 1) % 4];
    draw_line(img, p0[0], p0[1], p1[0], p1[1], colors[e]);
  }
  return img;
}

Tensor image_to_tensor(const Image& image) {
  std::vector<double> v(static_cast<std::size_t>(image.channels) * image.height * image.width);
  for (int c = 0; c < image.channels; ++c)
    for (int y = 0; y < image.height; ++y)
      for (int x = 0; x < image.width; ++x)
        v[(static_cast<std::size_t>(c) * image.height + y) * image.width + x] = image.at(x, y, c) / 255.0;
  return Tensor::create({image.channels, image.height, image.width}, std::move(v));
}

Image random_blur_augment(const Image& patch, int min_radius, int max_radius, std::uint64_t seed) {
  if (min_radius < 0 || min_radius > max_radius) {
    throw InvalidArgument("blur strength must satisfy 0 <= min <= max");
  }
  std::mt19937_64 rng(seed);
  const int radius = std::uniform_int_distribution<int>(min_radius, max_radius)(rng);
  if (radius == 0) return patch;
  Image out = patch;
  const int count = (2 * radius + 1) * (2 * radius + 1);
  for (int c = 0; c < patch.channels; ++c) {
    for (int y = 0; y < patch.height; ++y) {
      for (int x = 0; x < patch.width; ++x) {
        int total = 0;
        for (int dy = -radius; dy <= radius; ++dy) {
          const int yy = std::clamp(y + dy, 0, patch.height - 1);
          for (int dx = -radius; dx <= radius; ++dx) {
            total += patch.at(std::clamp(x + dx, 0, patch.width - 1), yy, c);
          }
        }
        out.at(x, y, c) = static_cast<std::uint8_t>((total + count / 2) / count);
      }
    }
  }
  return out;
}

ToyPatchEncoder::ToyPatchEncoder(int width, std::uint64_t seed) : width_(width) {
  if (width < 1) throw InvalidArgument("encoder width must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0 / kPatchSize);
  projection_.resize(static_cast<std::size_t>(width) * kPatchSize * kPatchSize);
  for (double& v : projection_) v = dist(rng);
}

std::vector<double> ToyPatchEncoder::encode(const Image& patch) const {
  constexpr int n = kPatchSize;
  std::vector<double> gray(static_cast<std::size_t>(n) * n);
  for (int y = 0; y < n; ++y) {
    const int sy = std::min(patch.height - 1, (2 * y + 1) * patch.height / (2 * n));
    for (int x = 0; x < n; ++x) {
      const int sx = std::min(patch.width - 1, (2 * x + 1) * patch.width / (2 * n));
      double s = 0.0;
      for (int c = 0; c < patch.channels; ++c) s += patch.at(sx, sy, c);
      gray[static_cast<std::size_t>(y) * n + x] = s / (255.0 * patch.channels);
    }
  }
  std::vector<double> out(static_cast<std::size_t>(width_), 0.0);
  double norm = 0.0;
  for (int i = 0; i < width_; ++i) {
    double s = 0.0;
    for (int j = 0; j < n * n; ++j) s += projection_[static_cast<std::size_t>(i) * n * n + j] * gray[j];
    out[i] = s;
    norm += s * s;
  }
  if (norm > 0.0) {
    norm = std::sqrt(norm);
    for (double& v : out) v /= norm;
  }
  return out;
}

ExpressionCoefficients::ExpressionCoefficients(std::vector<double> values)
    : values_(std::move(values)) {
  if (values_.size() != kExpressionCoefficients) {
    throw ShapeMismatch("expected 51 expression coefficients, got " +
                        std::to_string(values_.size()));
  }
  for (double v : values_) {
    if (!(v >= 0.0 && v <= 1.0)) throw InvalidArgument("expression coefficient outside [0,1]");
  }
}

ExpressionProjection ExpressionProjection::init(int width, std::mt19937_64& rng, bool requires_grad) {
  auto gaussian = [&](Shape s, double sd) {
    std::normal_distribution<double> dist(0.0, sd);
    std::vector<double> v(shape_numel(s));
    for (double& x : v) x = dist(rng);
    return Tensor::create(std::move(s), std::move(v), requires_grad);
  };
  ExpressionProjection p;
  p.w_coeff = gaussian({kExpressionCoefficients, width}, 1.0);
  p.b_coeff = Tensor::zeros({width}, requires_grad);
  p.w_eye = gaussian({width, width}, 1.0);
  p.b_eye = Tensor::zeros({width}, requires_grad);
  p.w_mouth = gaussian({width, width}, 1.0);
  p.b_mouth = Tensor::zeros({width}, requires_grad);
  return p;
}

NamedTensors ExpressionProjection::named(const std::string& prefix) const {
  return {{prefix + ".w_coeff", w_coeff}, {prefix + ".b_coeff", b_coeff},
          {prefix + ".w_eye", w_eye},     {prefix + ".b_eye", b_eye},
          {prefix + ".w_mouth", w_mouth}, {prefix + ".b_mouth", b_mouth}};
}

TokenSequence assemble_expression_features(const ExpressionCoefficients& coeffs,
                                           const Image& eye_patch, const Image& mouth_patch,
                                           const ToyPatchEncoder& encoder,
                                           const ExpressionProjection& proj) {
  const int d = proj.width();
  if (encoder.width() != d || proj.w_coeff.shape() != Shape{kExpressionCoefficients, d}) {
    throw ShapeMismatch("expression projection width " + std::to_string(d) +
                        " vs encoder width " + std::to_string(encoder.width()));
  }
  const Tensor c = Tensor::create({1, kExpressionCoefficients}, coeffs.values());
  const Tensor eye = Tensor::create({1, d}, encoder.encode(eye_patch));
  const Tensor mouth = Tensor::create({1, d}, encoder.encode(mouth_patch));
  return TokenSequence(ops::concat({ops::linear(c, proj.w_coeff, proj.b_coeff),
                                    ops::linear(eye, proj.w_eye, proj.b_eye),
                                    ops::linear(mouth, proj.w_mouth, proj.b_mouth)},
                                   0));
}

}  // namespace skattn
