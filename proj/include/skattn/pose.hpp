#pragma once

// Driving-condition encoders: the head-pose box raster and the expression
// token sequence.

#include <array>
#include <cstdint>
#include <random>
#include <vector>

#include "skattn/attention.hpp"

namespace skattn {

using Vec3 = std::array<double, 3>;
using Vec2 = std::array<double, 2>;
using Mat3 = std::array<double, 9>;  // row-major

/// Head rotation and translation in camera space (x right, y down, z forward).
struct PoseRT {
  Mat3 rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 translation{0, 0, 0};

  /// R = Rz(roll) * Rx(pitch) * Ry(yaw); angles in radians.
  static PoseRT from_angles(double yaw, double pitch, double roll, Vec3 translation);

  /// Throws InvalidRotation unless R^T R = I and det R = +1 within 1e-9.
  void validate() const;
};

struct CameraIntrinsics {
  double fx = 1.0, fy = 1.0;
  double cx = 0.0, cy = 0.0;

  /// Focal length `focal_scale * size`, principal point at the image centre.
  static CameraIntrinsics for_image(int width, int height, double focal_scale);
  CameraIntrinsics scaled(double factor) const;
};

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

/// 8-bit interleaved image.
struct Image {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> pixels;

  static Image blank(int width, int height, int channels);
  std::uint8_t& at(int x, int y, int c = 0) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  friend bool operator==(const Image&, const Image&) = default;
};

/// RGB raster of the four coloured box edges.
using PoseImage = Image;

struct BoxHalfExtents {
  double a = 1.0;  // half width (x)
  double b = 1.4;  // half height (y)
};

/// Edge colours in drawing order: top, right, bottom, left.
using EdgeColors = std::array<Rgb, 4>;
EdgeColors default_edge_colors();

std::vector<Vec3> rt_transform(const std::vector<Vec3>& points, const PoseRT& pose);

/// u = fx x/z + cx, v = fy y/z + cy. Throws BehindCamera if any z <= 0.
std::vector<Vec2> perspective_project(const std::vector<Vec3>& points, const CameraIntrinsics& cam);

/// Corners (-a,-b), (a,-b), (a,b), (-a,b) at z = 0 in the head frame:
/// top-left, top-right, bottom-right, bottom-left.
std::array<Vec3, 4> canonical_box_corners(const BoxHalfExtents& box);

/// Projected corners rounded to pixels with floor(u + 0.5).
std::array<std::array<int, 2>, 4> box_corner_pixels(const PoseRT& pose, const CameraIntrinsics& cam,
                                                    const BoxHalfExtents& box);

/// Integer midpoint line from (x0,y0) to (x1,y1) inclusive; off-image pixels are skipped.
void draw_line(Image& image, int x0, int y0, int x1, int y1, Rgb color);

/// Black background, 1-pixel edges drawn top, right, bottom, left; later edges
/// overwrite shared corner pixels. Throws BehindCamera or DegenerateProjection
/// (two corners rounding to the same pixel).
PoseImage rasterize_box_edges(const PoseRT& pose, const CameraIntrinsics& cam,
                              const BoxHalfExtents& box, int width, int height,
                              const EdgeColors& colors = default_edge_colors());

/// [3,H,W] tensor with values in [0,1].
Tensor image_to_tensor(const Image& image);

/// Box blur (clamped borders, rounded mean) with an integer radius drawn
/// uniformly from [min_radius, max_radius] by a generator seeded with `seed`.
Image random_blur_augment(const Image& patch, int min_radius, int max_radius, std::uint64_t seed);

/// Fixed random projection of a 16x16 grayscale patch, L2-normalized.
class ToyPatchEncoder {
 public:
  static constexpr int kPatchSize = 16;

  ToyPatchEncoder(int width, std::uint64_t seed);

  int width() const { return width_; }
  /// Converts to grayscale, resamples to 16x16 and projects. A zero patch
  /// maps to the zero vector (normalization skipped).
  std::vector<double> encode(const Image& patch) const;

 private:
  int width_;
  std::vector<double> projection_;  // [width, 256]
};

inline constexpr int kExpressionCoefficients = 51;

/// 51 blendshape-style coefficients in [0,1].
class ExpressionCoefficients {
 public:
  ExpressionCoefficients() : values_(kExpressionCoefficients, 0.0) {}
  /// Throws ShapeMismatch unless there are exactly 51 values, InvalidArgument
  /// if any lies outside [0,1].
  explicit ExpressionCoefficients(std::vector<double> values);

  const std::vector<double>& values() const { return values_; }
  double operator[](std::size_t i) const { return values_[i]; }

 private:
  std::vector<double> values_;
};

/// Learned maps from the coefficients (51 -> D) and the two patch embeddings (D -> D).
struct ExpressionProjection {
  Tensor w_coeff, b_coeff;
  Tensor w_eye, b_eye;
  Tensor w_mouth, b_mouth;

  static ExpressionProjection init(int width, std::mt19937_64& rng, bool requires_grad = true);
  int width() const { return w_eye.dim(0); }
  NamedTensors named(const std::string& prefix) const;
};

/// [coefficients-token, eye-token, mouth-token] as a 3 x D sequence.
TokenSequence assemble_expression_features(const ExpressionCoefficients& coeffs,
                                           const Image& eye_patch, const Image& mouth_patch,
                                           const ToyPatchEncoder& encoder,
                                           const ExpressionProjection& proj);

}  // namespace skattn
