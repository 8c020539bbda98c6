#pragma once

#include <vector>

#include "skattn/tensor.hpp"

namespace skattn {

struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alpha_bars;  // cumulative products of (1 - beta)

  /// Betas linearly spaced from beta_start to beta_end over `steps` steps.
  static NoiseSchedule linear(int steps = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  /// Throws StepOutOfRange unless 0 <= t < steps.
  double alpha_bar(int t) const;
};

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) noise. Throws StepOutOfRange, ShapeMismatch.
Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& schedule);

struct WeightedLoss {
  Tensor total;  // scalar, differentiable
  double mean_term = 0.0;
  double masked_term = 0.0;
};

/// L = (z - z_hat)^2 elementwise;
/// total = mean(L) + sum(M L) * (1000 - timestep) / 1000 / (sum(M) + eps_norm).
/// `mask` is shaped like z or [1,H,W] (broadcast over channels; sum(M) counts
/// the broadcast elements). Throws ShapeMismatch, StepOutOfRange.
WeightedLoss weighted_loss(const Tensor& z, const Tensor& z_hat, const Tensor& mask,
                           double timestep, double eps_norm);

/// Decreasing timesteps round(start * (steps - i) / steps), i = 0..steps-1,
/// with repeats removed. The last update jumps to the clean sample.
std::vector<int> ddim_timesteps(int start, int steps);

/// One deterministic DDIM update from t to t_prev (-1 means clean).
/// Returns the x0 estimate through `x0_out` when non-null.
std::vector<double> ddim_update(std::span<const double> x_t, std::span<const double> eps, int t,
                                int t_prev, const NoiseSchedule& schedule, bool clip_x0,
                                std::vector<double>* x0_out = nullptr);

}  // namespace skattn
