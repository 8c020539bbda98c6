#include "skattn/diffusion.hpp"

#include <algorithm>
#include <cmath>

#include "skattn/error.hpp"
#include "skattn/ops.hpp"

namespace skattn {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw InvalidArgument("schedule needs at least two steps");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw InvalidArgument("schedule betas must satisfy 0 < start <= end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  s.betas.resize(steps);
  s.alpha_bars.resize(steps);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    s.betas[t] = beta_start + (beta_end - beta_start) * t / (steps - 1);
    prod *= 1.0 - s.betas[t];
    s.alpha_bars[t] = prod;
  }
  return s;
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t >= steps) {
    throw StepOutOfRange("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps) + ")");
  }
  return alpha_bars[t];
}

Tensor q_sample(const Tensor& z0, int t, const Tensor& noise, const NoiseSchedule& schedule) {
  const double ab = schedule.alpha_bar(t);
  if (z0.shape() != noise.shape()) {
    throw ShapeMismatch("q_sample: z0 " + shape_str(z0.shape()) + " vs noise " + shape_str(noise.shape()));
  }
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  std::vector<double> out(z0.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0.data()[i] + b * noise.data()[i];
  return Tensor::create(z0.shape(), std::move(out));
}

WeightedLoss weighted_loss(const Tensor& z, const Tensor& z_hat, const Tensor& mask,
                           double timestep, double eps_norm) {
  if (z.shape() != z_hat.shape()) {
    throw ShapeMismatch("weighted_loss: z " + shape_str(z.shape()) + " vs z_hat " + shape_str(z_hat.shape()));
  }
  if (!(timestep >= 0.0 && timestep <= 1000.0)) {
    throw StepOutOfRange("weighted_loss: timestep outside [0, 1000]");
  }
  Tensor m = mask.detach();
  if (m.shape() != z.shape()) {
    if (z.rank() != 3 || m.rank() != 3 || m.dim(0) != 1 || m.dim(1) != z.dim(1) || m.dim(2) != z.dim(2)) {
      throw ShapeMismatch("weighted_loss: mask " + shape_str(mask.shape()) + " vs z " + shape_str(z.shape()));
    }
    std::vector<double> v;
    v.reserve(z.numel());
    for (int c = 0; c < z.dim(0); ++c) v.insert(v.end(), m.data().begin(), m.data().end());
    m = Tensor::create(z.shape(), std::move(v));
  }
  double mask_sum = 0.0;
  for (double x : m.data()) mask_sum += x;
  const double alpha = (1000.0 - timestep) / 1000.0;
  const double beta = 1.0 / (mask_sum + eps_norm);

  const Tensor diff = ops::sub(z, z_hat);
  const Tensor l = ops::mul(diff, diff);
  const Tensor mean_term = ops::mean(l);
  const Tensor masked = ops::scale(ops::sum(ops::mul(m, l)), alpha * beta);
  WeightedLoss out;
  out.total = ops::add(mean_term, masked);
  out.mean_term = mean_term.item();
  out.masked_term = masked.item();
  return out;
}

std::vector<int> ddim_timesteps(int start, int steps) {
  if (steps < 1) throw InvalidArgument("ddim: steps must be >= 1");
  if (start < 0) throw StepOutOfRange("ddim: negative start");
  std::vector<int> ts;
  for (int i = 0; i < steps; ++i) {
    const int t = static_cast<int>(std::lround(static_cast<double>(start) * (steps - i) / steps));
    if (ts.empty() || t != ts.back()) ts.push_back(t);
  }
  return ts;
}

std::vector<double> ddim_update(std::span<const double> x_t, std::span<const double> eps, int t,
                                int t_prev, const NoiseSchedule& schedule, bool clip_x0,
                                std::vector<double>* x0_out) {
  const double ab = schedule.alpha_bar(t);
  const double ab_prev = t_prev < 0 ? 1.0 : schedule.alpha_bar(t_prev);
  const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
  const double pa = std::sqrt(ab_prev), pb = std::sqrt(1.0 - ab_prev);
  std::vector<double> out(x_t.size());
  if (x0_out) x0_out->resize(x_t.size());
  for (std::size_t i = 0; i < x_t.size(); ++i) {
    double x0 = (x_t[i] - sb * eps[i]) / sa;
    if (clip_x0) x0 = std::clamp(x0, -1.0, 1.0);
    // Re-derive the noise direction from the (possibly clipped) x0.
    const double e = clip_x0 ? (x_t[i] - sa * x0) / sb : eps[i];
    out[i] = pa * x0 + pb * e;
    if (x0_out) (*x0_out)[i] = x0;
  }
  return out;
}

}  // namespace skattn
