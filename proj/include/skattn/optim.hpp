#pragma once

#include <vector>

#include "skattn/attention.hpp"

namespace skattn {

struct AdamConfig {
  double lr_max = 5e-5;
  double lr_min = 1e-7;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int total_steps = 1000;  // cosine period
  double grad_clip = 0.0;  // global L2 norm; 0 disables
};

/// Cosine decay from lr_max (step 0) to lr_min (step >= total_steps).
double cosine_lr(const AdamConfig& config, int step);

/// Adam over a fixed parameter list; parameters without a gradient are left
/// untouched.
class Adam {
 public:
  Adam(NamedTensors params, AdamConfig config);

  /// Applies one update at the current cosine rate, clears gradients, and
  /// returns the rate used.
  double step();
  int steps_taken() const { return step_; }
  const NamedTensors& parameters() const { return params_; }
  const AdamConfig& config() const { return config_; }

  /// First and second moments plus the step counter, for checkpoints.
  NamedTensors state() const;
  void load_state(const NamedTensors& state);

 private:
  NamedTensors params_;
  AdamConfig config_;
  std::vector<std::vector<double>> m_, v_;
  int step_ = 0;
};

}  // namespace skattn
