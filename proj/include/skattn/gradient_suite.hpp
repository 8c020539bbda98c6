#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace skattn {

struct GradientCase {
  std::string op;
  std::string shape;
  double max_rel_error = 0.0;
  bool passed = false;
};

/// Central-difference checks of every differentiable op and both knitted
/// attention variants on `shapes_per_op` random shapes each.
std::vector<GradientCase> run_gradient_suite(int shapes_per_op, std::uint64_t seed,
                                             double h = 1e-5, double tol = 1e-4);

}  // namespace skattn
