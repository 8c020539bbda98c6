#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "skattn/tensor.hpp"

namespace skattn {

struct GradCheckEntry {
  std::string name;
  std::size_t elements = 0;
  double max_abs_error = 0.0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;

  double max_rel_error() const;
  bool passed() const { return max_rel_error() < tolerance; }
  const GradCheckEntry* find(const std::string& name) const;
};

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences (f(x+h) - f(x-h)) / 2h for every element of every input that
/// requires grad. Inputs that do not require grad are skipped and do not
/// appear in the report. The per-element relative error is
/// |autodiff - numeric| / max(|autodiff|, |numeric|, 1e-6).
///
/// Failures are reported, not thrown. Input values are restored on return.
GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& inputs,
                           double h = 1e-5, double tol = 1e-4);

}  // namespace skattn
