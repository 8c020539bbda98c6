#include "skattn/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "skattn/error.hpp"

namespace skattn {

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& e : entries) worst = std::max(worst, e.max_rel_error);
  return worst;
}

const GradCheckEntry* GradCheckReport::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

GradCheckReport grad_check(const std::function<Tensor()>& f,
                           const std::vector<std::pair<std::string, Tensor>>& inputs, double h,
                           double tol) {
  if (h <= 0.0) throw InvalidArgument("grad_check: h must be positive");
  GradCheckReport report;
  report.tolerance = tol;

  std::vector<std::pair<std::string, Tensor>> checked;
  for (const auto& [name, t] : inputs) {
    if (t.requires_grad()) checked.emplace_back(name, t);
  }
  for (auto& [name, t] : checked) t.zero_grad();

  std::vector<std::vector<double>> analytic;
  {
    Graph graph;
    GraphScope scope(graph);
    const Tensor loss = f();
    graph.backward(loss);
    for (const auto& [name, t] : checked) {
      analytic.emplace_back(t.has_grad() ? std::vector<double>(t.grad().begin(), t.grad().end())
                                         : std::vector<double>(t.numel(), 0.0));
    }
  }

  for (std::size_t ti = 0; ti < checked.size(); ++ti) {
    Tensor t = checked[ti].second;
    auto values = t.mutable_data();
    GradCheckEntry entry;
    entry.name = checked[ti].first;
    entry.elements = values.size();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + h;
      const double plus = f().item();
      values[i] = saved - h;
      const double minus = f().item();
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * h);
      const double a = analytic[ti][i];
      const double err = std::abs(a - numeric);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-6});
      entry.max_abs_error = std::max(entry.max_abs_error, err);
      entry.max_rel_error = std::max(entry.max_rel_error, err / denom);
      if (std::isnan(err)) entry.max_rel_error = std::numeric_limits<double>::infinity();
    }
    report.entries.push_back(entry);
  }
  return report;
}

}  // namespace skattn
