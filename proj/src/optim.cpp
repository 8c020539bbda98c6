#include "skattn/optim.hpp"

#include <cmath>
#include <numbers>

#include "skattn/error.hpp"

namespace skattn {

double cosine_lr(const AdamConfig& c, int step) {
  if (c.total_steps <= 0 || step >= c.total_steps) return c.lr_min;
  const double progress = static_cast<double>(step) / c.total_steps;
  return c.lr_min + 0.5 * (c.lr_max - c.lr_min) * (1.0 + std::cos(std::numbers::pi * progress));
}

Adam::Adam(NamedTensors params, AdamConfig config) : params_(std::move(params)), config_(config) {
  for (const auto& [name, t] : params_) {
    if (!t.requires_grad() || !t.is_leaf()) {
      throw InvalidArgument("Adam: parameter " + name + " is not a trainable leaf");
    }
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

double Adam::step() {
  const double lr = cosine_lr(config_, step_);
  ++step_;
  double scale = 1.0;
  if (config_.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& p : params_) {
      for (double g : p.second.grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.grad_clip) scale = config_.grad_clip / norm;
  }
  const double c1 = 1.0 - std::pow(config_.beta1, step_);
  const double c2 = 1.0 - std::pow(config_.beta2, step_);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].second;
    if (!t.has_grad()) continue;
    const auto g = t.grad();
    auto x = t.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double gj = g[j] * scale;
      m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
      v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
      x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + config_.eps);
    }
    t.zero_grad();
  }
  return lr;
}

NamedTensors Adam::state() const {
  NamedTensors out;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Shape& s = params_[i].second.shape();
    out.emplace_back("adam.m." + params_[i].first, Tensor::create(s, m_[i]));
    out.emplace_back("adam.v." + params_[i].first, Tensor::create(s, v_[i]));
  }
  out.emplace_back("adam.step", Tensor::scalar(step_));
  return out;
}

void Adam::load_state(const NamedTensors& state) {
  auto find = [&](const std::string& name) -> const Tensor& {
    for (const auto& [n, t] : state) {
      if (n == name) return t;
    }
    throw InvalidArgument("Adam: missing state " + name);
  };
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const Tensor& m = find("adam.m." + params_[i].first);
    const Tensor& v = find("adam.v." + params_[i].first);
    if (m.numel() != m_[i].size() || v.numel() != v_[i].size()) {
      throw ShapeMismatch("Adam: state size mismatch for " + params_[i].first);
    }
    m_[i].assign(m.data().begin(), m.data().end());
    v_[i].assign(v.data().begin(), v.data().end());
  }
  step_ = static_cast<int>(find("adam.step").item());
}

}  // namespace skattn
