#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "rgbdf/autograd.hpp"
#include "rgbdf/config.hpp"

namespace rgbdf {

/// Learning rate at optimizer step `step` (0-based).
/// cosine_restart_warmup: linear ramp alpha*step/W for step < W, then cosine
/// decay from alpha to min_ratio*alpha over each cycle, restarting at alpha.
inline double learning_rate_at(const OptimizerConfig& opt, const LrScheduleConfig& s, long step) {
  const double a = opt.learning_rate;
  if (s.kind == LrScheduleKind::none) return a;
  if (step < s.warmup_steps) return a * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const long p = (step - s.warmup_steps) % s.cycle_length;
  const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(p) / static_cast<double>(s.cycle_length)));
  return a * (s.min_ratio + (1.0 - s.min_ratio) * c);
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::vector<Var<T>>& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params)
    for (T g : p.grad().values()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const auto f = static_cast<T>(max_norm / (norm + 1e-12));
    for (auto& p : params)
      for (auto& g : p.node()->grad_buffer().values()) g *= f;
  }
  return norm;
}

template <class T>
class Adam {
 public:
  Adam(std::vector<Var<T>> params, OptimizerConfig cfg) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void step(double lr) {
    ++t_;
    const double b1 = cfg_.beta1, b2 = cfg_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_)), c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = params_[i].node()->value;
      const auto& g = params_[i].grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (Index k = 0; k < w.size(); ++k) {
        const double gk = g[k];
        m[k] = static_cast<T>(b1 * m[k] + (1.0 - b1) * gk);
        v[k] = static_cast<T>(b2 * v[k] + (1.0 - b2) * gk * gk);
        const double mh = m[k] / c1, vh = v[k] / c2;
        w[k] = static_cast<T>(w[k] - lr * mh / (std::sqrt(vh) + cfg_.eps));
      }
    }
  }

  long steps() const { return t_; }
  void set_steps(long t) { t_ = t; }
  std::vector<Tensor<T>>& first_moments() { return m_; }
  std::vector<Tensor<T>>& second_moments() { return v_; }

 private:
  std::vector<Var<T>> params_;
  OptimizerConfig cfg_;
  std::vector<Tensor<T>> m_, v_;
  long t_ = 0;
};

}  // namespace rgbdf
