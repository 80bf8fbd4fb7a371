#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "rgbdf/errors.hpp"

namespace rgbdf {

/// Per-timestep diffusion constants. Timesteps are indexed 0..T-1; index t
/// corresponds to step t+1 of the usual 1..T numbering.
struct NoiseSchedule {
  int T = 0;
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  std::vector<double> alpha_bar_prev;  ///< 1 at t = 0
  std::vector<double> beta_tilde;      ///< 0 at t = 0
  std::vector<double> snr;
  /// log(beta_tilde) with the t = 0 entry floored to beta_tilde[1].
  std::vector<double> log_beta_tilde;
  std::vector<double> log_beta;

  /// Builds every derived array from raw betas (each in (0,1), T >= 2).
  static NoiseSchedule from_betas(std::vector<double> betas) {
    if (betas.size() < 2) throw InvalidArgument("schedule needs T >= 2, got " + std::to_string(betas.size()));
    NoiseSchedule s;
    s.T = static_cast<int>(betas.size());
    s.beta = std::move(betas);
    const auto n = s.beta.size();
    s.alpha.resize(n);
    s.alpha_bar.resize(n);
    s.alpha_bar_prev.resize(n);
    s.beta_tilde.resize(n);
    s.snr.resize(n);
    s.log_beta.resize(n);
    s.log_beta_tilde.resize(n);
    double prod = 1.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double b = s.beta[t];
      if (!(b > 0.0 && b < 1.0))
        throw InvalidArgument("beta[" + std::to_string(t) + "] = " + std::to_string(b) + " outside (0,1)");
      s.alpha[t] = 1.0 - b;
      s.alpha_bar_prev[t] = prod;
      prod *= s.alpha[t];
      s.alpha_bar[t] = prod;
      s.beta_tilde[t] = t == 0 ? 0.0 : (1.0 - s.alpha_bar_prev[t]) / (1.0 - prod) * b;
      s.snr[t] = prod / (1.0 - prod);
      s.log_beta[t] = std::log(b);
    }
    for (std::size_t t = 0; t < n; ++t) s.log_beta_tilde[t] = std::log(s.beta_tilde[t == 0 ? 1 : t]);
    return s;
  }

  void check_index(int t) const {
    if (t < 0 || t >= T)
      throw IndexError("timestep " + std::to_string(t) + " outside [0," + std::to_string(T) + ")");
  }

  /// Human-readable list of violated invariants; empty when all hold.
  /// The terminal check (alpha_bar[T-1] < 1e-3) is included only when requested.
  std::vector<std::string> violations(bool require_terminal = true) const {
    std::vector<std::string> out;
    for (int t = 1; t < T; ++t) {
      if (!(alpha_bar[t] < alpha_bar[t - 1])) out.push_back("alpha_bar not strictly decreasing at t=" + std::to_string(t));
      if (!(snr[t] < snr[t - 1])) out.push_back("snr not strictly decreasing at t=" + std::to_string(t));
      if (beta_tilde[t] > beta[t]) out.push_back("beta_tilde > beta at t=" + std::to_string(t));
    }
    if (!(alpha_bar[0] < 1.0)) out.push_back("alpha_bar[0] must be < 1");
    if (require_terminal && !(alpha_bar[T - 1] < 1e-3))
      out.push_back("alpha_bar[T-1] = " + std::to_string(alpha_bar[T - 1]) + " is not < 1e-3");
    return out;
  }

  bool terminal_is_noise() const { return alpha_bar[T - 1] < 1e-3; }
};

inline NoiseSchedule build_cosine_schedule(int T, double s = 0.008, double max_beta = 0.999) {
  if (T < 2) throw InvalidArgument("cosine schedule needs T >= 2, got " + std::to_string(T));
  auto f = [&](double t) {
    const double c = std::cos((t / T + s) / (1.0 + s) * std::numbers::pi / 2.0);
    return c * c;
  };
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) betas[i] = std::min(1.0 - f(i + 1) / f(i), max_beta);
  return NoiseSchedule::from_betas(std::move(betas));
}

inline NoiseSchedule build_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 2) throw InvalidArgument("linear schedule needs T >= 2, got " + std::to_string(T));
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw InvalidArgument("linear schedule needs 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(T));
  for (int i = 0; i < T; ++i) betas[i] = beta_start + (beta_end - beta_start) * i / (T - 1);
  return NoiseSchedule::from_betas(std::move(betas));
}

/// 1 / (k + snr_t)^gamma.
inline double p2_weight(const NoiseSchedule& s, int t, double k = 1.0, double gamma = 1.0) {
  s.check_index(t);
  if (!(k > 0.0)) throw InvalidArgument("p2 k must be > 0");
  if (!(gamma >= 0.0)) throw InvalidArgument("p2 gamma must be >= 0");
  return std::pow(k + s.snr[t], -gamma);
}

}  // namespace rgbdf
