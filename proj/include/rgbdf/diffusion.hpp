#pragma once

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <vector>

#include "rgbdf/autograd.hpp"
#include "rgbdf/random.hpp"
#include "rgbdf/schedule.hpp"

namespace rgbdf {

enum class Weighting { simple, p2 };
enum class VarianceMode { fixed, learned };

/// Network prediction as plain tensors (sampling, evaluation).
template <class T>
struct DenoiserOutput {
  Tensor<T> eps;
  std::optional<Tensor<T>> v;  ///< present iff variance is learned, values in [0,1]
};

/// Network prediction inside an autograd graph (training). `v` is undefined
/// for fixed variance.
template <class T>
struct ModelOutput {
  Var<T> eps;
  Var<T> v;
};

template <class T>
struct Gaussian {
  Tensor<T> mean;
  Tensor<T> variance;
  Tensor<T> log_variance;
};

/// Noisy batch fed to the denoiser. `t` holds one timestep per sample.
template <class T>
struct DiffusionState {
  Tensor<T> xt;
  std::vector<int> t;
  Tensor<T> condition;  ///< empty when unconditional
};

namespace detail {

inline Index per_sample(const Shape& s) {
  if (s.empty() || s[0] == 0) throw InvalidArgument("batched tensor needs a non-empty leading dimension");
  return numel(s) / s[0];
}

inline void check_batch_t(const std::vector<int>& ts, Index n, const NoiseSchedule& s) {
  if (static_cast<Index>(ts.size()) != n)
    throw InvalidArgument("expected " + std::to_string(n) + " timesteps, got " + std::to_string(ts.size()));
  for (int t : ts) s.check_index(t);
}

inline double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }
inline double normal_sf(double x) { return 0.5 * std::erfc(x / std::numbers::sqrt2); }
inline double normal_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi); }

/// Value and partial derivatives with respect to the model mean and log-variance.
struct ElemLoss {
  double value;
  double d_mean;
  double d_logvar;
};

inline ElemLoss normal_kl_elem(double m1, double lv1, double m2, double lv2) {
  const double d = m1 - m2;
  const double inv = std::exp(-lv2);
  const double r = std::exp(lv1 - lv2);
  return {0.5 * (-1.0 + lv2 - lv1 + r + d * d * inv), -d * inv, 0.5 * (1.0 - r - d * d * inv)};
}

/// Negative log-likelihood of x under N(mean, exp(logvar)) integrated over
/// the 8-bit bin containing x; the outermost bins extend to infinity.
inline ElemLoss discretized_nll_elem(double x, double mean, double logvar) {
  constexpr double half_bin = 1.0 / 255.0;
  constexpr double floor_p = 1e-12;
  const double s = std::exp(-0.5 * logvar);
  const double c = x - mean;
  const double a = s * (c + half_bin);
  const double b = s * (c - half_bin);
  double p, da = 0.0, db = 0.0;
  if (x < -0.999) {
    p = normal_cdf(a);
    da = normal_pdf(a);
  } else if (x > 0.999) {
    p = normal_sf(b);
    db = -normal_pdf(b);
  } else {
    p = b > 0.0 ? normal_sf(b) - normal_sf(a) : normal_cdf(a) - normal_cdf(b);
    da = normal_pdf(a);
    db = -normal_pdf(b);
  }
  if (p < floor_p) return {-std::log(floor_p), 0.0, 0.0};
  da /= p;
  db /= p;
  return {-std::log(p), s * (da + db), 0.5 * (da * a + db * b)};
}

}  // namespace detail

/// KL(N(m1, e^lv1) || N(m2, e^lv2)) in nats.
inline double normal_kl(double m1, double logvar1, double m2, double logvar2) {
  return detail::normal_kl_elem(m1, logvar1, m2, logvar2).value;
}

inline double discretized_gaussian_nll(double x, double mean, double logvar) {
  return detail::discretized_nll_elem(x, mean, logvar).value;
}

template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, int t, const Tensor<T>& eps, const NoiseSchedule& s) {
  x0.check_same(eps, "q_sample");
  s.check_index(t);
  const T a = static_cast<T>(std::sqrt(s.alpha_bar[t]));
  const T b = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[t]));
  Tensor<T> out(x0.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

/// Per-sample timesteps over the leading batch axis.
template <class T>
Tensor<T> q_sample(const Tensor<T>& x0, const std::vector<int>& ts, const Tensor<T>& eps, const NoiseSchedule& s) {
  x0.check_same(eps, "q_sample");
  const Index per = detail::per_sample(x0.shape());
  detail::check_batch_t(ts, x0.dim(0), s);
  Tensor<T> out(x0.shape());
  for (std::size_t b = 0; b < ts.size(); ++b) {
    const T a = static_cast<T>(std::sqrt(s.alpha_bar[ts[b]]));
    const T c = static_cast<T>(std::sqrt(1.0 - s.alpha_bar[ts[b]]));
    for (Index i = b * per; i < (static_cast<Index>(b) + 1) * per; ++i) out[i] = a * x0[i] + c * eps[i];
  }
  return out;
}

/// Coefficients (on x0, on xt) of the posterior mean at step t (t = 0 gives (1, 0)).
inline std::pair<double, double> posterior_coefficients(const NoiseSchedule& s, int t) {
  s.check_index(t);
  const double ab = s.alpha_bar[t], abp = s.alpha_bar_prev[t], b = s.beta[t];
  return {std::sqrt(abp) * b / (1.0 - ab), std::sqrt(s.alpha[t]) * (1.0 - abp) / (1.0 - ab)};
}

template <class T>
Gaussian<T> q_posterior(const Tensor<T>& x0, const Tensor<T>& xt, int t, const NoiseSchedule& s) {
  x0.check_same(xt, "q_posterior");
  s.check_index(t);
  if (t == 0) throw InvalidArgument("q_posterior is undefined at t=0; the first step is the decoder term");
  const auto [c1, c2] = posterior_coefficients(s, t);
  Gaussian<T> g{Tensor<T>(x0.shape()), Tensor<T>(x0.shape(), static_cast<T>(s.beta_tilde[t])),
                Tensor<T>(x0.shape(), static_cast<T>(std::log(s.beta_tilde[t])))};
  for (Index i = 0; i < x0.size(); ++i) g.mean[i] = static_cast<T>(c1 * x0[i] + c2 * xt[i]);
  return g;
}

/// Learned variance: log var = v log(beta_t) + (1 - v) log(beta_tilde_t).
template <class T>
Gaussian<T> model_variance(const Tensor<T>& v, int t, const NoiseSchedule& s) {
  s.check_index(t);
  Gaussian<T> g{{}, Tensor<T>(v.shape()), Tensor<T>(v.shape())};
  const double lb = s.log_beta[t], lbt = s.log_beta_tilde[t];
  for (Index i = 0; i < v.size(); ++i) {
    if (!(v[i] >= 0 && v[i] <= 1)) throw InvalidArgument("variance coefficient v outside [0,1]: " + std::to_string(v[i]));
    const double lv = v[i] * lb + (1.0 - v[i]) * lbt;
    g.log_variance[i] = static_cast<T>(lv);
    g.variance[i] = static_cast<T>(std::exp(lv));
  }
  return g;
}

template <class T>
Tensor<T> predict_x0_from_eps(const Tensor<T>& xt, const Tensor<T>& eps, int t, const NoiseSchedule& s, bool clip = true) {
  xt.check_same(eps, "predict_x0_from_eps");
  s.check_index(t);
  const double ra = 1.0 / std::sqrt(s.alpha_bar[t]);
  const double rb = std::sqrt(1.0 - s.alpha_bar[t]);
  Tensor<T> out(xt.shape());
  for (Index i = 0; i < out.size(); ++i) {
    double v = (xt[i] - rb * eps[i]) * ra;
    if (clip) v = std::clamp(v, -1.0, 1.0);
    out[i] = static_cast<T>(v);
  }
  return out;
}

/// The noise that maps x0 to xt at step t; what a perfect denoiser predicts.
template <class T>
Tensor<T> oracle_eps(const Tensor<T>& x0, const Tensor<T>& xt, int t, const NoiseSchedule& s) {
  x0.check_same(xt, "oracle_eps");
  s.check_index(t);
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  Tensor<T> out(x0.shape());
  for (Index i = 0; i < out.size(); ++i) out[i] = static_cast<T>((xt[i] - a * x0[i]) / b);
  return out;
}

struct StepOptions {
  /// Form the mean from the clipped x0 estimate instead of the raw noise form.
  bool clip_x0 = false;
};

/// One reverse step: mean + sigma_t * z, with z ignored at t = 0.
template <class T>
Tensor<T> p_step(const Tensor<T>& xt, int t, const DenoiserOutput<T>& out, const NoiseSchedule& s, const Tensor<T>& z,
                 StepOptions opt = {}) {
  xt.check_same(out.eps, "p_step");
  if (t > 0) xt.check_same(z, "p_step noise");
  s.check_index(t);
  Tensor<T> mean(xt.shape());
  if (opt.clip_x0) {
    const auto x0 = predict_x0_from_eps(xt, out.eps, t, s, true);
    const auto [c1, c2] = posterior_coefficients(s, t);
    for (Index i = 0; i < mean.size(); ++i) mean[i] = static_cast<T>(c1 * x0[i] + c2 * xt[i]);
  } else {
    const double ra = 1.0 / std::sqrt(s.alpha[t]);
    const double k = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
    for (Index i = 0; i < mean.size(); ++i) mean[i] = static_cast<T>(ra * (xt[i] - k * out.eps[i]));
  }
  if (t == 0) return mean;
  if (out.v) {
    out.v->check_same(xt, "p_step variance");
    const auto var = model_variance(*out.v, t, s);
    for (Index i = 0; i < mean.size(); ++i) mean[i] += std::exp(T(0.5) * var.log_variance[i]) * z[i];
  } else {
    const T sigma = static_cast<T>(std::sqrt(s.beta[t]));
    for (Index i = 0; i < mean.size(); ++i) mean[i] += sigma * z[i];
  }
  return mean;
}

/// (xt, t, condition) -> prediction. All samples of the batch share t.
template <class T>
using Denoiser = std::function<DenoiserOutput<T>(const Tensor<T>& xt, int t, const Tensor<T>& condition)>;

struct SampleOptions {
  bool clip_x0 = true;
  bool clip_output = true;
};

/// Ancestral sampling from t = T-1 down to 0 starting at seeded N(0, I).
template <class T>
Tensor<T> sample_loop(const Denoiser<T>& denoiser, const Tensor<T>& condition, const Shape& shape, const NoiseSchedule& s,
                      std::uint64_t seed, SampleOptions opt = {}) {
  if (shape.size() != 4) throw InvalidArgument("sample shape must be [N,C,H,W], got " + shape_str(shape));
  if (!condition.empty()) {
    const auto& cs = condition.shape();
    if (cs.size() != 4 || cs[0] != shape[0] || cs[2] != shape[2] || cs[3] != shape[3])
      throw InvalidArgument("condition " + shape_str(cs) + " is not aligned with sample " + shape_str(shape));
  }
  Rng rng(seed);
  Tensor<T> x = rng.normal_tensor<T>(shape);
  Tensor<T> z(shape);
  for (int t = s.T - 1; t >= 0; --t) {
    auto out = denoiser(x, t, condition);
    if (!out.eps.all_finite() || (out.v && !out.v->all_finite())) throw DivergedSampling(t);
    if (t > 0) rng.fill_normal(z);
    x = p_step(x, t, out, s, z, StepOptions{opt.clip_x0});
    if (!x.all_finite()) throw DivergedSampling(t);
  }
  if (opt.clip_output)
    for (auto& v : x.values()) v = std::clamp(v, T(-1), T(1));
  return x;
}

// ---------------------------------------------------------------------------
// Losses.

/// Mean over samples of weight[b] * mean squared error of sample b.
template <class T>
Var<T> loss_weighted_mse(const Tensor<T>& eps, const Var<T>& eps_pred, std::vector<T> weights) {
  eps.check_same(eps_pred.value(), "loss");
  const Index n = eps.dim(0), per = detail::per_sample(eps.shape());
  if (static_cast<Index>(weights.size()) != n) throw InvalidArgument("loss: one weight per sample required");
  double acc = 0.0;
  for (Index b = 0; b < n; ++b) {
    double sb = 0.0;
    for (Index i = b * per; i < (b + 1) * per; ++i) {
      const double d = static_cast<double>(eps_pred.value()[i]) - eps[i];
      sb += d * d;
    }
    acc += weights[b] * sb;
  }
  const double denom = static_cast<double>(n * per);
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / denom)), {eps_pred},
                        [=, weights = std::move(weights)](Node<T>& self) {
    auto& p = *self.inputs[0];
    auto& g = p.grad_buffer();
    const T k = static_cast<T>(2.0 / denom) * self.grad[0];
    for (Index b = 0; b < n; ++b)
      for (Index i = b * per; i < (b + 1) * per; ++i) g[i] += k * weights[b] * (p.value[i] - eps[i]);
  });
}

/// Mean squared error over all elements.
template <class T>
Var<T> loss_simple(const Tensor<T>& eps, const Var<T>& eps_pred) {
  eps.check_same(eps_pred.value(), "loss_simple");
  if (eps.rank() == 0 || eps.size() == 0) throw InvalidArgument("loss_simple: empty tensors");
  return loss_weighted_mse(eps.reshaped({1, eps.size()}), reshape(eps_pred, {1, eps.size()}), std::vector<T>{T{1}});
}

inline double loss_hybrid(double simple, double vlb, double lambda_vlb) {
  if (!(lambda_vlb >= 0.0)) throw InvalidArgument("lambda_vlb must be >= 0");
  return simple + lambda_vlb * vlb;
}

template <class T>
Var<T> loss_hybrid(const Var<T>& simple, const Var<T>& vlb, double lambda_vlb) {
  if (!(lambda_vlb >= 0.0)) throw InvalidArgument("lambda_vlb must be >= 0");
  return add(simple, scale(vlb, static_cast<T>(lambda_vlb)));
}

struct VlbOptions {
  /// Only the variance head receives gradient from the bound.
  bool stop_grad_mean = true;
  /// Build the model mean from the clipped x0 estimate.
  bool clip_x0 = false;
};

namespace detail {

/// Per-element bound terms in nats plus their derivatives with respect to
/// eps_pred and v. `v` may be null (fixed variance, sigma^2 = beta_t).
template <class T>
void vlb_elements(const Tensor<T>& x0, const Tensor<T>& xt, const std::vector<int>& ts, const Tensor<T>& eps,
                  const Tensor<T>* v, const NoiseSchedule& s, bool clip, std::vector<double>& val,
                  std::vector<double>* d_eps, std::vector<double>* d_v) {
  x0.check_same(xt, "vlb");
  x0.check_same(eps, "vlb");
  if (v) x0.check_same(*v, "vlb variance");
  const Index per = per_sample(x0.shape());
  check_batch_t(ts, x0.dim(0), s);
  val.assign(static_cast<std::size_t>(x0.size()), 0.0);
  if (d_eps) d_eps->assign(val.size(), 0.0);
  if (d_v) d_v->assign(val.size(), 0.0);
  for (std::size_t b = 0; b < ts.size(); ++b) {
    const int t = ts[b];
    const double sab = std::sqrt(s.alpha_bar[t]), s1 = std::sqrt(1.0 - s.alpha_bar[t]);
    const auto [c1, c2] = posterior_coefficients(s, t);
    const double lb = s.log_beta[t], lbt = s.log_beta_tilde[t];
    for (Index i = static_cast<Index>(b) * per; i < static_cast<Index>(b + 1) * per; ++i) {
      double x0p = (xt[i] - s1 * eps[i]) / sab;
      double dx0 = -s1 / sab;
      if (clip && (x0p < -1.0 || x0p > 1.0)) {
        x0p = std::clamp(x0p, -1.0, 1.0);
        dx0 = 0.0;
      }
      double mean = x0p, dmean = dx0;
      if (t > 0) {
        mean = c1 * x0p + c2 * xt[i];
        dmean = c1 * dx0;
      }
      double lv = lb;
      if (v) {
        const double vi = (*v)[i];
        if (!(vi >= 0.0 && vi <= 1.0)) throw InvalidArgument("variance coefficient v outside [0,1]");
        lv = vi * lb + (1.0 - vi) * lbt;
      }
      const auto e = t > 0 ? normal_kl_elem(c1 * x0[i] + c2 * xt[i], lbt, mean, lv)
                           : discretized_nll_elem(x0[i], mean, lv);
      val[i] = e.value;
      if (d_eps) (*d_eps)[i] = e.d_mean * dmean;
      if (d_v) (*d_v)[i] = e.d_logvar * (lb - lbt);
    }
  }
}

}  // namespace detail

/// Bound term at each sample's timestep (KL for t >= 1, discretized decoder
/// NLL at t = 0), averaged over all elements; nats per dimension.
template <class T>
Var<T> loss_vlb_term(const Tensor<T>& x0, const Tensor<T>& xt, const std::vector<int>& ts, const ModelOutput<T>& out,
                     const NoiseSchedule& s, VlbOptions opt = {}) {
  std::vector<double> val, d_eps, d_v;
  const Tensor<T>* v = out.v.defined() ? &out.v.value() : nullptr;
  detail::vlb_elements(x0, xt, ts, out.eps.value(), v, s, opt.clip_x0, val, &d_eps, &d_v);
  double acc = 0.0;
  for (double e : val) acc += e;
  const double m = static_cast<double>(val.size());
  std::vector<Var<T>> inputs;
  const bool grad_eps = !opt.stop_grad_mean;
  if (grad_eps) inputs.push_back(out.eps);
  if (v) inputs.push_back(out.v);
  return make_result<T>(Tensor<T>({1}, static_cast<T>(acc / m)), inputs,
                        [=, d_eps = std::move(d_eps), d_v = std::move(d_v)](Node<T>& self) {
    const double g = self.grad[0] / m;
    std::size_t k = 0;
    if (grad_eps) {
      auto& gb = self.inputs[k++]->grad_buffer();
      for (Index i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(g * d_eps[i]);
    }
    if (v) {
      auto& gb = self.inputs[k]->grad_buffer();
      for (Index i = 0; i < gb.size(); ++i) gb[i] += static_cast<T>(g * d_v[i]);
    }
  });
}

/// Scalar form for a single timestep without autograd.
template <class T>
double loss_vlb_term(const Tensor<T>& x0, const Tensor<T>& xt, int t, const DenoiserOutput<T>& out,
                     const NoiseSchedule& s, bool clip_x0 = false) {
  std::vector<double> val;
  const Index n = x0.rank() == 4 ? x0.dim(0) : 1;
  const Shape bs = x0.rank() == 4 ? x0.shape() : Shape{1, x0.size()};
  const auto x0b = x0.reshaped(bs), xtb = xt.reshaped(bs), eb = out.eps.reshaped(bs);
  std::optional<Tensor<T>> vb;
  if (out.v) vb = out.v->reshaped(bs);
  detail::vlb_elements(x0b, xtb, std::vector<int>(static_cast<std::size_t>(n), t), eb, vb ? &*vb : nullptr, s, clip_x0,
                       val, nullptr, nullptr);
  double acc = 0.0;
  for (double e : val) acc += e;
  return acc / static_cast<double>(val.size());
}

/// KL(q(x_T | x0) || N(0, I)) per sample, averaged over elements; nats/dim.
template <class T>
std::vector<double> prior_kl(const Tensor<T>& x0, const NoiseSchedule& s) {
  const Index per = detail::per_sample(x0.shape());
  const double ab = s.alpha_bar[s.T - 1];
  const double lv = std::log(1.0 - ab);
  std::vector<double> out(static_cast<std::size_t>(x0.dim(0)));
  for (Index b = 0; b < x0.dim(0); ++b) {
    double acc = 0.0;
    for (Index i = b * per; i < (b + 1) * per; ++i) acc += normal_kl(std::sqrt(ab) * x0[i], lv, 0.0, 0.0);
    out[b] = acc / static_cast<double>(per);
  }
  return out;
}

template <class T>
struct VlbBatch {
  Tensor<T> x0;         ///< [N,C,H,W]
  Tensor<T> condition;  ///< may be empty
};

/// Full variational bound in bits per dimension, averaged over every sample:
/// sum over all T timesteps of the per-step terms plus the prior term.
template <class T>
double eval_vlb(const Denoiser<T>& denoiser, const std::vector<VlbBatch<T>>& data, const NoiseSchedule& s,
                std::uint64_t seed, bool clip_x0 = true) {
  if (data.empty()) throw InvalidArgument("eval_vlb: empty dataset");
  double total = 0.0;
  Index count = 0;
  std::vector<double> val;
  for (std::size_t bi = 0; bi < data.size(); ++bi) {
    const auto& batch = data[bi];
    const Index n = batch.x0.dim(0), per = detail::per_sample(batch.x0.shape());
    std::vector<double> per_sample = prior_kl(batch.x0, s);
    for (int t = 0; t < s.T; ++t) {
      Rng rng(derive_seed(seed, {bi, static_cast<std::uint64_t>(t)}));
      const auto eps = rng.normal_tensor<T>(batch.x0.shape());
      const auto xt = q_sample(batch.x0, t, eps, s);
      const auto out = denoiser(xt, t, batch.condition);
      detail::vlb_elements(batch.x0, xt, std::vector<int>(static_cast<std::size_t>(n), t), out.eps,
                           out.v ? &*out.v : nullptr, s, clip_x0, val, nullptr, nullptr);
      for (Index b = 0; b < n; ++b) {
        double acc = 0.0;
        for (Index i = b * per; i < (b + 1) * per; ++i) acc += val[i];
        per_sample[b] += acc / static_cast<double>(per);
      }
    }
    for (double v : per_sample) total += v;
    count += n;
  }
  return total / static_cast<double>(count) / std::numbers::ln2;
}

// ---------------------------------------------------------------------------
// Training objective.

struct LossConfig {
  Weighting weighting = Weighting::simple;
  VarianceMode variance = VarianceMode::fixed;
  double p2_k = 1.0;
  double p2_gamma = 1.0;
  double lambda_vlb = 1e-3;
  bool stop_grad_mean = true;
};

template <class T>
struct LossParts {
  Var<T> total;
  double simple = 0.0;  ///< unweighted noise MSE
  double vlb = 0.0;     ///< nats/dim, 0 for fixed variance
};

template <class T>
struct TrainingTarget {
  DiffusionState<T> state;
  Tensor<T> eps;
  std::function<LossParts<T>(const ModelOutput<T>&)> loss;
};

/// Draws t ~ U{0..T-1} and eps ~ N(0, I) per sample, forms x_t, and returns
/// the state together with a closure evaluating the configured loss.
template <class T>
TrainingTarget<T> training_step_target(const Tensor<T>& x0, const Tensor<T>& condition, const NoiseSchedule& s,
                                       std::uint64_t seed, const LossConfig& cfg) {
  for (T v : x0.values())
    if (!(v >= T(-1) - T(1e-6) && v <= T(1) + T(1e-6)))
      throw InvalidArgument("training target x0 outside [-1,1]: " + std::to_string(v));
  const Index n = x0.dim(0);
  Rng rng(seed);
  std::vector<int> ts(static_cast<std::size_t>(n));
  for (auto& t : ts) t = static_cast<int>(rng.integer(0, s.T - 1));
  Tensor<T> eps = rng.normal_tensor<T>(x0.shape());
  Tensor<T> xt = q_sample(x0, ts, eps, s);
  std::vector<T> weights(ts.size(), T{1});
  if (cfg.weighting == Weighting::p2)
    for (std::size_t b = 0; b < ts.size(); ++b) weights[b] = static_cast<T>(p2_weight(s, ts[b], cfg.p2_k, cfg.p2_gamma));
  TrainingTarget<T> target{{xt, ts, condition}, eps, {}};
  target.loss = [x0, xt, ts, eps, weights, &s, cfg](const ModelOutput<T>& out) {
    LossParts<T> parts;
    {
      NoGradGuard ng;
      parts.simple = loss_weighted_mse(eps, out.eps, std::vector<T>(ts.size(), T{1})).value()[0];
    }
    parts.total = loss_weighted_mse(eps, out.eps, weights);
    if (cfg.variance == VarianceMode::learned) {
      if (!out.v.defined()) throw InvalidArgument("learned variance requires a v prediction");
      auto vlb = loss_vlb_term(x0, xt, ts, out, s, VlbOptions{cfg.stop_grad_mean, false});
      parts.vlb = vlb.value()[0];
      parts.total = loss_hybrid(parts.total, vlb, cfg.lambda_vlb);
    }
    return parts;
  };
  return target;
}

}  // namespace rgbdf
