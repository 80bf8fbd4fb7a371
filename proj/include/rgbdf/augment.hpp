#pragma once

#include <array>
#include <cmath>
#include <utility>

#include "rgbdf/ops.hpp"
#include "rgbdf/random.hpp"

namespace rgbdf {

/// Condition augmentation settings. Defaults disable every transform.
struct AugmentConfig {
  double blur_prob = 0.0;
  double blur_sigma_max = 0.6;
  double depth_noise_sigma_max = 0.0;
  std::pair<double, double> scale_range{1.0, 1.0};
  int shift_range = 0;  ///< max |offset| in pixels, per axis
  std::uint64_t seed = 0;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (!(blur_prob >= 0.0 && blur_prob <= 1.0)) v.push_back("blur_prob must lie in [0,1]");
    if (!(blur_sigma_max >= 0.0)) v.push_back("blur_sigma_max must be >= 0");
    if (!(depth_noise_sigma_max >= 0.0)) v.push_back("depth_noise_sigma_max must be >= 0");
    if (!(scale_range.first > 0.0 && scale_range.first <= scale_range.second)) v.push_back("scale_range must be 0 < lo <= hi");
    if (shift_range < 0) v.push_back("shift_range must be >= 0");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid augment config:";
    for (const auto& s : v) msg += " [" + s + "]";
    throw ConfigError(msg);
  }

  bool identity() const {
    return blur_prob == 0.0 && depth_noise_sigma_max == 0.0 && scale_range == std::pair{1.0, 1.0} && shift_range == 0;
  }
};

/// Normalized 3x3 Gaussian, row-major. sigma = 0 gives the delta kernel.
inline std::array<double, 9> gaussian_kernel3(double sigma) {
  if (!(sigma >= 0.0)) throw InvalidArgument("blur sigma must be >= 0, got " + std::to_string(sigma));
  std::array<double, 9> k{};
  if (sigma == 0.0) {
    k[4] = 1.0;
    return k;
  }
  double sum = 0.0;
  for (int y = -1; y <= 1; ++y)
    for (int x = -1; x <= 1; ++x) sum += k[(y + 1) * 3 + x + 1] = std::exp(-(x * x + y * y) / (2.0 * sigma * sigma));
  for (auto& v : k) v /= sum;
  return k;
}

namespace detail {
inline Index reflect(Index i, Index n) {
  if (n == 1) return 0;
  if (i < 0) return -i;
  if (i >= n) return 2 * n - 2 - i;
  return i;
}
}  // namespace detail

/// Blurs every channel of a [C,H,W] image with the 3x3 Gaussian; reflect padding.
template <class T>
Tensor<T> rgb_blur(const Tensor<T>& img, double sigma) {
  const auto k = gaussian_kernel3(sigma);
  if (img.rank() != 3) throw InvalidArgument("rgb_blur expects [C,H,W], got " + shape_str(img.shape()));
  if (sigma == 0.0) return img;
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  Tensor<T> out(img.shape());
  for (Index ch = 0; ch < c; ++ch)
    for (Index y = 0; y < h; ++y)
      for (Index x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += k[(dy + 1) * 3 + dx + 1] * img.at(ch, detail::reflect(y + dy, h), detail::reflect(x + dx, w));
        out.at(ch, y, x) = static_cast<T>(acc);
      }
  return out;
}

/// d + N(0, sigma^2) per element; not clipped.
template <class T>
Tensor<T> depth_noise(const Tensor<T>& d, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw InvalidArgument("depth noise sigma must be >= 0, got " + std::to_string(sigma));
  if (sigma == 0.0) return d;
  Rng rng(seed);
  Tensor<T> out = d;
  for (auto& v : out.values()) v = static_cast<T>(v + sigma * rng.normal());
  return out;
}

/// Zoom about the image centre followed by an integer translation.
struct ScaleShift {
  double scale = 1.0;
  Index dx = 0, dy = 0;
};

inline ScaleShift draw_scale_shift(const AugmentConfig& cfg, Rng& rng) {
  ScaleShift s;
  const auto [lo, hi] = cfg.scale_range;
  if (!(lo > 0.0 && lo <= hi)) throw InvalidArgument("scale_range must be 0 < lo <= hi");
  s.scale = lo == hi ? lo : rng.uniform(lo, hi);
  if (cfg.shift_range > 0) {
    s.dx = rng.integer(-cfg.shift_range, cfg.shift_range);
    s.dy = rng.integer(-cfg.shift_range, cfg.shift_range);
  }
  return s;
}

/// Applies `xf` to a [C,H,W] image; vacated pixels take `fill`.
template <class T>
Tensor<T> apply_scale_shift(const Tensor<T>& img, const ScaleShift& xf, ops::Interp mode, T fill) {
  if (img.rank() != 3) throw InvalidArgument("scale/shift expects [C,H,W], got " + shape_str(img.shape()));
  if (xf.scale == 1.0 && xf.dx == 0 && xf.dy == 0) return img;
  const Index c = img.dim(0), h = img.dim(1), w = img.dim(2);
  auto src = [&](Index o, Index n, Index d) { return (o + 0.5 - n / 2.0 - d) / xf.scale + n / 2.0 - 0.5; };
  Tensor<T> out(img.shape(), fill);
  for (Index y = 0; y < h; ++y) {
    const double sy = src(y, h, xf.dy);
    for (Index x = 0; x < w; ++x) {
      const double sx = src(x, w, xf.dx);
      if (mode == ops::Interp::nearest) {
        const auto iy = static_cast<Index>(std::floor(sy + 0.5)), ix = static_cast<Index>(std::floor(sx + 0.5));
        if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
        for (Index ch = 0; ch < c; ++ch) out.at(ch, y, x) = img.at(ch, iy, ix);
      } else {
        if (sy < -0.5 || sy > h - 0.5 || sx < -0.5 || sx > w - 0.5) continue;
        const double cy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
        const double cx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
        const auto y0 = static_cast<Index>(cy), x0 = static_cast<Index>(cx);
        const Index y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
        const double fy = cy - y0, fx = cx - x0;
        for (Index ch = 0; ch < c; ++ch)
          out.at(ch, y, x) = static_cast<T>((1 - fy) * ((1 - fx) * img.at(ch, y0, x0) + fx * img.at(ch, y0, x1)) +
                                            fy * ((1 - fx) * img.at(ch, y1, x0) + fx * img.at(ch, y1, x1)));
      }
    }
  }
  return out;
}

enum class Modality { rgb, depth, rgbd };

/// Background in normalized units; RGB and depth share it.
inline constexpr double kBackground = -1.0;

/// Random scale/shift of a [C,H,W] image. RGB channels are resampled
/// bilinearly, depth nearest. Equal seeds give equal transforms, so calling
/// this on each modality of a pair with one seed transforms them jointly.
template <class T>
Tensor<T> random_scale_shift(const Tensor<T>& img, Modality m, const AugmentConfig& cfg, std::uint64_t seed) {
  Rng rng(seed);
  const auto xf = draw_scale_shift(cfg, rng);
  const T bg = static_cast<T>(kBackground);
  if (m == Modality::rgb) return apply_scale_shift(img, xf, ops::Interp::bilinear, bg);
  if (m == Modality::depth) return apply_scale_shift(img, xf, ops::Interp::nearest, bg);
  if (img.rank() != 3 || img.dim(0) != 4) throw InvalidArgument("rgbd image must be [4,H,W], got " + shape_str(img.shape()));
  const Index hw = img.dim(1) * img.dim(2);
  Tensor<T> rgb({3, img.dim(1), img.dim(2)}), d({1, img.dim(1), img.dim(2)});
  std::copy_n(img.data(), 3 * hw, rgb.data());
  std::copy_n(img.data() + 3 * hw, hw, d.data());
  rgb = apply_scale_shift(rgb, xf, ops::Interp::bilinear, bg);
  d = apply_scale_shift(d, xf, ops::Interp::nearest, bg);
  Tensor<T> out(img.shape());
  std::copy_n(rgb.data(), 3 * hw, out.data());
  std::copy_n(d.data(), hw, out.data() + 3 * hw);
  return out;
}

/// Augmented training pair: the condition gets blur/noise, and both get the
/// same scale/shift.
template <class T>
struct AugmentedPair {
  Tensor<T> condition;
  Tensor<T> target;
};

/// `cond` is [3,H,W] RGB or [4,H,W] RGB-D; `target` is [1,H',W'] depth (may be
/// empty). A target of a different size gets the shift rescaled to its grid.
template <class T>
AugmentedPair<T> augment_pair(const Tensor<T>& cond, const Tensor<T>& target, const AugmentConfig& cfg,
                              std::uint64_t seed) {
  cfg.validate();
  if (cond.rank() != 3 || (cond.dim(0) != 3 && cond.dim(0) != 4))
    throw InvalidArgument("condition must be [3|4,H,W], got " + shape_str(cond.shape()));
  Rng rng(seed);
  const bool blur = rng.bernoulli(cfg.blur_prob);
  const double blur_sigma = rng.uniform(0.0, cfg.blur_sigma_max);
  const double noise_sigma = rng.uniform(0.0, cfg.depth_noise_sigma_max);
  const std::uint64_t noise_seed = rng.engine()();
  const std::uint64_t xf_seed = rng.engine()();

  const Index h = cond.dim(1), w = cond.dim(2), hw = h * w;
  Tensor<T> c = cond;
  if (blur && blur_sigma > 0.0) {
    Tensor<T> rgb({3, h, w});
    std::copy_n(c.data(), 3 * hw, rgb.data());
    rgb = rgb_blur(rgb, blur_sigma);
    std::copy_n(rgb.data(), 3 * hw, c.data());
  }
  if (c.dim(0) == 4 && noise_sigma > 0.0) {
    Tensor<T> d({1, h, w});
    std::copy_n(c.data() + 3 * hw, hw, d.data());
    d = depth_noise(d, noise_sigma, noise_seed);
    std::copy_n(d.data(), hw, c.data() + 3 * hw);
  }
  Rng xr(xf_seed);
  const auto xf = draw_scale_shift(cfg, xr);
  AugmentedPair<T> out{random_scale_shift(c, c.dim(0) == 4 ? Modality::rgbd : Modality::rgb, cfg, xf_seed), target};
  if (!target.empty()) {
    if (target.rank() != 3) throw InvalidArgument("target must be [1,H,W], got " + shape_str(target.shape()));
    auto txf = xf;
    txf.dx = static_cast<Index>(std::llround(static_cast<double>(xf.dx) * target.dim(2) / w));
    txf.dy = static_cast<Index>(std::llround(static_cast<double>(xf.dy) * target.dim(1) / h));
    out.target = apply_scale_shift(target, txf, ops::Interp::nearest, static_cast<T>(kBackground));
  }
  return out;
}

/// Blur (gated by blur_prob), ungated depth noise, then joint scale/shift of a [4,H,W] RGB-D condition.
template <class T>
Tensor<T> apply_sr_condition_augment(const Tensor<T>& rgbd, const AugmentConfig& cfg, std::uint64_t seed) {
  if (rgbd.rank() != 3 || rgbd.dim(0) != 4) throw InvalidArgument("rgbd condition must be [4,H,W], got " + shape_str(rgbd.shape()));
  return augment_pair(rgbd, Tensor<T>(), cfg, seed).condition;
}

}  // namespace rgbdf
