#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "rgbdf/diffusion.hpp"

namespace rgbdf {

inline constexpr double kMaskThreshold = -0.95;

template <class T>
double mae(const Tensor<T>& gt, const Tensor<T>& pred) {
  require_same_shape(gt, pred, "mae");
  if (gt.empty()) throw InvalidArgument("mae of empty tensors");
  double acc = 0.0;
  for (Index i = 0; i < gt.size(); ++i) acc += std::abs(static_cast<double>(gt[i]) - pred[i]);
  return acc / static_cast<double>(gt.size()) * 1e3;
}

template <class T>
double mse(const Tensor<T>& gt, const Tensor<T>& pred) {
  require_same_shape(gt, pred, "mse");
  if (gt.empty()) throw InvalidArgument("mse of empty tensors");
  double acc = 0.0;
  for (Index i = 0; i < gt.size(); ++i) {
    const double d = static_cast<double>(gt[i]) - pred[i];
    acc += d * d;
  }
  return acc / static_cast<double>(gt.size()) * 1e3;
}

/// Foreground mask y > phi.
template <class T>
std::vector<bool> foreground_mask(const Tensor<T>& d, double phi = kMaskThreshold) {
  std::vector<bool> m(static_cast<std::size_t>(d.size()));
  for (Index i = 0; i < d.size(); ++i) m[static_cast<std::size_t>(i)] = d[i] > phi;
  return m;
}

/// Intersection over union of the foreground masks; 1 when both are empty.
template <class T>
double iou(const Tensor<T>& gt, const Tensor<T>& pred, double phi = kMaskThreshold) {
  require_same_shape(gt, pred, "iou");
  Index inter = 0, uni = 0;
  for (Index i = 0; i < gt.size(); ++i) {
    const bool a = gt[i] > phi, b = pred[i] > phi;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

struct EvalReport {
  double mae = 0.0;
  double mse = 0.0;
  double iou = 0.0;
  double vlb_bits_per_dim = std::numeric_limits<double>::quiet_NaN();  ///< NaN when not computed
  Index n_samples = 0;

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    if (n_samples < 1) v.push_back("n_samples must be >= 1");
    if (!(iou >= 0.0 && iou <= 1.0)) v.push_back("iou outside [0,1]");
    if (!(mae >= 0.0) || !(mse >= 0.0)) v.push_back("mae/mse must be >= 0");
    return v;
  }

  /// Flat `key<TAB>value` lines.
  std::string to_text() const {
    std::ostringstream os;
    os.precision(10);
    os << "mae\t" << mae << "\nmse\t" << mse << "\niou\t" << iou << "\nvlb_bits_per_dim\t" << vlb_bits_per_dim
       << "\nn_samples\t" << n_samples << "\n";
    return os.str();
  }

  static EvalReport from_text(const std::string& text) {
    EvalReport r;
    std::istringstream is(text);
    std::string key, value;
    while (std::getline(is, key, '\t') && std::getline(is, value)) {
      if (key == "mae") r.mae = std::stod(value);
      else if (key == "mse") r.mse = std::stod(value);
      else if (key == "iou") r.iou = std::stod(value);
      else if (key == "vlb_bits_per_dim") r.vlb_bits_per_dim = std::stod(value);
      else if (key == "n_samples") r.n_samples = std::stoll(value);
      else throw FormatError("unknown report key '" + key + "'", 0);
    }
    return r;
  }

  void write(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write " + path);
    f << to_text();
  }

  /// One log line: step, mae, mse, iou, vlb.
  std::string log_line(long step) const {
    std::ostringstream os;
    os.precision(8);
    os << step << '\t' << mae << '\t' << mse << '\t' << iou << '\t' << vlb_bits_per_dim;
    return os.str();
  }
};

/// Running means of the three sample metrics, accumulated per sample in order.
class MetricAccumulator {
 public:
  /// gt, pred: [N,1,H,W] or a single [1,H,W] map.
  template <class T>
  void add(const Tensor<T>& gt, const Tensor<T>& pred) {
    require_same_shape(gt, pred, "metrics");
    const Index n = gt.rank() == 4 ? gt.dim(0) : 1;
    const Index per = gt.size() / n;
    for (Index b = 0; b < n; ++b) {
      Tensor<T> g({per}), p({per});
      std::copy_n(gt.data() + b * per, per, g.data());
      std::copy_n(pred.data() + b * per, per, p.data());
      mae_ += mae(g, p);
      mse_ += mse(g, p);
      iou_ += iou(g, p);
      ++n_;
    }
  }

  EvalReport report() const {
    if (n_ == 0) throw InvalidArgument("no samples evaluated");
    EvalReport r;
    r.mae = mae_ / n_;
    r.mse = mse_ / n_;
    r.iou = iou_ / n_;
    r.n_samples = n_;
    return r;
  }

 private:
  double mae_ = 0.0, mse_ = 0.0, iou_ = 0.0;
  Index n_ = 0;
};

template <class T>
struct EvalBatch {
  Tensor<T> x0;         ///< ground truth [N,1,H,W]
  Tensor<T> condition;  ///< [N,C,H,W]
};

struct EvalOptions {
  bool compute_vlb = true;
  SampleOptions sampling{};
};

/// Samples one prediction per item with `sample_loop` (seed derived per batch),
/// scores it against the ground truth and optionally adds the VLB.
/// `predictions`, when given, receives the sampled maps.
template <class T>
EvalReport evaluate(const Denoiser<T>& denoiser, const std::vector<EvalBatch<T>>& data, const NoiseSchedule& s,
                    std::uint64_t seed, const EvalOptions& opt = {}, std::vector<Tensor<T>>* predictions = nullptr) {
  if (data.empty()) throw InvalidArgument("evaluate: empty dataset");
  MetricAccumulator acc;
  for (std::size_t bi = 0; bi < data.size(); ++bi) {
    const auto& b = data[bi];
    auto pred = sample_loop(denoiser, b.condition, b.x0.shape(), s, derive_seed(seed, {0, bi}), opt.sampling);
    acc.add(b.x0, pred);
    if (predictions) predictions->push_back(std::move(pred));
  }
  EvalReport r = acc.report();
  if (opt.compute_vlb) {
    std::vector<VlbBatch<T>> vb;
    for (const auto& b : data) vb.push_back({b.x0, b.condition});
    r.vlb_bits_per_dim = eval_vlb(denoiser, vb, s, derive_seed(seed, {1}));
  }
  return r;
}

}  // namespace rgbdf
