#pragma once

#include <cmath>
#include <deque>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "rgbdf/augment.hpp"
#include "rgbdf/checkpoint.hpp"
#include "rgbdf/config.hpp"
#include "rgbdf/dataio.hpp"
#include "rgbdf/metrics.hpp"
#include "rgbdf/optim.hpp"

namespace rgbdf {

/// Items ready for a stage: `cond` is the RGB at diffusion_out (stage 1) or the
/// low-resolution RGB-D at cond_in (stage 2); `target` is depth at diffusion_out.
struct StageData {
  std::vector<std::string> ids;
  std::vector<Tensor<float>> cond;
  std::vector<Tensor<float>> target;

  Index size() const { return static_cast<Index>(ids.size()); }
};

inline StageData prepare_item(const RunConfig& cfg, const RgbdImage& x, StageData&& into = {}) {
  const Index d = cfg.diffusion_out;
  into.target.push_back(resample_depth(x.depth, d, d));
  if (cfg.stage == Stage::depth_diffusion) {
    into.cond.push_back(resample_rgb(x.rgb, d, d));
  } else {
    into.cond.push_back(resample(x, cfg.cond_in, cfg.cond_in).stacked());
  }
  return std::move(into);
}

/// Reads `split` of cfg.data_root (first `limit` items when > 0).
inline StageData load_stage_data(const RunConfig& cfg, const std::string& split, Index limit) {
  const auto m = DatasetManifest::read(cfg.data_root);
  if (m.resolution < cfg.diffusion_out)
    throw IntegrityError("dataset resolution " + std::to_string(m.resolution) + " below diffusion_out " +
                         std::to_string(cfg.diffusion_out));
  auto entries = m.split(split);
  if (limit > 0 && static_cast<Index>(entries.size()) > limit) entries.resize(static_cast<std::size_t>(limit));
  if (entries.empty()) throw IntegrityError("split '" + split + "' of " + cfg.data_root + " is empty");
  StageData out;
  for (const auto& e : entries) {
    out = prepare_item(cfg, read_sample(m, e), std::move(out));
    out.ids.push_back(e.id);
  }
  return out;
}

/// Model-facing condition for one item: optional augmentation (jointly with
/// the target), then stage-2 upsampling to diffusion_out.
inline AugmentedPair<float> make_condition(const RunConfig& cfg, const Tensor<float>& cond, const Tensor<float>& target,
                                           const AugmentConfig* aug, std::uint64_t seed) {
  AugmentedPair<float> p{cond, target};
  if (aug && !aug->identity()) p = augment_pair(cond, target, *aug, seed);
  if (cfg.stage == Stage::super_resolution) {
    const Index d = cfg.diffusion_out;
    p.condition = upsample_condition_rgbd(p.condition, d, d);
    if (cfg.model.cond_channels == 1) {
      Tensor<float> depth({1, d, d});
      std::copy_n(p.condition.data() + 3 * d * d, d * d, depth.data());
      p.condition = std::move(depth);
    }
  }
  return p;
}

inline Tensor<float> stack(const std::vector<Tensor<float>>& items) {
  if (items.empty()) throw InvalidArgument("stack of no tensors");
  Shape s{static_cast<Index>(items.size())};
  for (Index d : items.front().shape()) s.push_back(d);
  Tensor<float> out(s);
  const Index per = items.front().size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i].shape() != items.front().shape()) throw InvalidArgument("stack: ragged shapes");
    std::copy_n(items[i].data(), per, out.data() + static_cast<Index>(i) * per);
  }
  return out;
}

inline Tensor<float> unstack(const Tensor<float>& batch, Index i) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  Tensor<float> out(s);
  std::copy_n(batch.data() + i * out.size(), out.size(), out.data());
  return out;
}

/// Item order of an epoch: a permutation seeded per epoch.
inline std::vector<Index> epoch_order(std::uint64_t seed, long epoch, Index n) {
  std::vector<Index> p(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = i;
  Rng rng(derive_seed(seed, {5, static_cast<std::uint64_t>(epoch)}));
  std::shuffle(p.begin(), p.end(), rng.engine());
  return p;
}

struct Batch {
  Tensor<float> x0, cond;
};

/// Batch for optimizer step `step`: global sample g = step*B + j maps to
/// epoch g / N and position g % N of that epoch's permutation.
inline Batch training_batch(const RunConfig& cfg, const StageData& data, long step) {
  const Index n = data.size(), b = cfg.batch_size;
  std::vector<Tensor<float>> xs, cs;
  long cached_epoch = -1;
  std::vector<Index> order;
  for (Index j = 0; j < b; ++j) {
    const auto g = static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(b) + static_cast<std::uint64_t>(j);
    const auto epoch = static_cast<long>(g / static_cast<std::uint64_t>(n));
    if (epoch != cached_epoch) {
      order = epoch_order(cfg.seed, epoch, n);
      cached_epoch = epoch;
    }
    const auto i = static_cast<std::size_t>(order[g % static_cast<std::uint64_t>(n)]);
    auto p = make_condition(cfg, data.cond[i], data.target[i], &cfg.augment, derive_seed(cfg.seed, {6, g}));
    xs.push_back(std::move(p.target));
    cs.push_back(std::move(p.condition));
  }
  return {stack(xs), stack(cs)};
}

struct LogRow {
  long step = 0;
  double loss = 0, simple = 0, vlb = 0, lr = 0;

  std::string line() const {
    std::ostringstream os;
    os.precision(9);
    os << step << '\t' << loss << '\t' << simple << '\t' << vlb << '\t' << lr;
    return os.str();
  }
};

inline constexpr const char* kLogHeader = "step\tloss\tsimple\tvlb\tlr";

inline std::vector<LogRow> read_log(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open " + path.string());
  std::vector<LogRow> rows;
  std::string line;
  std::getline(f, line);
  if (line != kLogHeader) throw FormatError("unexpected log header in " + path.string(), 0);
  while (std::getline(f, line)) {
    std::istringstream is(line);
    LogRow r;
    if (!(is >> r.step >> r.loss >> r.simple >> r.vlb >> r.lr)) throw FormatError("bad log row in " + path.string(), 0);
    rows.push_back(r);
  }
  return rows;
}

/// Trailing moving average of `simple` over `window` rows.
inline std::vector<double> smoothed_simple(const std::vector<LogRow>& log, std::size_t window) {
  std::vector<double> out;
  double acc = 0.0;
  for (std::size_t i = 0; i < log.size(); ++i) {
    acc += log[i].simple;
    if (i >= window) acc -= log[i - window].simple;
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

struct TrainOptions {
  std::optional<std::filesystem::path> resume;
  std::function<void(const LogRow&)> on_log;                  ///< called for each logged step
  std::function<void(long, const EvalReport&)> on_eval;
};

struct TrainResult {
  long steps = 0;
  std::filesystem::path last_checkpoint;
  std::vector<LogRow> log;  ///< rows of this invocation
};

inline std::filesystem::path checkpoint_path(const RunConfig& cfg, long step) {
  return std::filesystem::path(cfg.out_dir) / ("ckpt_" + std::to_string(step) + ".bin");
}

inline std::vector<EvalBatch<float>> eval_batches(const RunConfig& cfg, const StageData& data, Index count,
                                                  Index batch, double depth_noise_sigma = 0.0, std::uint64_t seed = 0) {
  std::vector<EvalBatch<float>> out;
  const Index n = count > 0 ? std::min(count, data.size()) : data.size();
  for (Index s = 0; s < n; s += batch) {
    std::vector<Tensor<float>> xs, cs;
    for (Index i = s; i < std::min(n, s + batch); ++i) {
      Tensor<float> c = data.cond[static_cast<std::size_t>(i)];
      if (depth_noise_sigma > 0.0) {
        if (c.dim(0) != 4) throw InvalidArgument("condition noise needs an RGB-D condition");
        const Index hw = c.dim(1) * c.dim(2);
        Tensor<float> d({1, c.dim(1), c.dim(2)});
        std::copy_n(c.data() + 3 * hw, hw, d.data());
        d = depth_noise(d, depth_noise_sigma, derive_seed(seed, {7, static_cast<std::uint64_t>(i)}));
        std::copy_n(d.data(), hw, c.data() + 3 * hw);
      }
      auto p = make_condition(cfg, c, data.target[static_cast<std::size_t>(i)], nullptr, 0);
      xs.push_back(std::move(p.target));
      cs.push_back(std::move(p.condition));
    }
    out.push_back({stack(xs), stack(cs)});
  }
  return out;
}

/// Runs the training loop described by `cfg`, writing config.snapshot,
/// log.tsv, eval.tsv and ckpt_<step>.bin into cfg.out_dir.
inline TrainResult train(const RunConfig& cfg, const TrainOptions& opt = {}) {
  namespace fs = std::filesystem;
  cfg.validate();
  const auto data = load_stage_data(cfg, cfg.split, cfg.limit);
  const auto schedule = cfg.schedule.build();
  const auto loss_cfg = cfg.loss_config();
  const long total = cfg.total_steps(data.size());

  Network<float> net(cfg.model);
  net.materialize(derive_seed(cfg.seed, {2}));
  std::vector<Var<float>> params;
  for (auto& e : net.params().entries()) params.push_back(e.var);
  Adam<float> adam(params, cfg.optimizer);

  fs::create_directories(cfg.out_dir);
  const fs::path dir(cfg.out_dir), log_path = dir / "log.tsv";
  long step = 0;
  std::vector<std::string> kept;
  TrainResult res;
  if (opt.resume) {
    const auto ck = read_checkpoint(*opt.resume);
    if (ck.config_hash != config_hash(cfg))
      throw IntegrityError("checkpoint " + opt.resume->string() + " was written under a different config");
    load_params(net, ck.params);
    std::vector<std::string> names;
    std::vector<Tensor<float>*> m, v;
    for (std::size_t i = 0; i < params.size(); ++i) {
      names.push_back(net.params().entries()[i].name);
      m.push_back(&adam.first_moments()[i]);
      v.push_back(&adam.second_moments()[i]);
    }
    restore_tensors(ck.adam_m, names, m);
    restore_tensors(ck.adam_v, names, v);
    step = ck.step;
    adam.set_steps(step);
    res.last_checkpoint = *opt.resume;
    if (fs::exists(log_path))
      for (const auto& r : read_log(log_path))
        if (r.step < step) kept.push_back(r.line());
  }
  {
    std::ofstream snap(dir / "config.snapshot");
    snap << to_text(cfg);
    std::ofstream log(log_path, std::ios::trunc);
    log << kLogHeader << '\n';
    for (const auto& l : kept) log << l << '\n';
  }
  std::ofstream log(log_path, std::ios::app);
  std::ofstream eval_log(dir / "eval.tsv", opt.resume ? std::ios::app : std::ios::trunc);
  if (!log || !eval_log) throw IoError("cannot write logs in " + cfg.out_dir);

  auto save = [&](long s) {
    Checkpoint ck;
    ck.config_text = to_text(cfg);
    ck.config_hash = config_hash(cfg);
    ck.seed = cfg.seed;
    ck.step = s;
    ck.params = snapshot_params(net);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& name = net.params().entries()[i].name;
      ck.adam_m.push_back({name, adam.first_moments()[i]});
      ck.adam_v.push_back({name, adam.second_moments()[i]});
    }
    res.last_checkpoint = checkpoint_path(cfg, s);
    write_checkpoint(res.last_checkpoint, ck);
  };

  for (; step < total; ++step) {
    const auto batch = training_batch(cfg, data, step);
    const auto target = training_step_target(batch.x0, batch.cond, schedule, derive_seed(cfg.seed, {4, static_cast<std::uint64_t>(step)}), loss_cfg);
    net.params().zero_grad();
    const auto out = net.forward(target.state.xt, target.state.t, batch.cond, true, derive_seed(cfg.seed, {3, static_cast<std::uint64_t>(step)}));
    const auto parts = target.loss(out);
    const double loss = parts.total.value()[0];
    if (!std::isfinite(loss)) throw DivergedTraining(step, res.last_checkpoint.string());
    backward(parts.total);
    clip_grad_norm(params, cfg.optimizer.grad_clip);
    const double lr = learning_rate_at(cfg.optimizer, cfg.lr_schedule, step);
    adam.step(lr);

    const LogRow row{step, loss, parts.simple, parts.vlb, lr};
    res.log.push_back(row);
    if (step % cfg.log_every == 0) {
      log << row.line() << '\n';
      log.flush();
      if (opt.on_log) opt.on_log(row);
    }
    const long done = step + 1;
    if (done % cfg.ckpt_every == 0 || done == total) save(done);
    if (cfg.eval_every > 0 && done % cfg.eval_every == 0) {
      EvalOptions eo;
      eo.compute_vlb = false;
      const auto r = evaluate(net.as_denoiser(), eval_batches(cfg, data, cfg.eval_items, 8), schedule,
                              derive_seed(cfg.seed, {8, static_cast<std::uint64_t>(done)}), eo);
      eval_log << r.log_line(done) << '\n';
      eval_log.flush();
      if (opt.on_eval) opt.on_eval(done, r);
    }
  }
  res.steps = step;
  return res;
}

/// A trained network with its config and schedule.
class TrainedModel {
 public:
  explicit TrainedModel(const Checkpoint& ck)
      : cfg_(ck.config()), schedule_(cfg_.schedule.build()), net_(std::make_unique<Network<float>>(cfg_.model)) {
    load_params(*net_, ck.params);
  }
  explicit TrainedModel(const std::filesystem::path& ckpt) : TrainedModel(read_checkpoint(ckpt)) {}

  const RunConfig& config() const { return cfg_; }
  const NoiseSchedule& schedule() const { return schedule_; }
  const Network<float>& network() const { return *net_; }

  /// Depth samples [N,1,H,W] for a model-facing condition [N,C,H,W].
  Tensor<float> sample(const Tensor<float>& cond, std::uint64_t seed) const {
    const Shape shape{cond.dim(0), 1, cond.dim(2), cond.dim(3)};
    return sample_loop(net_->as_denoiser(), cond, shape, schedule_, seed);
  }

  EvalReport evaluate_on(const StageData& data, Index count, std::uint64_t seed, bool compute_vlb,
                         double depth_noise_sigma = 0.0, std::vector<Tensor<float>>* predictions = nullptr) const {
    EvalOptions eo;
    eo.compute_vlb = compute_vlb;
    return evaluate(net_->as_denoiser(), eval_batches(cfg_, data, count, 8, depth_noise_sigma, seed), schedule_, seed,
                    eo, predictions);
  }

 private:
  RunConfig cfg_;
  NoiseSchedule schedule_;
  std::unique_ptr<Network<float>> net_;
};

inline void require_stage(const TrainedModel& m, Stage s) {
  if (m.config().stage != s)
    throw ConfigError("checkpoint is a " + detail::enum_name(m.config().stage, detail::kStages) + " model");
}

/// RGB [3,H,W] -> RGB-D at the stage-1 resolution.
inline RgbdImage run_stage1(const TrainedModel& m, const Tensor<float>& rgb, std::uint64_t seed) {
  require_stage(m, Stage::depth_diffusion);
  const Index d = m.config().diffusion_out;
  RgbdImage out;
  out.rgb = resample_rgb(rgb, d, d);
  out.depth = unstack(m.sample(stack({out.rgb}), seed), 0);
  return out;
}

struct Stage2Output {
  Tensor<float> depth;             ///< [1,H,W] sampled
  Tensor<float> nearest, bilinear;  ///< baseline upsamplings of the input depth
};

/// Low-resolution RGB-D -> depth at the stage-2 resolution, plus baselines.
inline Stage2Output run_stage2(const TrainedModel& m, const RgbdImage& low, std::uint64_t seed) {
  require_stage(m, Stage::super_resolution);
  const auto& c = m.config();
  const Index d = c.diffusion_out;
  const auto in = low.height() == c.cond_in && low.width() == c.cond_in ? low : resample(low, c.cond_in, c.cond_in);
  const auto p = make_condition(c, in.stacked(), Tensor<float>(), nullptr, 0);
  Stage2Output out;
  out.depth = unstack(m.sample(stack({p.condition}), seed), 0);
  out.nearest = ops::resize_tensor(in.depth, d, d, ops::Interp::nearest);
  out.bilinear = ops::resize_tensor(in.depth, d, d, ops::Interp::bilinear);
  return out;
}

/// Full pipeline; the result carries the caller's RGB unchanged.
inline RgbdImage run_pipeline(const TrainedModel& m1, const TrainedModel& m2, const Tensor<float>& rgb,
                              std::uint64_t seed1, std::uint64_t seed2) {
  const auto low = run_stage1(m1, rgb, seed1);
  auto depth = run_stage2(m2, low, seed2).depth;
  if (depth.dim(1) != rgb.dim(1) || depth.dim(2) != rgb.dim(2)) depth = resample_depth(depth, rgb.dim(1), rgb.dim(2));
  return RgbdImage{rgb, std::move(depth)};
}

}  // namespace rgbdf
