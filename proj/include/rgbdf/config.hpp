#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdint>
#include <functional>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "rgbdf/augment.hpp"
#include "rgbdf/backbone.hpp"
#include "rgbdf/schedule.hpp"

namespace rgbdf {

enum class Stage { depth_diffusion, super_resolution };
enum class LrScheduleKind { none, cosine_restart_warmup };
/// `hybrid` is the simple weighting with the VLB term; the VLB term is added
/// whenever the variance is learned, whatever the weighting.
enum class LossKind { simple, p2, hybrid };
enum class ScheduleKind { cosine, linear };

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::cosine;
  int T = 50;
  double cosine_s = 0.008;
  double beta_start = 1e-4, beta_end = 0.02;

  NoiseSchedule build() const {
    return kind == ScheduleKind::cosine ? build_cosine_schedule(T, cosine_s) : build_linear_schedule(T, beta_start, beta_end);
  }
};

struct OptimizerConfig {
  double learning_rate = 4e-5;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  ///< global norm; 0 disables
};

struct LrScheduleConfig {
  LrScheduleKind kind = LrScheduleKind::none;
  long warmup_steps = 0;
  long cycle_length = 1000;
  double min_ratio = 0.1;
};

struct RunConfig {
  std::string name = "run";
  Stage stage = Stage::depth_diffusion;
  ModelConfig model;
  ScheduleConfig schedule;
  AugmentConfig augment;
  OptimizerConfig optimizer;
  LrScheduleConfig lr_schedule;
  long epochs = 1;
  long max_steps = 0;  ///< overrides epochs when > 0
  int batch_size = 8;
  LossKind loss = LossKind::simple;
  double lambda_vlb = 1e-3;
  double p2_k = 1.0, p2_gamma = 1.0;
  std::uint64_t seed = 0;
  std::string data_root = "data";
  std::string split = "train";
  Index limit = 0;  ///< use only the first `limit` items when > 0
  int cond_in = 64;
  int diffusion_out = 64;
  // run directory plumbing
  std::string out_dir = "runs/run";
  long ckpt_every = 1000;
  long log_every = 1;
  long eval_every = 0;  ///< 0 disables periodic evaluation
  int eval_items = 8;

  LossConfig loss_config() const {
    LossConfig c;
    c.weighting = loss == LossKind::p2 ? Weighting::p2 : Weighting::simple;
    c.variance = model.variance;
    c.p2_k = p2_k;
    c.p2_gamma = p2_gamma;
    c.lambda_vlb = lambda_vlb;
    return c;
  }

  /// Optimizer steps implied by epochs over `n_items` training items.
  long total_steps(Index n_items) const {
    if (max_steps > 0) return max_steps;
    const long per_epoch = static_cast<long>((n_items + batch_size - 1) / batch_size);
    return epochs * std::max(1L, per_epoch);
  }

  std::vector<std::string> violations() const {
    auto v = model.violations();
    for (auto& s : augment.violations()) v.push_back(s);
    if (schedule.T < 2) v.push_back("schedule.T must be >= 2");
    if (!(optimizer.beta1 > 0 && optimizer.beta1 < 1 && optimizer.beta2 > 0 && optimizer.beta2 < 1))
      v.push_back("optimizer betas must lie in (0,1)");
    if (!(optimizer.learning_rate > 0)) v.push_back("learning_rate must be > 0");
    if (!(optimizer.grad_clip >= 0)) v.push_back("grad_clip must be >= 0");
    if (lr_schedule.kind == LrScheduleKind::cosine_restart_warmup && lr_schedule.cycle_length < 1)
      v.push_back("cycle_length must be >= 1");
    if (lr_schedule.warmup_steps < 0) v.push_back("warmup_steps must be >= 0");
    if (batch_size < 1) v.push_back("batch_size must be >= 1");
    if (epochs < 1 && max_steps < 1) v.push_back("need epochs >= 1 or max_steps >= 1");
    if (loss == LossKind::hybrid && model.variance != VarianceMode::learned) v.push_back("hybrid loss needs learned variance");
    if (model.in_channels != 1) v.push_back("model.in_channels must be 1 (depth)");
    if (model.resolution != diffusion_out) v.push_back("model.resolution must equal diffusion_out");
    if (stage == Stage::depth_diffusion) {
      if (cond_in != diffusion_out) v.push_back("depth diffusion needs cond_in == diffusion_out");
      if (model.cond_channels != 3) v.push_back("depth diffusion is conditioned on RGB (cond_channels 3)");
    } else {
      if (diffusion_out <= cond_in) v.push_back("super resolution needs diffusion_out > cond_in");
      if (model.cond_channels != 4 && model.cond_channels != 1)
        v.push_back("super resolution is conditioned on RGB-D (4) or depth (1)");
    }
    if (ckpt_every < 1 || log_every < 1 || eval_every < 0) v.push_back("ckpt_every/log_every must be >= 1, eval_every >= 0");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid run config '" + name + "':";
    for (const auto& s : v) msg += " [" + s + "]";
    throw ConfigError(msg);
  }
};

// ---------------------------------------------------------------------------
// Text form: INI sections with `key = value`; lists are `/`- or `,`-separated.

namespace detail {

template <class T>
std::string fmt(const T& value) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, r.ptr);
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "/" : "") + fmt(v[i]);
  return out;
}

template <class T>
std::vector<T> split_list(const std::string& key, std::string s) {
  std::vector<T> out;
  for (char& c : s)
    if (c == ',' || c == '/' || c == '[' || c == ']') c = ' ';
  std::istringstream is(s);
  std::string tok;
  while (is >> tok) {
    std::istringstream ts(tok);
    T v{};
    if (!(ts >> v) || !ts.eof()) throw ConfigError("bad list entry '" + tok + "' for " + key);
    out.push_back(v);
  }
  return out;
}

template <class E>
E parse_enum(const std::string& key, const std::string& s, const std::map<std::string, E>& names) {
  auto it = names.find(s);
  if (it != names.end()) return it->second;
  std::string allowed;
  for (const auto& [n, _] : names) allowed += (allowed.empty() ? "" : "|") + n;
  throw ConfigError(key + ": '" + s + "' is not one of " + allowed);
}

template <class E>
std::string enum_name(E e, const std::map<std::string, E>& names) {
  for (const auto& [n, v] : names)
    if (v == e) return n;
  return "?";
}

inline const std::map<std::string, Stage> kStages{{"depth_diffusion", Stage::depth_diffusion},
                                                  {"super_resolution", Stage::super_resolution}};
inline const std::map<std::string, Arch> kArchs{{"unet", Arch::unet}, {"unet3plus", Arch::unet3plus}};
inline const std::map<std::string, VarianceMode> kVariance{{"fixed", VarianceMode::fixed}, {"learned", VarianceMode::learned}};
inline const std::map<std::string, LossKind> kLosses{{"simple", LossKind::simple}, {"p2", LossKind::p2}, {"hybrid", LossKind::hybrid}};
inline const std::map<std::string, LrScheduleKind> kLrKinds{{"none", LrScheduleKind::none},
                                                            {"cosine_restart_warmup", LrScheduleKind::cosine_restart_warmup}};
inline const std::map<std::string, ScheduleKind> kScheduleKinds{{"cosine", ScheduleKind::cosine}, {"linear", ScheduleKind::linear}};

/// Binds every config key to a field, once for reading and once for writing.
template <class Visitor>
void visit(RunConfig& c, Visitor&& v) {
  v.str("run.name", c.name);
  v.enumeration("run.stage", c.stage, kStages);
  v.num("run.seed", c.seed);
  v.str("run.out_dir", c.out_dir);
  v.num("run.ckpt_every", c.ckpt_every);
  v.num("run.log_every", c.log_every);
  v.num("run.eval_every", c.eval_every);
  v.num("run.eval_items", c.eval_items);

  v.str("data.root", c.data_root);
  v.str("data.split", c.split);
  v.num("data.limit", c.limit);
  v.num("data.cond_in", c.cond_in);
  v.num("data.diffusion_out", c.diffusion_out);

  auto& m = c.model;
  v.enumeration("model.arch", m.arch, kArchs);
  v.num("model.base_dim", m.base_dim);
  v.list("model.dim_mults", m.dim_mults);
  v.list("model.n_resblocks", m.n_resblocks);
  v.list("model.stochastic_depth", m.stochastic_depth);
  v.list("model.attention_resolutions", m.attention_resolutions);
  v.num("model.attention_heads", m.attention_heads);
  v.num("model.attention_head_dim", m.attention_head_dim);
  v.num("model.groupnorm_groups", m.groupnorm_groups);
  v.num("model.groupnorm_eps", m.groupnorm_eps);
  v.num("model.dropout", m.dropout);
  v.enumeration("model.variance", m.variance, kVariance);
  v.num("model.in_channels", m.in_channels);
  v.num("model.cond_channels", m.cond_channels);
  v.num("model.resolution", m.resolution);

  v.enumeration("schedule.kind", c.schedule.kind, kScheduleKinds);
  v.num("schedule.T", c.schedule.T);
  v.num("schedule.cosine_s", c.schedule.cosine_s);
  v.num("schedule.beta_start", c.schedule.beta_start);
  v.num("schedule.beta_end", c.schedule.beta_end);

  v.num("augment.blur_prob", c.augment.blur_prob);
  v.num("augment.blur_sigma_max", c.augment.blur_sigma_max);
  v.num("augment.depth_noise_sigma_max", c.augment.depth_noise_sigma_max);
  v.num("augment.scale_min", c.augment.scale_range.first);
  v.num("augment.scale_max", c.augment.scale_range.second);
  v.num("augment.shift_range", c.augment.shift_range);

  v.num("optimizer.learning_rate", c.optimizer.learning_rate);
  v.num("optimizer.beta1", c.optimizer.beta1);
  v.num("optimizer.beta2", c.optimizer.beta2);
  v.num("optimizer.eps", c.optimizer.eps);
  v.num("optimizer.grad_clip", c.optimizer.grad_clip);

  v.enumeration("lr_schedule.kind", c.lr_schedule.kind, kLrKinds);
  v.num("lr_schedule.warmup_steps", c.lr_schedule.warmup_steps);
  v.num("lr_schedule.cycle_length", c.lr_schedule.cycle_length);
  v.num("lr_schedule.min_ratio", c.lr_schedule.min_ratio);

  v.num("train.epochs", c.epochs);
  v.num("train.max_steps", c.max_steps);
  v.num("train.batch_size", c.batch_size);
  v.enumeration("train.loss", c.loss, kLosses);
  v.num("train.lambda_vlb", c.lambda_vlb);
  v.num("train.p2_k", c.p2_k);
  v.num("train.p2_gamma", c.p2_gamma);
}

using boost::property_tree::ptree;

struct Writer {
  ptree& tree;
  template <class T>
  void num(const char* key, const T& value) {
    tree.put(key, fmt(value));
  }
  void str(const char* key, const std::string& value) { tree.put(key, value); }
  template <class T>
  void list(const char* key, const std::vector<T>& value) {
    tree.put(key, join(value));
  }
  template <class E>
  void enumeration(const char* key, const E& value, const std::map<std::string, E>& names) {
    tree.put(key, enum_name(value, names));
  }
};

struct Reader {
  const ptree& tree;
  std::set<std::string> seen;

  std::optional<std::string> get(const char* key) {
    seen.insert(key);
    auto v = tree.get_optional<std::string>(key);
    if (!v) return std::nullopt;
    std::string s = *v;
    const auto b = s.find_first_not_of(" \t\"");
    const auto e = s.find_last_not_of(" \t\"");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  }
  template <class T>
  void num(const char* key, T& value) {
    auto s = get(key);
    if (!s) return;
    std::istringstream is(*s);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw ConfigError(std::string(key) + ": bad value '" + *s + "'");
    value = v;
  }
  void str(const char* key, std::string& value) {
    if (auto s = get(key)) value = *s;
  }
  template <class T>
  void list(const char* key, std::vector<T>& value) {
    if (auto s = get(key)) value = split_list<T>(key, *s);
  }
  template <class E>
  void enumeration(const char* key, E& value, const std::map<std::string, E>& names) {
    if (auto s = get(key)) value = parse_enum(key, *s, names);
  }
};

}  // namespace detail

namespace detail {

inline ptree read_ini_text(const std::string& text) {
  ptree tree;
  std::istringstream is(text);
  try {
    boost::property_tree::ini_parser::read_ini(is, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError("config line " + std::to_string(e.line()) + ": " + e.message());
  }
  return tree;
}

/// Overlays the keys in `tree` onto `base`; unknown keys are errors.
inline RunConfig overlay(const ptree& tree, RunConfig base, const std::set<std::string>& ignored = {}) {
  Reader r{tree, ignored};
  visit(base, r);
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("key '" + section + "' must sit inside a [section]");
    for (const auto& [key, _] : body)
      if (!r.seen.count(section + "." + key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
  }
  return base;
}

}  // namespace detail

/// Overlays the keys present in `text` onto `base`.
inline RunConfig parse_run_config(const std::string& text, RunConfig base = {}) {
  return detail::overlay(detail::read_ini_text(text), std::move(base));
}

inline std::string to_text(const RunConfig& cfg) {
  detail::ptree tree;
  RunConfig copy = cfg;
  detail::visit(copy, detail::Writer{tree});
  std::ostringstream os;
  boost::property_tree::ini_parser::write_ini(os, tree);
  return os.str();
}

/// FNV-1a 64 over the training-relevant part of the config: run plumbing and
/// the step budget are excluded so that a resumed run may extend training.
inline std::uint64_t config_hash(const RunConfig& cfg) {
  RunConfig c = cfg;
  c.name.clear();
  c.out_dir.clear();
  c.ckpt_every = c.log_every = 1;
  c.eval_every = 0;
  c.eval_items = 0;
  c.epochs = 1;
  c.max_steps = 0;
  const std::string text = to_text(c);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// ---------------------------------------------------------------------------
// Presets

namespace presets {

inline RunConfig depth_row(const std::string& name, Arch arch, VarianceMode var, LossKind loss, bool lr_sched,
                           std::vector<int> nres, std::vector<double> sd, int batch, double lr) {
  RunConfig c;
  c.name = name;
  c.stage = Stage::depth_diffusion;
  c.model.arch = arch;
  c.model.base_dim = 64;
  c.model.dim_mults = {1, 2, 4, 8};
  c.model.n_resblocks = std::move(nres);
  c.model.stochastic_depth = std::move(sd);
  c.model.attention_resolutions = {64, 32, 16, 8};
  c.model.attention_heads = 8;
  c.model.attention_head_dim = 32;
  c.model.groupnorm_groups = 8;
  c.model.dropout = 0.1;
  c.model.variance = var;
  c.model.cond_channels = 3;
  c.model.resolution = 64;
  c.schedule = {ScheduleKind::cosine, 600};
  c.loss = loss;
  c.optimizer.learning_rate = lr;
  if (lr_sched) c.lr_schedule = {LrScheduleKind::cosine_restart_warmup, 1000, 20000, 0.1};
  c.batch_size = batch;
  c.epochs = 250;
  c.cond_in = c.diffusion_out = 64;
  c.data_root = "data/depth64";
  c.out_dir = "runs/" + name;
  return c;
}

struct SrRow {
  Arch arch;
  int base;
  std::vector<int> mults;
  std::vector<int> nres;
  std::vector<double> sd;
  std::vector<int> att;
  int out_res;
  int T;
  int cond_channels;
  VarianceMode var;
  LossKind loss;
  int batch;
  double lr;
  bool blur, noise;
};

inline RunConfig sr_row(const std::string& name, const SrRow& r) {
  RunConfig c;
  c.name = name;
  c.stage = Stage::super_resolution;
  c.model.arch = r.arch;
  c.model.base_dim = r.base;
  c.model.dim_mults = r.mults;
  c.model.n_resblocks = r.nres;
  c.model.stochastic_depth = r.sd;
  c.model.attention_resolutions = r.att;
  c.model.dropout = 0.1;
  c.model.variance = r.var;
  c.model.cond_channels = r.cond_channels;
  c.model.resolution = r.out_res;
  c.schedule = {ScheduleKind::cosine, r.T};
  c.loss = r.loss;
  c.optimizer.learning_rate = r.lr;
  c.lr_schedule = {LrScheduleKind::cosine_restart_warmup, 1000, 20000, 0.1};
  c.batch_size = r.batch;
  c.epochs = r.T == 1000 ? 350 : 250;
  c.cond_in = 64;
  c.diffusion_out = r.out_res;
  if (r.blur) c.augment.blur_prob = 0.5;
  c.augment.blur_sigma_max = 0.6;
  if (r.noise) c.augment.depth_noise_sigma_max = 0.06;
  c.data_root = "data/sr" + std::to_string(r.out_res);
  c.out_dir = "runs/" + name;
  return c;
}

inline std::map<std::string, RunConfig> published() {
  using A = Arch;
  using V = VarianceMode;
  using L = LossKind;
  std::map<std::string, RunConfig> m;
  const std::vector<int> r2{2, 2, 2, 2}, r12{2, 2, 12, 2};
  const std::vector<double> z4(4, 0.0), sd10{0.1, 0.1, 0.5, 0.1};
  m["dd1"] = depth_row("dd1", A::unet, V::fixed, L::simple, false, r2, z4, 128, 4e-5);
  m["dd2"] = depth_row("dd2", A::unet3plus, V::fixed, L::simple, false, r2, z4, 128, 4e-5);
  m["dd3"] = depth_row("dd3", A::unet3plus, V::learned, L::hybrid, false, r2, z4, 128, 4e-5);
  m["dd4"] = depth_row("dd4", A::unet3plus, V::learned, L::p2, false, r2, z4, 128, 4e-5);
  m["dd5"] = depth_row("dd5", A::unet3plus, V::learned, L::p2, true, r2, z4, 64, 6e-5);
  m["dd6"] = depth_row("dd6", A::unet, V::learned, L::p2, true, r2, z4, 24, 4e-5);
  m["dd7"] = depth_row("dd7", A::unet, V::learned, L::hybrid, true, r2, z4, 24, 4e-5);
  m["dd8"] = depth_row("dd8", A::unet3plus, V::learned, L::hybrid, true, r2, z4, 12, 4e-5);
  m["dd9"] = depth_row("dd9", A::unet3plus, V::learned, L::hybrid, true, r12, z4, 12, 4e-5);
  m["dd10"] = depth_row("dd10", A::unet3plus, V::learned, L::hybrid, true, r12, sd10, 12, 4e-5);

  const std::vector<int> m1{1, 2, 4, 4, 8}, m2{1, 1, 2, 2, 4}, n1{2, 2, 2, 12, 2}, n2(5, 3);
  const std::vector<double> sd1{0.1, 0.1, 0.1, 0.5, 0.1}, z5(5, 0.0);
  const std::vector<int> att3{32, 16, 8};
  auto sr1 = [&](int base, int T, int cond, int batch, double lr) {
    return SrRow{A::unet3plus, base, m1, n1, sd1, att3, 128, T, cond, V::learned, L::p2, batch, lr, false, false};
  };
  auto sr2 = [&](int base, int T, int cond, int batch, double lr) {
    return SrRow{A::unet, base, m2, n2, z5, att3, 128, T, cond, V::fixed, L::simple, batch, lr, false, false};
  };
  m["sr1"] = sr_row("sr1", sr1(96, 1000, 4, 8, 1.5e-5));
  m["sr2"] = sr_row("sr2", sr1(64, 1000, 1, 16, 1e-5));
  m["sr3"] = sr_row("sr3", sr1(64, 1000, 4, 16, 1e-5));
  m["sr4"] = sr_row("sr4", sr1(64, 600, 1, 16, 1e-5));
  m["sr5"] = sr_row("sr5", sr1(64, 600, 4, 16, 1e-5));
  m["sr6"] = sr_row("sr6", sr2(128, 1000, 4, 16, 5e-5));
  m["sr7"] = sr_row("sr7", sr2(128, 1000, 1, 16, 5e-5));
  m["sr8"] = sr_row("sr8", sr2(128, 600, 4, 16, 5e-5));
  m["sr9"] = sr_row("sr9", sr2(128, 600, 1, 16, 5e-5));
  m["sr10"] = sr_row("sr10", sr2(192, 1000, 4, 8, 1e-4));
  m["sr11"] = sr_row("sr11", sr2(192, 1000, 1, 8, 1e-4));
  auto aug = [&](SrRow r, bool blur, bool noise) {
    r.blur = blur;
    r.noise = noise;
    return r;
  };
  m["sr61"] = sr_row("sr61", aug(sr2(128, 1000, 4, 16, 5e-5), true, false));
  m["sr62"] = sr_row("sr62", aug(sr2(128, 1000, 4, 16, 5e-5), false, true));
  m["sr63"] = sr_row("sr63", aug(sr2(128, 1000, 4, 16, 5e-5), true, true));
  auto hi = [&](int base, std::vector<int> mults, std::vector<int> att, int batch, double lr) {
    const auto n = mults.size();
    return SrRow{A::unet, base, mults, std::vector<int>(n, 3), std::vector<double>(n, 0.0), std::move(att), 256, 1000, 4,
                 V::fixed, L::simple, batch, lr, false, true};
  };
  m["sr12"] = sr_row("sr12", hi(128, m2, {32, 16}, 4, 3e-5));
  m["sr121"] = sr_row("sr121", hi(128, m2, {64, 32, 16}, 4, 3e-5));
  m["sr122"] = sr_row("sr122", hi(128, {1, 1, 2, 2, 4, 4}, att3, 4, 3e-5));
  m["sr13"] = sr_row("sr13", hi(192, m2, {32, 16}, 2, 5e-5));
  m["sr131"] = sr_row("sr131", hi(192, m2, {64, 32, 16}, 2, 5e-5));
  return m;
}

/// Reported model sizes of the published runs, in millions of parameters.
inline const std::map<std::string, double>& published_model_sizes() {
  static const std::map<std::string, double> m{
      {"dd1", 41}, {"dd2", 42}, {"dd3", 42}, {"dd4", 42}, {"dd5", 42}, {"dd6", 41}, {"dd7", 41}, {"dd8", 42},
      {"dd9", 55}, {"dd10", 55}, {"sr1", 153}, {"sr2", 69}, {"sr3", 69}, {"sr4", 69}, {"sr5", 69}, {"sr6", 72},
      {"sr7", 72}, {"sr8", 72}, {"sr9", 72}, {"sr10", 161}, {"sr11", 161}, {"sr61", 72}, {"sr62", 72}, {"sr63", 72},
      {"sr12", 72}, {"sr121", 72}, {"sr122", 131}, {"sr13", 161}, {"sr131", 161}};
  return m;
}

/// CPU-sized stage-1 model: RGB 32x32 -> depth 32x32.
inline RunConfig desk_stage1() {
  RunConfig c;
  c.name = "desk-stage1";
  c.stage = Stage::depth_diffusion;
  c.model.arch = Arch::unet3plus;
  c.model.base_dim = 32;
  c.model.dim_mults = {1, 2, 2};
  c.model.n_resblocks = {1, 1, 1};
  c.model.stochastic_depth = {0.0, 0.0, 0.0};
  c.model.attention_resolutions = {8};
  c.model.attention_heads = 4;
  c.model.attention_head_dim = 16;
  c.model.dropout = 0.0;
  c.model.variance = VarianceMode::learned;
  c.model.cond_channels = 3;
  c.model.resolution = 32;
  c.schedule = {ScheduleKind::cosine, 50};
  c.loss = LossKind::hybrid;
  c.optimizer.learning_rate = 1e-3;
  c.lr_schedule = {LrScheduleKind::cosine_restart_warmup, 100, 4000, 0.1};
  c.batch_size = 8;
  c.max_steps = 4000;
  c.cond_in = c.diffusion_out = 32;
  c.data_root = "data/desk";
  c.out_dir = "runs/desk-stage1";
  c.ckpt_every = 1000;
  return c;
}

/// CPU-sized stage-2 model: RGB-D 32x32 -> depth 64x64.
inline RunConfig desk_stage2() {
  RunConfig c;
  c.name = "desk-stage2";
  c.stage = Stage::super_resolution;
  c.model.arch = Arch::unet;
  c.model.base_dim = 16;
  c.model.dim_mults = {1, 2, 2};
  c.model.n_resblocks = {1, 1, 1};
  c.model.stochastic_depth = {0.0, 0.0, 0.0};
  c.model.attention_resolutions = {16};
  c.model.attention_heads = 4;
  c.model.attention_head_dim = 16;
  c.model.dropout = 0.0;
  c.model.variance = VarianceMode::learned;
  c.model.cond_channels = 4;
  c.model.resolution = 64;
  c.schedule = {ScheduleKind::cosine, 50};
  c.loss = LossKind::hybrid;
  c.optimizer.learning_rate = 1e-3;
  c.lr_schedule = {LrScheduleKind::cosine_restart_warmup, 100, 3000, 0.1};
  c.batch_size = 8;
  c.max_steps = 3000;
  c.cond_in = 32;
  c.diffusion_out = 64;
  c.data_root = "data/desk";
  c.out_dir = "runs/desk-stage2";
  c.ckpt_every = 1000;
  return c;
}

/// desk_stage2 with depth-noise augmentation on the condition.
inline RunConfig desk_stage2_aug() {
  RunConfig c = desk_stage2();
  c.name = "desk-stage2-aug";
  c.out_dir = "runs/desk-stage2-aug";
  c.augment.depth_noise_sigma_max = 0.06;
  return c;
}

inline std::map<std::string, RunConfig> all() {
  auto m = published();
  m["desk-stage1"] = desk_stage1();
  m["desk-stage2"] = desk_stage2();
  m["desk-stage2-aug"] = desk_stage2_aug();
  return m;
}

inline RunConfig get(const std::string& name) {
  auto m = all();
  auto it = m.find(name);
  if (it == m.end()) throw ConfigError("unknown preset '" + name + "'");
  return it->second;
}

}  // namespace presets

/// Parses and validates a config. A `run.preset` key, if present, selects
/// the base the remaining keys are applied to.
inline RunConfig load_run_config_text(const std::string& text) {
  const auto tree = detail::read_ini_text(text);
  RunConfig base;
  if (auto p = tree.get_optional<std::string>("run.preset")) base = presets::get(*p);
  auto cfg = detail::overlay(tree, base, {"run.preset"});
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return load_run_config_text(ss.str());
}

}  // namespace rgbdf
