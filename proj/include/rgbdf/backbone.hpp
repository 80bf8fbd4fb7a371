#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "rgbdf/diffusion.hpp"
#include "rgbdf/ops.hpp"

namespace rgbdf {

enum class Arch { unet, unet3plus };

inline std::string to_string(Arch a) { return a == Arch::unet ? "unet" : "unet3plus"; }

struct ModelConfig {
  Arch arch = Arch::unet;
  int base_dim = 32;
  std::vector<int> dim_mults{1, 2, 2};
  std::vector<int> n_resblocks{1, 1, 1};
  std::vector<double> stochastic_depth{0.0, 0.0, 0.0};
  std::vector<int> attention_resolutions{};
  int attention_heads = 8;
  int attention_head_dim = 32;
  int groupnorm_groups = 8;
  double groupnorm_eps = 1e-5;
  double dropout = 0.0;
  VarianceMode variance = VarianceMode::fixed;
  int in_channels = 1;
  int cond_channels = 3;
  /// Spatial size of the diffusion input; fixes which stages carry attention.
  int resolution = 32;

  int stages() const { return static_cast<int>(dim_mults.size()); }
  int out_channels() const { return variance == VarianceMode::learned ? 2 * in_channels : in_channels; }
  int stage_channels(int i) const { return base_dim * dim_mults.at(static_cast<std::size_t>(i)); }
  int stage_resolution(int i) const { return resolution >> i; }
  int time_dim() const { return 4 * base_dim; }

  std::vector<std::string> violations() const {
    std::vector<std::string> v;
    const auto L = dim_mults.size();
    if (L == 0) v.push_back("dim_mults is empty");
    if (n_resblocks.size() != L) v.push_back("len(n_resblocks) != len(dim_mults)");
    if (stochastic_depth.size() != L) v.push_back("len(stochastic_depth) != len(dim_mults)");
    if (base_dim <= 0 || base_dim % 2) v.push_back("base_dim must be positive and even");
    for (int m : dim_mults)
      if (m <= 0) v.push_back("dim_mults entries must be positive");
    for (int n : n_resblocks)
      if (n < 1) v.push_back("n_resblocks entries must be >= 1");
    for (double p : stochastic_depth)
      if (!(p >= 0.0 && p < 1.0)) v.push_back("stochastic_depth entries must lie in [0,1)");
    if (!(dropout >= 0.0 && dropout < 1.0)) v.push_back("dropout must lie in [0,1)");
    if (groupnorm_groups <= 0) v.push_back("groupnorm_groups must be positive");
    if (!(groupnorm_eps > 0.0)) v.push_back("groupnorm_eps must be positive");
    if (attention_heads <= 0 || attention_head_dim <= 0) v.push_back("attention heads/dim must be positive");
    if (in_channels <= 0 || cond_channels < 0) v.push_back("channel counts must be positive");
    if (L > 0 && (resolution <= 0 || resolution % (1 << (L - 1)) != 0))
      v.push_back("resolution " + std::to_string(resolution) + " not divisible by 2^(stages-1)");
    for (std::size_t i = 0; i < L && base_dim > 0 && groupnorm_groups > 0; ++i)
      if ((base_dim * dim_mults[i]) % groupnorm_groups) v.push_back("stage " + std::to_string(i) + " channels not divisible by groupnorm_groups");
    if (base_dim > 0 && groupnorm_groups > 0 && base_dim % groupnorm_groups)
      v.push_back("base_dim not divisible by groupnorm_groups");
    std::set<int> res;
    for (std::size_t i = 0; i < L; ++i) res.insert(resolution >> i);
    for (int r : attention_resolutions)
      if (!res.count(r)) v.push_back("attention resolution " + std::to_string(r) + " is not a stage resolution");
    return v;
  }

  void validate() const {
    const auto v = violations();
    if (v.empty()) return;
    std::string msg = "invalid model config:";
    for (const auto& s : v) msg += " [" + s + "]";
    throw ConfigError(msg);
  }
};

enum class Init { fan_in, zero_out, ones, zeros };

/// Named parameters. Shapes are registered first; storage is allocated by
/// `materialize`, so large architectures can be audited without memory.
template <class T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    Init init;
    Var<T> var;
  };

  std::size_t add(std::string name, Shape shape, Init init) {
    if (index_.count(name)) throw InvalidArgument("duplicate parameter " + name);
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), std::move(shape), init, {}});
    return entries_.size() - 1;
  }

  /// `zero_out`: output-side convolutions start at zero (else fan-in random like the rest).
  void materialize(std::uint64_t seed, bool zero_out = true) {
    Rng rng(seed);
    for (auto& e : entries_) {
      Tensor<T> t(e.shape);
      const Index fan_in = e.shape.size() > 1 ? numel(e.shape) / e.shape[0] : 1;
      switch (e.init) {
        case Init::ones: t.fill(T{1}); break;
        case Init::zeros: break;
        case Init::zero_out:
          if (zero_out) break;
          [[fallthrough]];
        case Init::fan_in: {
          const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
          for (auto& v : t.values()) v = static_cast<T>(sd * rng.normal());
          break;
        }
      }
      e.var = Var<T>(std::move(t), true);
    }
  }

  bool materialized() const { return !entries_.empty() && entries_.front().var.defined(); }

  const Var<T>& operator[](std::size_t i) const {
    const auto& v = entries_[i].var;
    if (!v.defined()) throw InvalidArgument("parameters not materialized");
    return v;
  }

  Index count() const {
    Index n = 0;
    for (const auto& e : entries_) n += numel(e.shape);
    return n;
  }

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }

  const Entry* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  void zero_grad() {
    for (auto& e : entries_)
      if (e.var.defined()) e.var.zero_grad();
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Stochastic-depth wrapper: sample b keeps `branch` with probability 1 - p,
/// scaled by 1/(1-p), else contributes zero.
template <class T>
Var<T> drop_path(const Var<T>& branch, double p, Rng& rng) {
  if (p <= 0.0) return branch;
  std::vector<T> f(static_cast<std::size_t>(branch.dim(0)));
  for (auto& v : f) v = rng.bernoulli(p) ? T{} : static_cast<T>(1.0 / (1.0 - p));
  return ops::scale_per_sample(branch, std::move(f));
}

/// Sinusoidal embedding of width `dim` for each timestep.
template <class T>
Tensor<T> timestep_embedding(const std::vector<int>& ts, int dim) {
  const int half = dim / 2;
  Tensor<T> out({static_cast<Index>(ts.size()), dim});
  for (std::size_t b = 0; b < ts.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double f = std::exp(-std::log(10000.0) * i / half);
      out[b * dim + i] = static_cast<T>(std::sin(ts[b] * f));
      out[b * dim + half + i] = static_cast<T>(std::cos(ts[b] * f));
    }
  return out;
}

enum class Resample { none, down, up };

/// Denoising network: UNet or UNet3+ over [x_t, condition] with AdaGN time
/// conditioning, bias-free convolutions and group normalization.
template <class T>
class Network {
 public:
  struct ResBlock {
    int cin, cout, stage;
    Resample resample;
    bool droppable;
    std::size_t gn1_g, gn1_b, conv1, emb_w, emb_b, gn2_g, gn2_b, conv2;
    std::optional<std::size_t> skip;
  };
  struct Attention {
    int channels;
    ops::AttentionKind kind;
    std::size_t ln_g, ln_b, qkv, out;
  };
  struct DecoderStage {
    std::optional<ResBlock> up;  ///< brings d_{j+1} to this resolution
    std::vector<ResBlock> blocks;
    std::optional<Attention> attn;
    int sources = 0;
  };

  /// Probe receives every ResBlock output in execution order.
  using Probe = std::function<void(const std::string& name, const Tensor<T>&)>;

  explicit Network(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }
  Index parameter_count() const { return params_.count(); }
  void materialize(std::uint64_t seed, bool zero_out = true) { params_.materialize(seed, zero_out); }

  /// Number of feature maps concatenated at the input of each decoder stage (index = stage).
  std::vector<int> decoder_source_counts() const {
    std::vector<int> out(decoder_.size());
    for (std::size_t j = 0; j < decoder_.size(); ++j) out[j] = decoder_[j].sources;
    return out;
  }

  std::size_t resblock_count() const { return n_resblocks_; }

  /// Graph-building forward pass. `train` enables dropout and stochastic depth
  /// driven by Rng(seed).
  ModelOutput<T> forward(const Tensor<T>& xt, const std::vector<int>& ts, const Tensor<T>& cond, bool train,
                         std::uint64_t seed, const Probe& probe = {}) const {
    check_inputs(xt, ts, cond);
    Rng rng(seed);
    Ctx ctx{train, rng, probe, {}};
    const Index n = xt.dim(0);
    (void)n;
    auto temb = linear(Var<T>(timestep_embedding<T>(ts, cfg_.base_dim)), time_w1_, time_b1_);
    temb = linear(ops::gelu(temb), time_w2_, time_b2_);
    ctx.emb = ops::gelu(temb);

    Var<T> h = cfg_.cond_channels > 0 ? ops::concat_channels<T>({Var<T>(xt), Var<T>(cond)}) : Var<T>(xt);
    h = ops::conv2d(h, params_[in_conv_]);
    const int L = cfg_.stages();
    std::vector<Var<T>> skips(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) {
      for (const auto& rb : encoder_[i]) h = run(rb, h, ctx);
      if (enc_attn_[i]) h = run(*enc_attn_[i], h);
      if (i == L - 1) {
        h = run(*mid_block_, h, ctx);
        h = run(*mid_attn_, h);
      }
      skips[i] = h;
      if (i < L - 1) h = run(downs_[i], h, ctx);
    }
    std::vector<Var<T>> dec(static_cast<std::size_t>(L));
    for (int j = L - 1; j >= 0; --j) {
      const auto& st = decoder_[j];
      const Index hr = skips[j].dim(2), wr = skips[j].dim(3);
      Var<T> in;
      if (cfg_.arch == Arch::unet) {
        in = j == L - 1 ? skips[j] : ops::concat_channels<T>({run(*st.up, dec[j + 1], ctx), skips[j]});
      } else {
        std::vector<Var<T>> src;
        for (int i = 0; i <= j; ++i) src.push_back(ops::resize(skips[i], hr, wr, ops::Interp::nearest));
        if (j < L - 1) src.push_back(run(*st.up, dec[j + 1], ctx));
        for (int k = j + 2; k < L; ++k) src.push_back(ops::resize(dec[k], hr, wr, ops::Interp::bilinear));
        in = src.size() == 1 ? src.front() : ops::concat_channels(src);
      }
      for (const auto& rb : st.blocks) in = run(rb, in, ctx);
      if (st.attn) in = run(*st.attn, in);
      dec[j] = in;
    }
    h = ops::group_norm(dec[0], params_[out_gn_g_], params_[out_gn_b_], cfg_.groupnorm_groups, cfg_.groupnorm_eps);
    h = ops::conv2d(ops::gelu(h), params_[out_conv_]);
    if (cfg_.variance == VarianceMode::fixed) return {h, {}};
    const int c = cfg_.in_channels;
    return {ops::slice_channels(h, 0, c), ops::unit_squash(ops::slice_channels(h, c, 2 * c))};
  }

  /// Inference forward without graph recording; all samples share t.
  DenoiserOutput<T> predict(const Tensor<T>& xt, int t, const Tensor<T>& cond) const {
    NoGradGuard ng;
    auto out = forward(xt, std::vector<int>(static_cast<std::size_t>(xt.dim(0)), t), cond, false, 0);
    DenoiserOutput<T> r{out.eps.value(), {}};
    if (out.v.defined()) r.v = out.v.value();
    return r;
  }

  Denoiser<T> as_denoiser() const {
    return [this](const Tensor<T>& xt, int t, const Tensor<T>& cond) { return predict(xt, t, cond); };
  }

 private:
  struct Ctx {
    bool train;
    Rng& rng;
    const Probe& probe;
    Var<T> emb;
  };

  Var<T> linear(const Var<T>& x, std::size_t w, std::size_t b) const { return ops::linear(x, params_[w], params_[b]); }

  void check_inputs(const Tensor<T>& xt, const std::vector<int>& ts, const Tensor<T>& cond) const {
    const auto& s = xt.shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels)
      throw InvalidArgument("denoiser expects [N," + std::to_string(cfg_.in_channels) + ",H,W] input, got " + shape_str(s));
    const int down = 1 << (cfg_.stages() - 1);
    if (s[2] % down || s[3] % down)
      throw InvalidArgument("spatial size " + shape_str(s) + " not divisible by " + std::to_string(down));
    if (static_cast<Index>(ts.size()) != s[0]) throw InvalidArgument("one timestep per sample required");
    if (cfg_.cond_channels > 0) {
      const auto& c = cond.shape();
      if (c.size() != 4 || c[0] != s[0] || c[1] != cfg_.cond_channels || c[2] != s[2] || c[3] != s[3])
        throw InvalidArgument("condition must be [" + std::to_string(s[0]) + "," + std::to_string(cfg_.cond_channels) +
                              "," + std::to_string(s[2]) + "," + std::to_string(s[3]) + "], got " + shape_str(c));
    }
    if (!params_.materialized()) throw InvalidArgument("parameters not materialized");
  }

  Var<T> run(const ResBlock& rb, const Var<T>& x, Ctx& ctx) const {
    const int g = cfg_.groupnorm_groups;
    const double eps = cfg_.groupnorm_eps;
    auto h = ops::gelu(ops::group_norm(x, params_[rb.gn1_g], params_[rb.gn1_b], g, eps));
    Var<T> skip = x;
    if (rb.resample == Resample::down) {
      h = ops::avg_pool2(h);
      skip = ops::avg_pool2(skip);
    } else if (rb.resample == Resample::up) {
      h = ops::resize(h, h.dim(2) * 2, h.dim(3) * 2, ops::Interp::nearest);
      skip = ops::resize(skip, skip.dim(2) * 2, skip.dim(3) * 2, ops::Interp::nearest);
    }
    h = ops::conv2d(h, params_[rb.conv1]);
    h = ops::group_norm(h, params_[rb.gn2_g], params_[rb.gn2_b], g, eps);
    h = ops::scale_shift(h, linear(ctx.emb, rb.emb_w, rb.emb_b));
    h = ops::gelu(h);
    if (ctx.train) h = ops::dropout(h, cfg_.dropout, ctx.rng);
    h = ops::conv2d(h, params_[rb.conv2]);
    if (rb.skip) skip = ops::conv2d(skip, params_[*rb.skip]);
    if (ctx.train && rb.droppable) h = drop_path(h, cfg_.stochastic_depth[rb.stage], ctx.rng);
    auto out = add(skip, h);
    if (ctx.probe) ctx.probe("resblock", out.value());
    return out;
  }

  Var<T> run(const Attention& a, const Var<T>& x) const {
    auto h = ops::layer_norm_channels(x, params_[a.ln_g], params_[a.ln_b], 1e-5);
    h = ops::conv2d(h, params_[a.qkv]);
    h = ops::attention(h, cfg_.attention_heads, cfg_.attention_head_dim, a.kind);
    return add(x, ops::conv2d(h, params_[a.out]));
  }

  ResBlock make_block(const std::string& name, int cin, int cout, int stage, Resample rs, bool droppable) {
    ResBlock rb{cin, cout, stage, rs, droppable, 0, 0, 0, 0, 0, 0, 0, 0, {}};
    const Index emb = cfg_.time_dim();
    rb.gn1_g = params_.add(name + ".norm1.weight", {cin}, Init::ones);
    rb.gn1_b = params_.add(name + ".norm1.bias", {cin}, Init::zeros);
    rb.conv1 = params_.add(name + ".conv1.weight", {cout, cin, 3, 3}, Init::fan_in);
    rb.emb_w = params_.add(name + ".ada.weight", {2 * cout, emb}, Init::fan_in);
    rb.emb_b = params_.add(name + ".ada.bias", {2 * cout}, Init::zeros);
    rb.gn2_g = params_.add(name + ".norm2.weight", {cout}, Init::ones);
    rb.gn2_b = params_.add(name + ".norm2.bias", {cout}, Init::zeros);
    rb.conv2 = params_.add(name + ".conv2.weight", {cout, cout, 3, 3}, Init::zero_out);
    if (cin != cout) rb.skip = params_.add(name + ".skip.weight", {cout, cin, 1, 1}, Init::fan_in);
    ++n_resblocks_;
    return rb;
  }

  Attention make_attention(const std::string& name, int c, ops::AttentionKind kind) {
    const Index hd = static_cast<Index>(cfg_.attention_heads) * cfg_.attention_head_dim;
    Attention a{c, kind, 0, 0, 0, 0};
    a.ln_g = params_.add(name + ".norm.weight", {c}, Init::ones);
    a.ln_b = params_.add(name + ".norm.bias", {c}, Init::zeros);
    a.qkv = params_.add(name + ".qkv.weight", {3 * hd, c, 1, 1}, Init::fan_in);
    a.out = params_.add(name + ".out.weight", {c, hd, 1, 1}, Init::zero_out);
    return a;
  }

  void build() {
    const int L = cfg_.stages();
    const Index b = cfg_.base_dim, emb = cfg_.time_dim();
    time_w1_ = params_.add("time.fc1.weight", {emb, b}, Init::fan_in);
    time_b1_ = params_.add("time.fc1.bias", {emb}, Init::zeros);
    time_w2_ = params_.add("time.fc2.weight", {emb, emb}, Init::fan_in);
    time_b2_ = params_.add("time.fc2.bias", {emb}, Init::zeros);
    in_conv_ = params_.add("in_conv.weight", {cfg_.stage_channels(0), cfg_.in_channels + cfg_.cond_channels, 3, 3}, Init::fan_in);
    const std::set<int> att(cfg_.attention_resolutions.begin(), cfg_.attention_resolutions.end());
    auto kind_at = [&](int i) { return i == L - 1 ? ops::AttentionKind::standard : ops::AttentionKind::linear; };

    encoder_.resize(static_cast<std::size_t>(L));
    enc_attn_.resize(static_cast<std::size_t>(L));
    int prev = cfg_.stage_channels(0);
    for (int i = 0; i < L; ++i) {
      const int c = cfg_.stage_channels(i);
      const std::string pre = "enc" + std::to_string(i);
      for (int k = 0; k < cfg_.n_resblocks[i]; ++k) {
        encoder_[i].push_back(make_block(pre + ".res" + std::to_string(k), prev, c, i, Resample::none, true));
        prev = c;
      }
      if (att.count(cfg_.stage_resolution(i))) enc_attn_[i] = make_attention(pre + ".attn", c, kind_at(i));
      if (i == L - 1) {
        mid_block_ = make_block("mid.res", c, c, i, Resample::none, true);
        mid_attn_ = make_attention("mid.attn", c, ops::AttentionKind::standard);
      } else {
        downs_.push_back(make_block(pre + ".down", c, c, i, Resample::down, false));
      }
    }

    decoder_.resize(static_cast<std::size_t>(L));
    for (int j = L - 1; j >= 0; --j) {
      auto& st = decoder_[j];
      const int c = cfg_.stage_channels(j);
      const std::string pre = "dec" + std::to_string(j);
      if (j < L - 1) {
        const int cu = cfg_.stage_channels(j + 1);
        st.up = make_block(pre + ".up", cu, cu, j + 1, Resample::up, false);
      }
      int cin = 0;
      int nblocks = 1;
      if (cfg_.arch == Arch::unet) {
        cin = c + (j < L - 1 ? cfg_.stage_channels(j + 1) : 0);
        st.sources = j < L - 1 ? 2 : 1;
        nblocks = cfg_.n_resblocks[j];
      } else {
        for (int i = 0; i < L; ++i) cin += cfg_.stage_channels(i);
        st.sources = L;
      }
      for (int k = 0; k < nblocks; ++k) {
        st.blocks.push_back(make_block(pre + ".res" + std::to_string(k), cin, c, j, Resample::none, true));
        cin = c;
      }
      if (att.count(cfg_.stage_resolution(j))) st.attn = make_attention(pre + ".attn", c, kind_at(j));
    }
    out_gn_g_ = params_.add("out.norm.weight", {cfg_.stage_channels(0)}, Init::ones);
    out_gn_b_ = params_.add("out.norm.bias", {cfg_.stage_channels(0)}, Init::zeros);
    out_conv_ = params_.add("out.conv.weight", {cfg_.out_channels(), cfg_.stage_channels(0), 3, 3}, Init::zero_out);
  }

  ModelConfig cfg_;
  ParamStore<T> params_;
  std::size_t time_w1_ = 0, time_b1_ = 0, time_w2_ = 0, time_b2_ = 0, in_conv_ = 0, out_gn_g_ = 0, out_gn_b_ = 0,
              out_conv_ = 0;
  std::vector<std::vector<ResBlock>> encoder_;
  std::vector<std::optional<Attention>> enc_attn_;
  std::vector<ResBlock> downs_;
  std::optional<ResBlock> mid_block_;
  std::optional<Attention> mid_attn_;
  std::vector<DecoderStage> decoder_;
  std::size_t n_resblocks_ = 0;
};

/// RGB channels bilinear, depth channel nearest. rgbd: [N,4,h,w] or [4,h,w].
template <class T>
Tensor<T> upsample_condition_rgbd(const Tensor<T>& rgbd, Index height, Index width) {
  const auto& s = rgbd.shape();
  const bool batched = s.size() == 4;
  if ((s.size() != 3 && !batched) || s[batched ? 1 : 0] != 4)
    throw InvalidArgument("upsample_condition_rgbd expects 4 channels, got " + shape_str(s));
  const Index n = batched ? s[0] : 1, h = s[s.size() - 2], w = s[s.size() - 1];
  if (height < h || width < w) throw InvalidArgument("upsample_condition_rgbd: target smaller than source");
  Tensor<T> out(batched ? Shape{n, 4, height, width} : Shape{4, height, width});
  for (Index b = 0; b < n; ++b) {
    Tensor<T> rgb({3, h, w}), d({1, h, w});
    std::copy_n(rgbd.data() + b * 4 * h * w, 3 * h * w, rgb.data());
    std::copy_n(rgbd.data() + (b * 4 + 3) * h * w, h * w, d.data());
    const auto ru = ops::resize_tensor(rgb, height, width, ops::Interp::bilinear);
    const auto du = ops::resize_tensor(d, height, width, ops::Interp::nearest);
    std::copy_n(ru.data(), 3 * height * width, out.data() + b * 4 * height * width);
    std::copy_n(du.data(), height * width, out.data() + (b * 4 + 3) * height * width);
  }
  return out;
}

}  // namespace rgbdf
