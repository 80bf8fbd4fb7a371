// Acceptance suite: one PASS/FAIL line per criterion.
#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numbers>
#include <set>
#include <sstream>

#include "gradcheck.hpp"
#include "rgbdf/pipeline.hpp"
#include "toy_denoiser.hpp"

using namespace rgbdf;
using namespace rgbdf::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double gauss_pdf(double x, double m, double var) {
  return std::exp(-0.5 * (x - m) * (x - m) / var) / std::sqrt(2 * std::numbers::pi * var);
}

Outcome schedule_correctness() {
  const auto s = build_cosine_schedule(600);
  long double prod = 1.0L;
  double worst = 0.0;
  for (int t = 0; t < s.T; ++t) {
    prod *= 1.0L - static_cast<long double>(s.beta[t]);
    worst = std::max(worst, static_cast<double>(std::abs((static_cast<long double>(s.alpha_bar[t]) - prod) / prod)));
  }
  const double last = s.alpha_bar[s.T - 1];
  return {last < 1e-3 && worst < 1e-12, "alpha_bar_T=" + num(last) + " max_rel_err=" + num(worst)};
}

Outcome forward_marginal() {
  const auto s = build_cosine_schedule(600);
  const int n = 100000;
  const double x0 = 0.7;
  const std::set<int> checks{1, s.T / 2, s.T};
  std::vector<double> x(n, x0);
  Rng rng(21);
  double worst_mean = 0, worst_var = 0;
  for (int step = 1; step <= s.T; ++step) {
    const double b = s.beta[step - 1], a = std::sqrt(1.0 - b), sb = std::sqrt(b);
    for (auto& v : x) v = a * v + sb * rng.normal();
    if (!checks.count(step)) continue;
    double m = 0, q = 0;
    for (double v : x) m += v;
    m /= n;
    for (double v : x) q += (v - m) * (v - m);
    q /= n - 1;
    const double ab = s.alpha_bar[step - 1];
    const double mean = std::sqrt(ab) * x0, var = 1.0 - ab;
    // mean error in units of the marginal standard deviation
    worst_mean = std::max(worst_mean, std::abs(m - mean) / std::sqrt(var));
    worst_var = std::max(worst_var, std::abs(q - var) / var);
  }
  return {worst_mean < 0.02 && worst_var < 0.02,
          "max |dmean|/sd=" + num(worst_mean) + " max var rel err=" + num(worst_var)};
}

Outcome posterior_oracle() {
  const auto s = build_cosine_schedule(10);
  double worst = 0;
  for (auto [x0, xt] : {std::pair{0.4, -0.2}, {-0.9, 0.8}, {1.0, 1.3}}) {
    for (int t = 1; t < s.T; ++t) {
      Tensor<double> a({1}, x0), b({1}, xt);
      const auto g = q_posterior(a, b, t, s);
      const double lo = -8.0, hi = 8.0;
      const int n = 40001;
      const double dx = (hi - lo) / (n - 1);
      std::vector<double> bayes(n), post(n);
      double zb = 0, zp = 0;
      for (int i = 0; i < n; ++i) {
        const double v = lo + i * dx;
        bayes[i] = gauss_pdf(xt, std::sqrt(s.alpha[t]) * v, s.beta[t]) *
                   gauss_pdf(v, std::sqrt(s.alpha_bar[t - 1]) * x0, 1 - s.alpha_bar[t - 1]);
        post[i] = gauss_pdf(v, g.mean[0], g.variance[0]);
        zb += bayes[i];
        zp += post[i];
      }
      double tv = 0;
      for (int i = 0; i < n; ++i) tv += std::abs(bayes[i] / zb - post[i] / zp);
      worst = std::max(worst, 0.5 * tv);
    }
  }
  return {worst < 1e-3, "max TV=" + num(worst)};
}

Outcome gaussian_kl() {
  const double closed = normal_kl(0.0, 0.0, 1.0, 0.0);
  // the same half nat through the bound term: model mean one posterior sd away
  const auto s = build_cosine_schedule(20);
  const int t = 9;
  Tensor<double> x0({1, 1, 1, 1}, 0.25), xt({1, 1, 1, 1}, -0.4);
  const auto [c1, c2] = posterior_coefficients(s, t);
  auto eps = oracle_eps(x0, xt, t, s);
  eps[0] -= std::sqrt(s.beta_tilde[t]) / c1 * std::sqrt(s.alpha_bar[t]) / std::sqrt(1 - s.alpha_bar[t]);
  const double term = loss_vlb_term(x0, xt, t, DenoiserOutput<double>{eps, Tensor<double>({1, 1, 1, 1}, 0.0)}, s);

  const double m1 = 0.2, v1 = 0.5, m2 = -0.1, v2 = 0.8;
  Rng rng(3);
  const int n = 1000000;
  double acc = 0;
  for (int i = 0; i < n; ++i) {
    const double x = m1 + std::sqrt(v1) * rng.normal();
    acc += std::log(gauss_pdf(x, m1, v1)) - std::log(gauss_pdf(x, m2, v2));
  }
  const double kl = normal_kl(m1, std::log(v1), m2, std::log(v2));
  const double mc_rel = std::abs(acc / n - kl) / kl;
  return {closed == 0.5 && std::abs(term - 0.5) < 1e-10 && mc_rel < 0.02,
          "KL((0,1)||(1,1))=" + num(closed, 17) + " vlb_term=" + num(term, 12) + " mc rel err=" + num(mc_rel)};
}

Outcome gradient_check() {
  const auto s = build_cosine_schedule(8);
  const std::vector<Tensor<double>> w{randn(ToyDenoiser::w1_shape(), 5, 0.5), randn(ToyDenoiser::w2_shape(), 6, 0.5)};
  const std::vector<std::pair<std::string, LossConfig>> losses{
      {"simple", LossConfig{}},
      {"hybrid", LossConfig{Weighting::simple, VarianceMode::learned, 1.0, 1.0, 0.001, false}},
      {"p2", LossConfig{Weighting::p2}}};
  double worst = 0;
  std::string detail;
  for (const auto& [name, cfg] : losses) {
    auto f = [&cfg, &s](const std::vector<VarD>& p) {
      Rng rng(17);
      auto x0 = rng.normal_tensor<double>({3, 1, 4, 4});
      for (auto& v : x0.values()) v = std::tanh(v);
      auto cond = rng.normal_tensor<double>({3, 1, 4, 4});
      auto target = training_step_target(x0, cond, s, 123, cfg);
      return target.loss(ToyDenoiser::forward(p[0], p[1], target.state.xt, cond)).total;
    };
    const double e = max_grad_error(f, w, 1e-5);
    worst = std::max(worst, e);
    detail += name + "=" + num(e) + " ";
  }
  return {worst < 1e-4, "max rel err " + detail};
}

Outcome architecture_audit() {
  int bad = 0;
  double worst = 0;
  for (const auto& [name, cfg] : presets::published()) {
    const Network<float> net(cfg.model);
    const double reported = presets::published_model_sizes().at(name) * 1e6;
    const double rel = std::abs(net.parameter_count() - reported) / reported;
    worst = std::max(worst, rel);
    const auto src = net.decoder_source_counts();
    const int L = cfg.model.stages();
    bool ok = rel <= 0.10 && static_cast<int>(src.size()) == L;
    for (int j = 0; ok && j < L; ++j)
      ok = src[j] == (cfg.model.arch == Arch::unet3plus ? L : (j == L - 1 ? 1 : 2));
    if (!ok) {
      ++bad;
      std::cerr << "  " << name << ": params " << net.parameter_count() << " vs " << reported << "\n";
    }
  }
  return {bad == 0, std::to_string(presets::published().size()) + " configs, " + std::to_string(bad) +
                        " failing, max size deviation " + num(100 * worst, 3) + "%"};
}

Outcome stochastic_depth() {
  const double p = 0.3;
  const Index n = 10000, d = 4;
  Rng init(3);
  const auto w1 = init.normal_tensor<double>({d, d}), w2 = init.normal_tensor<double>({d, d});
  const auto x0 = init.normal_tensor<double>({1, d});
  auto branch = [&](const Tensor<double>& x, const Tensor<double>& w) {
    Tensor<double> y(x.shape());
    for (Index b = 0; b < x.dim(0); ++b)
      for (Index i = 0; i < d; ++i)
        for (Index j = 0; j < d; ++j) y[b * d + i] += 0.3 * w[i * d + j] * x[b * d + j];
    return y;
  };
  auto eval = x0;
  eval += branch(eval, w1);
  eval += branch(eval, w2);
  Tensor<double> xs({n, d});
  for (Index b = 0; b < n; ++b)
    for (Index i = 0; i < d; ++i) xs[b * d + i] = x0[i];
  Rng rng(11);
  Var<double> h(xs);
  h = add(h, drop_path(Var<double>(branch(h.value(), w1)), p, rng));
  h = add(h, drop_path(Var<double>(branch(h.value(), w2)), p, rng));
  double worst = 0;
  for (Index i = 0; i < d; ++i) {
    double mean = 0, sq = 0;
    for (Index b = 0; b < n; ++b) mean += h.value()[b * d + i];
    mean /= n;
    for (Index b = 0; b < n; ++b) sq += std::pow(h.value()[b * d + i] - mean, 2);
    worst = std::max(worst, std::abs(mean - eval[i]) / std::sqrt(sq / (n - 1) / n));
  }
  return {worst <= 3.0, "max |E[train]-eval| = " + num(worst, 3) + " sigma"};
}

Outcome metric_oracles() {
  Rng rng(1);
  Tensor<double> a({1, 8, 8});
  for (auto& v : a.values()) v = rng.uniform(-0.9, 0.9);
  auto b = a;
  for (auto& v : b.values()) v += 0.001;
  const double m = mae(a, b);
  Tensor<double> gt({1, 4, 4}, -1.0), pred = gt;
  for (Index i : {0, 1, 2, 3}) gt[i] = 0.5;
  for (Index i : {0, 1}) pred[i] = 0.5;
  const double sub = iou(gt, pred);
  const Tensor<double> bg({1, 4, 4}, -1.0);
  const double empty = iou(bg, bg);
  return {std::abs(m - 1.0) < 1e-9 && sub == 0.5 && empty == 1.0,
          "mae(+0.001)=" + num(m, 12) + " iou(subset)=" + num(sub) + " iou(empty)=" + num(empty)};
}

// ---------------------------------------------------------------------------
// desk scale

struct Desk {
  fs::path work;
  RunConfig s1, s2, s2aug;
  Index eval_items = 8;
  std::optional<TrainedModel> m1, m2, m2aug;
  std::optional<StageData> d1, d2;
  std::map<std::string, double> timings;  // seconds of training per run
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void ensure_data(const fs::path& root) {
  if (fs::exists(root / "manifest.tsv")) return;
  SyntheticOptions opt;
  opt.count = 64;
  opt.resolution = 64;
  opt.seed = 2024;
  generate_synthetic(root, opt);
}

RunConfig desk_config(RunConfig c, const fs::path& work, const std::string& run) {
  c.data_root = (work / "data").string();
  c.out_dir = (work / run).string();
  c.seed = 1;
  return c;
}

TrainedModel train_logged(Desk& desk, const RunConfig& cfg) {
  const auto t0 = std::chrono::steady_clock::now();
  TrainOptions opt;
  opt.on_log = [&](const LogRow& r) {
    if ((r.step + 1) % 500 == 0)
      std::cerr << "  " << cfg.name << " step " << r.step + 1 << " loss " << num(r.simple) << " (" << num(seconds_since(t0), 3)
                << " s)\n";
  };
  const auto r = train(cfg, opt);
  desk.timings[cfg.name] = seconds_since(t0);
  return TrainedModel(r.last_checkpoint);
}

Outcome desk_stage1(Desk& desk) {
  const auto t0 = std::chrono::steady_clock::now();
  ensure_data(desk.work / "data");
  desk.m1.emplace(train_logged(desk, desk.s1));
  const auto log = read_log(fs::path(desk.s1.out_dir) / "log.tsv");
  const auto sm = smoothed_simple(log, 100);
  const double initial = log.front().simple, final_loss = sm.back();
  desk.d1 = load_stage_data(desk.s1, "train", desk.eval_items);
  const auto rep = desk.m1->evaluate_on(*desk.d1, desk.eval_items, 11, false);
  const double secs = seconds_since(t0);
  const bool ok = final_loss <= 0.1 * initial && rep.iou >= 0.8 && secs <= 1800;
  return {ok, "L_simple " + num(initial) + " -> " + num(final_loss) + " (" + num(100 * final_loss / initial, 3) +
                  "%), IoU " + num(rep.iou) + " on " + std::to_string(rep.n_samples) + " held-in items, MAE " +
                  num(rep.mae) + ", " + num(secs / 60, 3) + " min"};
}

double nearest_baseline_mae(const RunConfig& cfg, const StageData& data, Index count) {
  MetricAccumulator acc;
  for (Index i = 0; i < std::min(count, data.size()); ++i) {
    const auto low = RgbdImage::split(data.cond[static_cast<std::size_t>(i)]);
    acc.add(data.target[static_cast<std::size_t>(i)],
            ops::resize_tensor(low.depth, cfg.diffusion_out, cfg.diffusion_out, ops::Interp::nearest));
  }
  return acc.report().mae;
}

Outcome desk_super_resolution(Desk& desk) {
  const auto t0 = std::chrono::steady_clock::now();
  ensure_data(desk.work / "data");
  desk.m2.emplace(train_logged(desk, desk.s2));
  desk.d2 = load_stage_data(desk.s2, "train", 16);
  const auto rep = desk.m2->evaluate_on(*desk.d2, 16, 12, false);
  const double base = nearest_baseline_mae(desk.s2, *desk.d2, 16);
  const double secs = seconds_since(t0);
  return {rep.mae < base && secs <= 1800, "MAE " + num(rep.mae) + " vs nearest " + num(base) + " on " +
                                              std::to_string(rep.n_samples) + " held-in items, " + num(secs / 60, 3) +
                                              " min"};
}

Outcome determinism(const fs::path& work) {
  ensure_data(work / "data");
  auto run = [&](const std::string& tag) {
    const fs::path dir = work / "det", kept = work / tag;
    fs::remove_all(dir);
    fs::remove_all(kept);
    auto a = desk_config(presets::desk_stage1(), work, "det/stage1");
    auto b = desk_config(presets::desk_stage2(), work, "det/stage2");
    a.max_steps = b.max_steps = 25;
    a.ckpt_every = b.ckpt_every = 25;
    const TrainedModel m1(train(a).last_checkpoint), m2(train(b).last_checkpoint);
    const auto m = DatasetManifest::read(a.data_root);
    fs::create_directories(dir / "samples");
    for (std::size_t i = 0; i < 2; ++i) {
      const auto x = read_sample(m, m.entries[i]);
      const auto y = run_pipeline(m1, m2, x.rgb, 5 + i, 50 + i);
      write_pfm(dir / "samples" / (m.entries[i].id + ".pfm"), y.depth);
      to_point_cloud(y.depth, &y.rgb, false).write(dir / "samples" / (m.entries[i].id + ".pts.txt"));
    }
    fs::rename(dir, kept);
    return kept;
  };
  const auto t0 = std::chrono::steady_clock::now();
  const auto a = run("det_a"), b = run("det_b");
  auto slurp = [](const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
  };
  int files = 0, differ = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a);
    const auto name = rel.filename().string();
    if (!(name == "log.tsv" || name.ends_with(".pfm") || name.ends_with(".pts.txt") || name.ends_with(".bin"))) continue;
    ++files;
    if (!fs::exists(b / rel) || slurp(e.path()) != slurp(b / rel)) {
      ++differ;
      std::cerr << "  differs: " << rel.string() << "\n";
    }
  }
  const double secs = seconds_since(t0);
  return {differ == 0 && files >= 8 && secs < 300,
          std::to_string(files) + " files compared, " + std::to_string(differ) + " differ, " + num(secs, 3) + " s"};
}

Outcome depth_noise_robustness(Desk& desk) {
  const auto t0 = std::chrono::steady_clock::now();
  ensure_data(desk.work / "data");
  if (!desk.m2) desk.m2.emplace(train_logged(desk, desk.s2));
  if (!desk.d2) desk.d2 = load_stage_data(desk.s2, "train", 16);
  desk.m2aug.emplace(train_logged(desk, desk.s2aug));
  auto ratio = [&](const TrainedModel& m, double& clean, double& noisy) {
    clean = m.evaluate_on(*desk.d2, 16, 12, false).mae;
    noisy = m.evaluate_on(*desk.d2, 16, 12, false, 0.06).mae;
    return noisy / clean;
  };
  double ca, na, cu, nu;
  const double ra = ratio(*desk.m2aug, ca, na), ru = ratio(*desk.m2, cu, nu);
  const double secs = seconds_since(t0);
  return {ra <= 1.5 && secs <= 3600,
          "augmented noisy/clean MAE " + num(na) + "/" + num(ca) + " = " + num(ra) + "; unaugmented " + num(nu) + "/" +
              num(cu) + " = " + num(ru) + (ru > ra ? " (higher)" : " (not higher)") + ", " + num(secs / 60, 3) + " min"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::string work = "acceptance";
  std::vector<int> only;
  app.add_option("--work-dir", work, "scratch directory for data and runs");
  app.add_option("--only", only, "criteria to run (default: all)")->check(CLI::Range(1, 12))->delimiter(',');
  CLI11_PARSE(app, argc, argv);

  Desk desk;
  desk.work = fs::absolute(work);
  fs::create_directories(desk.work);
  desk.s1 = desk_config(presets::desk_stage1(), desk.work, "desk-stage1");
  desk.s2 = desk_config(presets::desk_stage2(), desk.work, "desk-stage2");
  desk.s2aug = desk_config(presets::desk_stage2_aug(), desk.work, "desk-stage2-aug");

  struct Criterion {
    int id;
    std::string name;
    double budget;  // seconds
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all{
      {1, "schedule correctness", 1, schedule_correctness},
      {2, "forward/marginal consistency", 30, forward_marginal},
      {3, "posterior oracle", 10, posterior_oracle},
      {4, "gaussian KL", 30, gaussian_kl},
      {5, "gradient check", 60, gradient_check},
      {6, "architecture audit", 120, architecture_audit},
      {7, "stochastic depth", 60, stochastic_depth},
      {8, "metric oracles", 5, metric_oracles},
      {11, "determinism", 300, [&] { return determinism(desk.work); }},
      {9, "desk end-to-end", 1800, [&] { return desk_stage1(desk); }},
      {10, "super-resolution contract", 1800, [&] { return desk_super_resolution(desk); }},
      {12, "depth-noise augmentation", 3600, [&] { return depth_noise_robustness(desk); }},
  };

  std::ofstream summary(desk.work / "acceptance.txt");
  int failed = 0;
  for (const auto& c : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = seconds_since(t0);
    if (secs > c.budget) {
      o.pass = false;
      o.detail += " [over " + num(c.budget) + " s budget]";
    }
    failed += !o.pass;
    std::ostringstream line;
    line << (o.pass ? "PASS" : "FAIL") << " criterion " << c.id << " (" << c.name << "): " << o.detail << " ["
         << num(secs, 3) << " s]";
    std::cout << line.str() << std::endl;
    summary << line.str() << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
