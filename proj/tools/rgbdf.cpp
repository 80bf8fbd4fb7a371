#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "rgbdf/pipeline.hpp"

namespace fs = std::filesystem;
using namespace rgbdf;

namespace {

void write_depth_outputs(const fs::path& out, const std::string& stem, const Tensor<float>& depth, const Tensor<float>* rgb,
                         bool emit_pc, bool drop_bg) {
  write_pfm(out / (stem + ".pfm"), depth);
  if (rgb) write_png(out / (stem + ".png"), *rgb);
  if (emit_pc) to_point_cloud(depth, rgb, drop_bg).write(out / (stem + ".pts.txt"));
}

struct SampleArgs {
  std::string stage = "1";
  std::vector<std::string> ckpts;
  std::string input, out = "samples";
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> seed2;
  bool emit_pc = false, drop_bg = false;
};

void run_sample(const SampleArgs& a) {
  fs::create_directories(a.out);
  const std::string stem = fs::path(a.input).stem().string();
  const std::size_t need = a.stage == "full" ? 2 : 1;
  if (a.ckpts.size() != need)
    throw InvalidArgument("--stage " + a.stage + " takes " + std::to_string(need) + " --ckpt value(s), got " + std::to_string(a.ckpts.size()));
  if (a.stage == "1") {
    const TrainedModel m(a.ckpts[0]);
    const auto x = run_stage1(m, read_png(a.input), a.seed);
    write_depth_outputs(a.out, stem, x.depth, &x.rgb, a.emit_pc, a.drop_bg);
  } else if (a.stage == "2") {
    const TrainedModel m(a.ckpts[0]);
    const auto in = fs::path(a.input).replace_extension();
    const auto y = run_stage2(m, read_rgbd(in), a.seed);
    write_depth_outputs(a.out, stem, y.depth, nullptr, a.emit_pc, a.drop_bg);
    write_pfm(fs::path(a.out) / (stem + "_nearest.pfm"), y.nearest);
    write_pfm(fs::path(a.out) / (stem + "_bilinear.pfm"), y.bilinear);
  } else {
    const TrainedModel m1(a.ckpts[0]), m2(a.ckpts[1]);
    const auto x = run_pipeline(m1, m2, read_png(a.input), a.seed, a.seed2.value_or(derive_seed(a.seed, {1})));
    write_depth_outputs(a.out, stem, x.depth, &x.rgb, a.emit_pc, a.drop_bg);
  }
}

struct EvalArgs {
  std::string ckpt, data, out = "report.tsv", split = "train", baseline;
  Index limit = 0;
  std::uint64_t seed = 0;
  double depth_noise = 0.0;
  bool oracle = false, no_vlb = false;
};

EvalReport run_eval(const EvalArgs& a) {
  if (a.oracle) {
    const auto m = DatasetManifest::read(a.data);
    auto entries = m.split(a.split);
    if (a.limit > 0 && static_cast<Index>(entries.size()) > a.limit) entries.resize(static_cast<std::size_t>(a.limit));
    if (entries.empty()) throw IntegrityError("split '" + a.split + "' is empty");
    MetricAccumulator acc;
    for (const auto& e : entries) {
      const auto x = read_sample(m, e);
      acc.add(x.depth, x.depth);
    }
    return acc.report();
  }
  if (a.ckpt.empty()) throw InvalidArgument("eval needs --ckpt unless --oracle is given");
  const TrainedModel m(a.ckpt);
  RunConfig cfg = m.config();
  cfg.data_root = a.data;
  const auto data = load_stage_data(cfg, a.split, a.limit);
  if (!a.baseline.empty()) {
    if (cfg.stage != Stage::super_resolution) throw InvalidArgument("--baseline applies to stage-2 checkpoints");
    const auto mode = a.baseline == "nearest" ? ops::Interp::nearest : ops::Interp::bilinear;
    MetricAccumulator acc;
    for (Index i = 0; i < data.size(); ++i) {
      const auto low = RgbdImage::split(data.cond[static_cast<std::size_t>(i)]);
      acc.add(data.target[static_cast<std::size_t>(i)], ops::resize_tensor(low.depth, cfg.diffusion_out, cfg.diffusion_out, mode));
    }
    return acc.report();
  }
  return m.evaluate_on(data, 0, a.seed, !a.no_vlb, a.depth_noise);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"rgbdf: two-stage RGB to depth diffusion"};
  app.require_subcommand(1);

  SyntheticOptions syn;
  std::string syn_out;
  auto* mk = app.add_subcommand("make-synthetic", "render a synthetic RGB-D dataset");
  mk->add_option("--out", syn_out, "dataset directory")->required();
  mk->add_option("--count", syn.count, "number of samples")->check(CLI::PositiveNumber);
  mk->add_option("--resolution", syn.resolution, "image size")->check(CLI::PositiveNumber);
  mk->add_option("--seed", syn.seed);
  mk->add_option("--views-per-subject", syn.views_per_subject)->check(CLI::PositiveNumber);
  mk->add_option("--test-fraction", syn.test_fraction)->check(CLI::Range(0.0, 1.0));

  std::string cfg_path, resume, out_dir;
  long max_steps = 0;
  auto* tr = app.add_subcommand("train", "train one stage from a config file");
  tr->add_option("--config", cfg_path, "INI config")->required()->check(CLI::ExistingFile);
  tr->add_option("--resume", resume, "checkpoint to resume from")->check(CLI::ExistingFile);
  tr->add_option("--out-dir", out_dir, "override run.out_dir");
  tr->add_option("--max-steps", max_steps, "override train.max_steps");

  SampleArgs sa;
  auto* sm = app.add_subcommand("sample", "sample depth with trained checkpoints");
  sm->add_option("--stage", sa.stage)->check(CLI::IsMember({"1", "2", "full"}));
  sm->add_option("--ckpt", sa.ckpts, "checkpoint (stage 1 then stage 2 for full)")->required();
  sm->add_option("--input", sa.input, "RGB png (stage 2: png with a sibling pfm)")->required()->check(CLI::ExistingFile);
  sm->add_option("--seed", sa.seed);
  sm->add_option("--seed2", sa.seed2, "stage-2 seed for --stage full");
  sm->add_option("--out", sa.out);
  sm->add_flag("--emit-pointcloud", sa.emit_pc);
  sm->add_flag("--drop-background", sa.drop_bg);

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  ev->add_option("--ckpt", ea.ckpt)->check(CLI::ExistingFile);
  ev->add_option("--data", ea.data)->required()->check(CLI::ExistingDirectory);
  ev->add_option("--out", ea.out);
  ev->add_option("--split", ea.split);
  ev->add_option("--limit", ea.limit);
  ev->add_option("--seed", ea.seed);
  ev->add_option("--depth-noise", ea.depth_noise, "sigma of noise added to the depth condition")->check(CLI::NonNegativeNumber);
  ev->add_option("--baseline", ea.baseline, "score an upsampling baseline instead")->check(CLI::IsMember({"nearest", "bilinear"}));
  ev->add_flag("--oracle", ea.oracle, "score ground truth against itself");
  ev->add_flag("--no-vlb", ea.no_vlb);

  std::string preset_name;
  auto* pr = app.add_subcommand("preset", "print a preset config, or list them");
  pr->add_option("name", preset_name);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error[usage]: " << e.what() << "\n";
    return 64;
  }

  try {
    if (mk->parsed()) {
      const auto m = generate_synthetic(syn_out, syn);
      std::cout << "wrote " << m.entries.size() << " samples to " << syn_out << "\n";
    } else if (tr->parsed()) {
      auto cfg = load_run_config(cfg_path);
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      if (max_steps > 0) cfg.max_steps = max_steps;
      TrainOptions opt;
      if (!resume.empty()) opt.resume = resume;
      opt.on_eval = [](long step, const EvalReport& r) { std::cout << "eval\t" << r.log_line(step) << "\n"; };
      const auto r = train(cfg, opt);
      std::cout << "trained to step " << r.steps << "; checkpoint " << r.last_checkpoint.string() << "\n";
    } else if (sm->parsed()) {
      run_sample(sa);
    } else if (ev->parsed()) {
      const auto r = run_eval(ea);
      r.write(ea.out);
      std::cout << r.to_text();
    } else if (pr->parsed()) {
      if (preset_name.empty()) {
        for (const auto& [name, _] : presets::all()) std::cout << name << "\n";
      } else {
        std::cout << to_text(presets::get(preset_name));
      }
    }
  } catch (const Error& e) {
    std::cerr << "error[" << e.category() << "]: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error[internal]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
