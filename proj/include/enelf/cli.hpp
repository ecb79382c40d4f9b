#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "enelf/checkpoint.hpp"
#include "enelf/dataset.hpp"
#include "enelf/metrics.hpp"
#include "enelf/model.hpp"
#include "enelf/prune.hpp"
#include "enelf/train.hpp"

namespace enelf {

struct PruneRunCfg {
  double ratio = 0.5;
  bool ebt = false;
  double epsilon = 0.01;
  int64_t window = 5;
};

struct DataRunCfg {
  std::string scene = "lego-lite";  // scene id or path to a scene JSON
  int64_t train_views = 500;
  int64_t test_views = 64;
  int64_t real_views = 100;  // held-aside split used by the finetune stage
  int64_t height = 64;
  int64_t width = 64;
  double focal = 57.6;
  uint64_t seed = 7;
  double radius = 2.6;
  double elev_lo = 15;
  double elev_hi = 65;
};

struct PathsRunCfg {
  std::string out_dir = "out";
};

// Merged view of config file + flag overrides; flags win. The resolved
// config is echoed to out_dir on every run.
struct RunConfig {
  // model section
  int64_t d_blocks = 8;
  int64_t width = 32;
  std::vector<int> sr_scales = {2, 2};
  int64_t ray_points = 4;
  int64_t ray_freqs = 6;
  double t_near = 0.8;
  double t_far = 5.0;
  int64_t input_h = 16;
  int64_t input_w = 16;

  TrainConfig train;
  int64_t finetune_iters = 0;  // 0: 30% of train.iters
  PruneRunCfg prune;
  DataRunCfg data;
  PathsRunCfg paths;

  ModelConfig model_config() const {
    ModelConfig mc;
    mc.d_blocks = d_blocks;
    mc.width = width;
    mc.sr_blocks = default_sr_tower(width, sr_scales);
    mc.ray = {ray_points, ray_freqs, t_near, t_far};
    mc.input_h = input_h;
    mc.input_w = input_w;
    return mc;
  }

  int64_t resolved_finetune_iters() const {
    if (finetune_iters > 0) return finetune_iters;
    return static_cast<int64_t>(
        std::llround(0.3 * static_cast<double>(train.iters)));
  }
};

inline nlohmann::json run_config_to_json(const RunConfig& rc) {
  return {
      {"model",
       {{"d_blocks", rc.d_blocks},
        {"width", rc.width},
        {"sr_scales", rc.sr_scales},
        {"ray_points", rc.ray_points},
        {"ray_freqs", rc.ray_freqs},
        {"t_near", rc.t_near},
        {"t_far", rc.t_far},
        {"input_h", rc.input_h},
        {"input_w", rc.input_w}}},
      {"train",
       {{"iters", rc.train.iters},
        {"batch_size", rc.train.batch_size},
        {"lr", rc.train.lr},
        {"sparsity_lambda", rc.train.sparsity_lambda},
        {"seed", rc.train.seed},
        {"eval_every", rc.train.eval_every},
        {"checkpoint_every", rc.train.checkpoint_every},
        {"finetune_iters", rc.finetune_iters}}},
      {"prune",
       {{"ratio", rc.prune.ratio},
        {"ebt", rc.prune.ebt},
        {"epsilon", rc.prune.epsilon},
        {"window", rc.prune.window}}},
      {"data",
       {{"scene", rc.data.scene},
        {"train_views", rc.data.train_views},
        {"test_views", rc.data.test_views},
        {"real_views", rc.data.real_views},
        {"height", rc.data.height},
        {"width", rc.data.width},
        {"focal", rc.data.focal},
        {"seed", rc.data.seed},
        {"radius", rc.data.radius},
        {"elev_lo", rc.data.elev_lo},
        {"elev_hi", rc.data.elev_hi}}},
      {"paths", {{"out_dir", rc.paths.out_dir}}}};
}

inline void merge_run_config(RunConfig& rc, const nlohmann::json& j) {
  if (j.contains("model")) {
    const auto& m = j.at("model");
    rc.d_blocks = m.value("d_blocks", rc.d_blocks);
    rc.width = m.value("width", rc.width);
    rc.sr_scales = m.value("sr_scales", rc.sr_scales);
    rc.ray_points = m.value("ray_points", rc.ray_points);
    rc.ray_freqs = m.value("ray_freqs", rc.ray_freqs);
    rc.t_near = m.value("t_near", rc.t_near);
    rc.t_far = m.value("t_far", rc.t_far);
    rc.input_h = m.value("input_h", rc.input_h);
    rc.input_w = m.value("input_w", rc.input_w);
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    rc.train.iters = t.value("iters", rc.train.iters);
    rc.train.batch_size = t.value("batch_size", rc.train.batch_size);
    rc.train.lr = t.value("lr", rc.train.lr);
    rc.train.sparsity_lambda =
        t.value("sparsity_lambda", rc.train.sparsity_lambda);
    rc.train.seed = t.value("seed", rc.train.seed);
    rc.train.eval_every = t.value("eval_every", rc.train.eval_every);
    rc.train.checkpoint_every =
        t.value("checkpoint_every", rc.train.checkpoint_every);
    rc.finetune_iters = t.value("finetune_iters", rc.finetune_iters);
  }
  if (j.contains("prune")) {
    const auto& p = j.at("prune");
    rc.prune.ratio = p.value("ratio", rc.prune.ratio);
    rc.prune.ebt = p.value("ebt", rc.prune.ebt);
    rc.prune.epsilon = p.value("epsilon", rc.prune.epsilon);
    rc.prune.window = p.value("window", rc.prune.window);
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    rc.data.scene = d.value("scene", rc.data.scene);
    rc.data.train_views = d.value("train_views", rc.data.train_views);
    rc.data.test_views = d.value("test_views", rc.data.test_views);
    rc.data.real_views = d.value("real_views", rc.data.real_views);
    rc.data.height = d.value("height", rc.data.height);
    rc.data.width = d.value("width", rc.data.width);
    rc.data.focal = d.value("focal", rc.data.focal);
    rc.data.seed = d.value("seed", rc.data.seed);
    rc.data.radius = d.value("radius", rc.data.radius);
    rc.data.elev_lo = d.value("elev_lo", rc.data.elev_lo);
    rc.data.elev_hi = d.value("elev_hi", rc.data.elev_hi);
  }
  if (j.contains("paths")) {
    rc.paths.out_dir = j.at("paths").value("out_dir", rc.paths.out_dir);
  }
}

namespace cli_detail {

inline std::string out_path(const RunConfig& rc, const std::string& leaf) {
  return rc.paths.out_dir + "/" + leaf;
}

inline std::string ratio_tag(double ratio) {
  return "r" + std::to_string(static_cast<int>(std::lround(ratio * 100)));
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError(IoCode::OpenFail, "cannot open for write: " + path);
  f << j.dump(2) << "\n";
}

inline void echo_config(const RunConfig& rc) {
  std::filesystem::create_directories(rc.paths.out_dir);
  write_json_file(run_config_to_json(rc), out_path(rc, "resolved_config.json"));
}

inline Scene resolve_scene(const std::string& scene) {
  if (scene.size() > 5 && scene.substr(scene.size() - 5) == ".json") {
    std::ifstream f(scene);
    if (!f) throw IoError(IoCode::OpenFail, "cannot open scene file: " + scene);
    return scene_from_json(nlohmann::json::parse(f));
  }
  return scene_by_id(scene);
}

inline void do_distill(const RunConfig& rc) {
  echo_config(rc);
  const Scene scene = resolve_scene(rc.data.scene);
  const OrbitCfg orbit{rc.data.radius, rc.data.elev_lo, rc.data.elev_hi};
  // disjoint seeds per split
  distill_to_file(scene, rc.data.train_views, rc.data.height, rc.data.width,
                  rc.data.focal, rc.data.seed, out_path(rc, "train.enld"),
                  orbit);
  distill_to_file(scene, rc.data.test_views, rc.data.height, rc.data.width,
                  rc.data.focal, rc.data.seed + 1, out_path(rc, "test.enld"),
                  orbit);
  distill_to_file(scene, rc.data.real_views, rc.data.height, rc.data.width,
                  rc.data.focal, rc.data.seed + 2, out_path(rc, "real.enld"),
                  orbit);
  std::cout << "distilled " << rc.data.train_views << "+" << rc.data.test_views
            << "+" << rc.data.real_views << " views to " << rc.paths.out_dir
            << "\n";
}

inline void do_train(const RunConfig& rc) {
  echo_config(rc);
  const DistilledDataset ds = load_dataset(out_path(rc, "train.enld"));
  Rng rng(rc.train.seed);
  const float gamma0 = rc.train.sparsity_lambda > 0 ? 0.5f : 1.0f;
  ModelF model = build_model<float>(rc.model_config(), rng, gamma0);

  MaskHistory history;
  std::function<void(int64_t, ModelF&)> on_eval;
  if (rc.prune.ebt) {
    on_eval = [&](int64_t step, ModelF& m) {
      history.add(step, compute_mask(m, rc.prune.ratio));
    };
  }

  TrainConfig tc = rc.train;
  tc.stage = "distill";
  train_loop(model, ds, tc, out_path(rc, "train_log.csv"),
             out_path(rc, "baseline.enlf"), on_eval);

  if (rc.prune.ebt) {
    const EbtResult ebt =
        ebt_detect(history, rc.prune.epsilon,
                   static_cast<size_t>(rc.prune.window));
    write_json_file(nlohmann::json{{"found", ebt.found},
                                   {"snapshot_index", ebt.snapshot_index},
                                   {"iteration", ebt.iteration},
                                   {"probe_ratio", rc.prune.ratio},
                                   {"epsilon", rc.prune.epsilon},
                                   {"window", rc.prune.window}},
                    out_path(rc, "ebt.json"));
  }
  std::cout << "trained " << rc.train.iters << " iters -> "
            << out_path(rc, "baseline.enlf") << "\n";
}

inline void do_prune(const RunConfig& rc) {
  echo_config(rc);
  ModelF model = load_checkpoint<float>(out_path(rc, "baseline.enlf"));
  const PruneMask mask = compute_mask(model, rc.prune.ratio);
  ModelF pruned = apply_surgery(model, mask);
  const std::string tag = ratio_tag(rc.prune.ratio);
  save_checkpoint(pruned, out_path(rc, "pruned_" + tag + ".enlf"));
  write_json_file(prune_report(model, pruned, mask),
                  out_path(rc, "prune_report_" + tag + ".json"));
  std::cout << "pruned at ratio " << rc.prune.ratio << ": "
            << count_params(model).total << " -> "
            << count_params(pruned).total << " params\n";
}

inline void do_finetune(const RunConfig& rc) {
  echo_config(rc);
  const std::string tag = ratio_tag(rc.prune.ratio);
  ModelF model = load_checkpoint<float>(out_path(rc, "pruned_" + tag + ".enlf"));
  const DistilledDataset real = load_dataset(out_path(rc, "real.enld"));

  TrainConfig ft = rc.train;
  ft.stage = "finetune";
  ft.iters = rc.resolved_finetune_iters();
  ft.lr = rc.train.lr / 5.0;
  ft.sparsity_lambda = 0;
  train_loop(model, real, ft, out_path(rc, "finetune_log_" + tag + ".csv"),
             out_path(rc, "finetuned_" + tag + ".enlf"));
  std::cout << "finetuned " << ft.iters << " iters -> "
            << out_path(rc, "finetuned_" + tag + ".enlf") << "\n";
}

inline void do_eval(const RunConfig& rc, const std::string& ckpt,
                    const std::string& report_name, bool dump_views) {
  echo_config(rc);
  ModelF model = load_checkpoint<float>(ckpt);
  const DistilledDataset test = load_dataset(out_path(rc, "test.enld"));
  const std::string dump_dir =
      dump_views ? out_path(rc, "views_" + report_name) : "";
  const EvalReport report = evaluate(model, test, dump_dir);
  write_json_file(eval_report_to_json(report),
                  out_path(rc, "eval_" + report_name + ".json"));
  std::cout << "eval " << report_name << ": mean PSNR " << report.mean_psnr
            << " dB, mean SSIM " << report.mean_ssim << "\n";
}

inline void do_render(const RunConfig& rc, const std::string& ckpt,
                      int64_t pose_index) {
  echo_config(rc);
  ModelF model = load_checkpoint<float>(ckpt);
  const DistilledDataset test = load_dataset(out_path(rc, "test.enld"));
  if (pose_index < 0 || pose_index >= test.view_count())
    throw ConfigError("render: pose index " + std::to_string(pose_index) +
                      " out of range [0, " +
                      std::to_string(test.view_count()) + ")");
  model.mode = BnMode::Infer;
  const RayGrid<float> grid =
      encode_rays<float>(test.poses[pose_index], test.height, test.width,
                         model.config.ray, model.config.input_h,
                         model.config.input_w);
  const TensorF pred = forward(model, grid.features);
  const std::string stem = out_path(rc, "render_" + std::to_string(pose_index));
  write_ppm(pred, 0, stem + ".ppm");
  write_ppm(test.images[pose_index], 0, stem + "_gt.ppm");
  std::cout << "wrote " << stem << ".ppm and ground truth\n";
}

inline void do_bench(const RunConfig& rc, const std::string& ckpt,
                     int64_t warmup, int64_t runs, bool single_thread) {
  echo_config(rc);
  ModelF model = load_checkpoint<float>(ckpt);
  const LatencyStats st = bench_latency(model, warmup, runs, single_thread);
  const std::string stem = std::filesystem::path(ckpt).stem().string();
  write_json_file(nlohmann::json{{"checkpoint", ckpt},
                                 {"median_ms", st.median_ms},
                                 {"p90_ms", st.p90_ms},
                                 {"rays_per_sec", st.rays_per_sec},
                                 {"samples_ms", st.samples_ms},
                                 {"single_thread", single_thread}},
                  out_path(rc, "bench_" + stem + ".json"));
  std::cout << "bench " << stem << ": median " << st.median_ms << " ms, p90 "
            << st.p90_ms << " ms\n";
}

// the full six-step procedure at desk scale
inline void do_pipeline(const RunConfig& rc) {
  namespace fs = std::filesystem;
  if (!fs::exists(out_path(rc, "train.enld")) ||
      !fs::exists(out_path(rc, "test.enld")) ||
      !fs::exists(out_path(rc, "real.enld")))
    do_distill(rc);
  do_train(rc);
  do_prune(rc);
  do_finetune(rc);
  do_eval(rc, out_path(rc, "baseline.enlf"), "baseline", false);
  do_eval(rc, out_path(rc, "finetuned_" + ratio_tag(rc.prune.ratio) + ".enlf"),
          "finetuned_" + ratio_tag(rc.prune.ratio), false);
}

inline void add_common_options(CLI::App* sub, RunConfig& rc,
                               std::string& config_path) {
  sub->add_option("--config", config_path, "JSON config file");
  sub->add_option("--out", rc.paths.out_dir, "output directory");

  sub->add_option("--model.d_blocks", rc.d_blocks);
  sub->add_option("--model.width", rc.width);
  sub->add_option("--model.sr_scales", rc.sr_scales);
  sub->add_option("--model.ray_points", rc.ray_points);
  sub->add_option("--model.ray_freqs", rc.ray_freqs);
  sub->add_option("--model.t_near", rc.t_near);
  sub->add_option("--model.t_far", rc.t_far);
  sub->add_option("--model.input_h", rc.input_h);
  sub->add_option("--model.input_w", rc.input_w);

  sub->add_option("--train.iters", rc.train.iters);
  sub->add_option("--train.batch_size", rc.train.batch_size);
  sub->add_option("--train.lr", rc.train.lr);
  sub->add_option("--train.sparsity_lambda", rc.train.sparsity_lambda);
  sub->add_option("--train.seed", rc.train.seed);
  sub->add_option("--train.eval_every", rc.train.eval_every);
  sub->add_option("--train.checkpoint_every", rc.train.checkpoint_every);
  sub->add_option("--train.finetune_iters", rc.finetune_iters);

  const auto ratio_check = CLI::Validator(
      [](std::string& s) -> std::string {
        try {
          const double v = std::stod(s);
          if (v < 0.0 || v >= 1.0)
            return "ratio must be in the range [0, 1)";
        } catch (...) {
          return "ratio must be a number in the range [0, 1)";
        }
        return {};
      },
      "RATIO01", "ratio in [0,1)");
  sub->add_option("--ratio,--prune.ratio", rc.prune.ratio,
                  "pruning ratio in [0, 1)")
      ->check(ratio_check);
  sub->add_option("--prune.ebt", rc.prune.ebt);
  sub->add_option("--prune.epsilon", rc.prune.epsilon);
  sub->add_option("--prune.window", rc.prune.window);

  sub->add_option("--data.scene", rc.data.scene);
  sub->add_option("--data.train_views", rc.data.train_views);
  sub->add_option("--data.test_views", rc.data.test_views);
  sub->add_option("--data.real_views", rc.data.real_views);
  sub->add_option("--data.height", rc.data.height);
  sub->add_option("--data.width", rc.data.width);
  sub->add_option("--data.focal", rc.data.focal);
  sub->add_option("--data.seed", rc.data.seed);
  sub->add_option("--data.radius", rc.data.radius);
  sub->add_option("--data.elev_lo", rc.data.elev_lo);
  sub->add_option("--data.elev_hi", rc.data.elev_hi);
}

}  // namespace cli_detail

// Entry point shared by the binary and the tests. args excludes argv[0].
// Exit codes: 0 success, 1 runtime failure, 2 usage error.
inline int run_cli(std::vector<std::string> args) {
  apply_thread_env();

  RunConfig rc;

  // --config must be applied before flag overrides, so prescan for it
  std::string config_path;
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size())
      config_path = args[i + 1];
    else if (args[i].rfind("--config=", 0) == 0)
      config_path = args[i].substr(9);
  }
  if (!config_path.empty()) {
    std::ifstream f(config_path);
    if (!f) {
      std::cerr << "cannot open config file: " << config_path << "\n";
      return 2;
    }
    try {
      merge_run_config(rc, nlohmann::json::parse(f));
    } catch (const nlohmann::json::exception& e) {
      std::cerr << "bad config file " << config_path << ": " << e.what()
                << "\n";
      return 2;
    }
  }
  if (const char* env_seed = std::getenv("ENELF_SEED")) {
    const uint64_t s = std::strtoull(env_seed, nullptr, 10);
    rc.train.seed = s;
    rc.data.seed = s;
  }

  CLI::App app{"ENeLF toolkit: distill, train, prune, finetune, evaluate"};
  app.require_subcommand(1);

  std::string config_dummy;  // prescanned above; registered for help/validation
  std::string eval_ckpt, render_ckpt, bench_ckpt, eval_name = "baseline";
  bool dump_views = false, bench_single = false;
  int64_t pose_index = 0, bench_warmup = 3, bench_runs = 15;

  CLI::App* distill = app.add_subcommand("distill", "render teacher datasets");
  CLI::App* train = app.add_subcommand("train", "stage-1 training");
  CLI::App* prune =
      app.add_subcommand("prune", "mask + surgery + report at --ratio");
  CLI::App* finetune =
      app.add_subcommand("finetune", "stage-3 training of the pruned model");
  CLI::App* eval = app.add_subcommand("eval", "quality metrics on test split");
  CLI::App* render = app.add_subcommand("render", "render one test pose");
  CLI::App* bench = app.add_subcommand("bench", "forward latency benchmark");
  CLI::App* pipeline =
      app.add_subcommand("pipeline", "all stages in order");

  for (CLI::App* sub :
       {distill, train, prune, finetune, eval, render, bench, pipeline})
    cli_detail::add_common_options(sub, rc, config_dummy);

  eval->add_option("--ckpt", eval_ckpt, "checkpoint to evaluate");
  eval->add_option("--name", eval_name, "report name suffix");
  eval->add_flag("--dump-views", dump_views, "write per-view PPM pairs");
  render->add_option("-i,--pose-index", pose_index, "test pose index");
  render->add_option("--ckpt", render_ckpt, "checkpoint to render with");
  bench->add_option("--ckpt", bench_ckpt, "checkpoint to benchmark");
  bench->add_option("--warmup", bench_warmup);
  bench->add_option("--runs", bench_runs);
  bench->add_flag("--single-thread", bench_single);

  std::vector<const char*> argv;
  argv.push_back("enelf");
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()),
              const_cast<char**>(argv.data()));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (distill->parsed()) {
      cli_detail::do_distill(rc);
    } else if (train->parsed()) {
      cli_detail::do_train(rc);
    } else if (prune->parsed()) {
      cli_detail::do_prune(rc);
    } else if (finetune->parsed()) {
      cli_detail::do_finetune(rc);
    } else if (eval->parsed()) {
      if (eval_ckpt.empty())
        eval_ckpt = cli_detail::out_path(rc, "baseline.enlf");
      cli_detail::do_eval(rc, eval_ckpt, eval_name, dump_views);
    } else if (render->parsed()) {
      if (render_ckpt.empty())
        render_ckpt = cli_detail::out_path(rc, "baseline.enlf");
      cli_detail::do_render(rc, render_ckpt, pose_index);
    } else if (bench->parsed()) {
      if (bench_ckpt.empty())
        bench_ckpt = cli_detail::out_path(rc, "baseline.enlf");
      cli_detail::do_bench(rc, bench_ckpt, bench_warmup, bench_runs,
                           bench_single);
    } else if (pipeline->parsed()) {
      cli_detail::do_pipeline(rc);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace enelf
