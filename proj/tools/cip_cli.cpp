#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cip/cip.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string env;
  std::string out_dir;
  std::string map_file;
  long seed = -1;
  long frames = -1;
  int jobs = -1;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "experiment config file (flat sectioned key=value)");
  cmd->add_option("--env", f.env, "env name: bandits | fourrooms-v0|v1|v2");
  cmd->add_option("--out", f.out_dir, "output directory for the run");
  cmd->add_option("--seed", f.seed, "single seed (replaces the config seed list)");
  cmd->add_option("--frames", f.frames, "max training frames");
  cmd->add_option("--map", f.map_file, "four-rooms layout map file");
  cmd->add_option("--jobs", f.jobs, "parallel seed runs (0 = hardware)");
}

cip::ExperimentConfig resolve_config(const CommonFlags& f, const std::string& fallback_env) {
  std::string env = f.env;
  if (env.empty() && !f.config_path.empty()) {
    cip::ExperimentConfig probe;
    probe = cip::load_config_file(f.config_path, probe);
    env = probe.env;
  }
  if (env.empty()) env = fallback_env;
  cip::ExperimentConfig cfg = cip::default_config(env);
  if (!f.config_path.empty()) cfg = cip::load_config_file(f.config_path, cfg);
  if (!f.env.empty()) cfg.env = f.env;
  if (!f.out_dir.empty()) cfg.out_dir = f.out_dir;
  if (f.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(f.seed)};
  if (f.frames >= 0) cfg.max_frames = f.frames;
  if (!f.map_file.empty()) cfg.map_file = f.map_file;
  if (f.jobs >= 0) cfg.jobs = f.jobs;
  cfg.validate();
  return cfg;
}

void print_train_result(const cip::TrainRunResult& res) {
  for (const auto& s : res.seeds)
    std::printf("seed %llu: final success %.4f after %ld frames  (%s)\n",
                static_cast<unsigned long long>(s.seed), s.outcome.final_success,
                s.outcome.frames_used, s.checkpoint_path.c_str());
  std::printf("median final success: %.4f (IQR %.4f)\n", res.median_final, res.iqr_final);
  std::printf("run directory: %s\n", res.out_dir.c_str());
}

int run_selftest() {
  using namespace cip::selfcheck;
  const std::vector<cip::SuiteResult> suites = {math_suite(), gradient_suite(), oracle_suite(),
                                                env_suite()};
  bool all = true;
  for (const auto& s : suites) {
    std::printf("[%s] %s (%.1fs)\n", s.pass ? "PASS" : "FAIL", s.name.c_str(), s.seconds);
    for (const auto& line : s.lines) std::printf("%s\n", line.c_str());
    all = all && s.pass;
  }
  std::printf("%s\n", all ? "selftest: all suites passed" : "selftest: FAILURES detected");
  return all ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"competing information-constrained primitives"};
  app.require_subcommand(1);

  CommonFlags train_f, eval_f, continual_f, transfer_f, combine_f, export_f;

  auto* train_cmd = app.add_subcommand("train", "train an ensemble (or the flat baseline)");
  add_common(train_cmd, train_f);
  bool flat = false;
  train_cmd->add_flag("--flat", flat, "train the flat baseline instead of the ensemble");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint (greedy, 500 episodes)");
  std::string eval_ckpt;
  int eval_episodes = 500, eval_workers = 10;
  long eval_seed = 0;
  eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
  eval_cmd->add_option("--env", eval_f.env, "env override (defaults to the checkpoint env)");
  eval_cmd->add_option("--episodes", eval_episodes, "evaluation episodes");
  eval_cmd->add_option("--workers", eval_workers, "parallel evaluation workers");
  eval_cmd->add_option("--seed", eval_seed, "evaluation seed");
  eval_cmd->add_option("--map", eval_f.map_file, "four-rooms layout map file");

  auto* cont_cmd =
      app.add_subcommand("continual", "fourrooms v0 -> v1 -> v2 curriculum, ensemble vs flat");
  add_common(cont_cmd, continual_f);

  auto* transfer_cmd = app.add_subcommand("transfer", "fine-tune a checkpoint on an env");
  std::string transfer_ckpt;
  transfer_cmd->add_option("--ckpt", transfer_ckpt, "checkpoint path")->required();
  add_common(transfer_cmd, transfer_f);

  auto* combine_cmd =
      app.add_subcommand("combine", "concatenate checkpointed ensembles and fine-tune");
  std::vector<std::string> combine_ckpts;
  combine_cmd->add_option("ckpts", combine_ckpts, "checkpoint paths")->required();
  add_common(combine_cmd, combine_f);

  auto* export_cmd = app.add_subcommand("export", "export tidy plot CSVs from a run directory");
  export_cmd->add_option("--out", export_f.out_dir, "run directory to export")->required();

  app.add_subcommand("selftest", "run the property / gradient / oracle / env suites");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("train")) {
      auto cfg = resolve_config(train_f, "bandits");
      print_train_result(cip::run_train(cfg, flat));
    } else if (app.got_subcommand("eval")) {
      std::shared_ptr<const cip::FourRoomsLayout> layout;
      if (!eval_f.map_file.empty())
        layout = std::make_shared<cip::FourRoomsLayout>(
            cip::FourRoomsLayout::load_file(eval_f.map_file));
      cip::Checkpoint ck = cip::load_checkpoint(eval_ckpt, layout.get());
      const std::string env = eval_f.env.empty() ? ck.config.env : eval_f.env;
      cip::EvalResult r = cip::evaluate(ck.ensemble, env, eval_episodes, eval_workers,
                                        static_cast<std::uint64_t>(eval_seed), layout.get());
      std::printf("%s: success rate %.4f +- %.4f (%ld/%d episodes)\n", env.c_str(),
                  r.success_rate, r.std_error, r.successes, r.episodes);
    } else if (app.got_subcommand("continual")) {
      auto cfg = resolve_config(continual_f, "fourrooms-v0");
      cip::ContinualReport rep = cip::run_continual(cfg);
      std::printf("report: %s\n", rep.report_path.c_str());
      for (int phase = 0; phase < 3; ++phase)
        std::printf("phase %d: median frames primitives %.0f vs flat %.0f\n", phase,
                    rep.median_frames_primitives[phase], rep.median_frames_flat[phase]);
    } else if (app.got_subcommand("transfer")) {
      auto cfg = resolve_config(transfer_f, "fourrooms-v1");
      print_train_result(cip::run_transfer(transfer_ckpt, cfg));
    } else if (app.got_subcommand("combine")) {
      auto cfg = resolve_config(combine_f, "bandits");
      print_train_result(cip::run_combine(combine_ckpts, cfg));
    } else if (app.got_subcommand("export")) {
      cip::ExportCounts counts = cip::export_plot_data(export_f.out_dir);
      std::printf("wrote %s (%ld rows) and %s (%ld rows)\n", counts.success_path.c_str(),
                  counts.success_rows, counts.activations_path.c_str(), counts.activation_rows);
    } else if (app.got_subcommand("selftest")) {
      return run_selftest();
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
