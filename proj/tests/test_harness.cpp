#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <memory>

#include "cip/cip.hpp"

using namespace cip;

namespace {

std::string tmp_dir(const std::string& name) {
  const std::string dir = (std::filesystem::temp_directory_path() / "cip_tests" / name).string();
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

// Fast experiment config for harness tests: tiny MLP model, small vec env.
ExperimentConfig tiny_cfg(const std::string& out) {
  ExperimentConfig cfg;
  cfg.env = "bandits";
  cfg.k = 2;
  cfg.encoder = "mlp";
  cfg.mlp_hidden = {6};
  cfg.latent_dim = 2;
  cfg.head_hidden = 4;
  cfg.decoder_hidden = {5};
  cfg.value_hidden = {4};
  cfg.n_envs = 4;
  cfg.seeds = {1};
  cfg.eval_episodes = 16;
  cfg.eval_workers = 4;
  cfg.eval_every = 100'000;
  cfg.max_frames = 1'600;
  cfg.out_dir = out;
  cfg.jobs = 1;
  cfg.train.algorithm = Algorithm::A2c;
  return cfg;
}

class ScriptedEnv final : public Env {
 public:
  explicit ScriptedEnv(bool succeed) : succeed_(succeed) {}
  StepResult reset() override {
    t_ = 0;
    StepResult r;
    r.obs = {0.0, 1.0};
    return r;
  }
  StepResult step(int) override {
    ++t_;
    StepResult r;
    r.obs = {0.0, 1.0};
    const bool stop = succeed_ || t_ >= 5;
    r.reward = succeed_ ? 1.0 : 0.0;
    r.done = stop;
    r.info.success = succeed_;
    r.info.terminal = stop;
    return r;
  }
  int obs_dim() const override { return 2; }
  int n_actions() const override { return 2; }
  int time_limit() const override { return 5; }
  std::string save_state() const override { return "scripted"; }
  void load_state(const std::string&) override {}

 private:
  bool succeed_;
  int t_ = 0;
};

}  // namespace

TEST_CASE("config text round-trips and rejects unknown keys") {
  ExperimentConfig cfg = default_config("fourrooms-v1");
  cfg.seeds = {3, 9};
  cfg.train.beta_ind = 0.009;
  const std::string text = config_to_text(cfg);
  ExperimentConfig parsed;
  apply_config_text(parsed, text);
  CHECK(config_to_text(parsed) == text);

  ExperimentConfig c;
  CHECK_THROWS_AS(apply_config_text(c, "[experiment]\nenvv = bandits\n"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_text(c, "[nonsense]\nk = 2\n"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_text(c, "[train]\nlr = fast\n"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_text(c, "k = 2\n"), std::invalid_argument);
  CHECK_THROWS_AS(apply_config_text(c, "[experiment\nk = 2\n"), std::invalid_argument);

  // Comments and blank lines are fine; values re-parse.
  apply_config_text(c, "# comment\n[experiment]\n\nk = 3  # trailing\n");
  CHECK(c.k == 3);

  ExperimentConfig bad;
  bad.seeds = {1, 1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.seeds = {};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("env presets follow the per-task hyperparameter tables") {
  ExperimentConfig bandits = default_config("bandits");
  CHECK(bandits.train.algorithm == Algorithm::Ppo);
  CHECK(bandits.train.optimizer == OptimizerKind::Adam);
  CHECK(bandits.train.lr == Catch::Approx(3e-5));
  CHECK(bandits.train.entropy_coef == 0.0);
  CHECK(bandits.train.value_coef == 1.0);
  CHECK(bandits.train.ppo_epochs == 10);
  CHECK(bandits.max_frames == 3'000'000);

  ExperimentConfig rooms = default_config("fourrooms-v0");
  CHECK(rooms.train.algorithm == Algorithm::A2c);
  CHECK(rooms.train.optimizer == OptimizerKind::RmsProp);
  CHECK(rooms.train.lr == Catch::Approx(7e-4));
  CHECK(rooms.train.entropy_coef == Catch::Approx(1e-2));
  CHECK(rooms.train.value_coef == 0.5);
  CHECK(rooms.phase_max_frames == 10'000'000);
  for (const auto& cfg : {bandits, rooms}) {
    CHECK(cfg.train.gamma == Catch::Approx(0.99));
    CHECK(cfg.train.lambda == Catch::Approx(0.95));
    CHECK(cfg.train.max_grad_norm == 0.5);
    CHECK(cfg.n_envs == 64);
    CHECK(cfg.train.t_steps == 5);
    CHECK(cfg.seeds.size() == 5);
    CHECK(cfg.train.beta_ind == Catch::Approx(0.005));
    CHECK(cfg.train.beta_reg == Catch::Approx(0.005));
  }
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  const std::string dir = tmp_dir("ckpt_roundtrip");
  ExperimentConfig cfg = tiny_cfg(dir + "/run");
  SeedRun run(cfg, 1, cfg.out_dir + "/seed_1", nullptr);
  run.init_fresh();
  run.run_phase(cfg.env, 0, 1600, -1.0);
  const std::string p1 = run.save("a.ckpt", true);

  Checkpoint ck = load_checkpoint(p1);
  CHECK(ck.frames == 1600);
  CHECK(ck.ensemble.K() == 2);
  REQUIRE(ck.has_train_state);
  const std::string p2 = dir + "/b.ckpt";
  save_checkpoint(ck, p2);
  CHECK(slurp(p1) == slurp(p2));
  CHECK(slurp(p1 + ".bin") == slurp(p2 + ".bin"));
  CHECK(slurp(p1 + ".state.bin") == slurp(p2 + ".state.bin"));

  // Parameter blob is f32: loaded values are exactly the quantized ones.
  bool params_match = true;
  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < ck.ensemble.prims[k].params.count(); ++i)
      params_match = params_match && ck.ensemble.prims[k].params.value(i).data ==
                                         run.ensemble().prims[k].params.value(i).data;
  CHECK(params_match);

  // Provenance round-trips.
  CHECK(ck.provenance == std::vector<std::string>{"fresh", "fresh"});
}

TEST_CASE("resume from a mid-run checkpoint reproduces the trajectory") {
  const std::string dir = tmp_dir("resume");
  ExperimentConfig cfg = tiny_cfg(dir + "/a");

  SeedRun run_a(cfg, 1, cfg.out_dir + "/seed_1", nullptr);
  run_a.init_fresh();
  run_a.run_phase(cfg.env, 0, 1600, -1.0);
  const std::string mid = run_a.save("mid.ckpt", true);
  run_a.run_phase(cfg.env, 0, 1600, -1.0);  // same env: continues in place
  CHECK(run_a.frames() == 3200);

  ExperimentConfig cfg_b = tiny_cfg(dir + "/b");
  SeedRun run_b(cfg_b, 1, cfg_b.out_dir + "/seed_1", nullptr);
  run_b.restore(load_checkpoint(mid));
  CHECK(run_b.frames() == 1600);
  run_b.run_phase(cfg.env, 0, 1600, -1.0);
  CHECK(run_b.frames() == 3200);

  for (int k = 0; k < 2; ++k)
    for (int i = 0; i < run_a.ensemble().prims[k].params.count(); ++i)
      REQUIRE(run_a.ensemble().prims[k].params.value(i).data ==
              run_b.ensemble().prims[k].params.value(i).data);
}

TEST_CASE("transfer resets the optimizer and continues the frame counter") {
  const std::string dir = tmp_dir("transfer");
  ExperimentConfig cfg = tiny_cfg(dir + "/src");
  TrainRunResult src = run_train(cfg);
  REQUIRE(src.seeds.size() == 1);

  ExperimentConfig dst = tiny_cfg(dir + "/dst");
  dst.max_frames = 800;
  TrainRunResult moved = run_transfer(src.seeds[0].checkpoint_path, dst);
  REQUIRE(moved.seeds.size() == 1);
  // Frames continue for sample-efficiency accounting.
  Checkpoint final_ck = load_checkpoint(moved.seeds[0].checkpoint_path);
  CHECK(final_ck.frames == 1600 + 800);

  // Incompatible env is rejected.
  ExperimentConfig bad = tiny_cfg(dir + "/bad");
  bad.env = "fourrooms-v0";
  CHECK_THROWS_AS(run_transfer(src.seeds[0].checkpoint_path, bad), std::invalid_argument);
}

TEST_CASE("evaluate: exact rates on scripted envs, deterministic on real ones") {
  Rng init(3);
  PrimitiveConfig pc;
  pc.obs_dim = 2;
  pc.n_actions = 2;
  pc.encoder = EncoderKind::Mlp;
  pc.mlp_hidden = {4};
  pc.latent_dim = 2;
  pc.head_hidden = 3;
  pc.decoder_hidden = {4};
  pc.value_hidden = {3};
  PrimitiveEnsemble e = PrimitiveEnsemble::create(2, pc, 0.005, 0.005, init);

  EvalResult good = evaluate(
      e, [](std::uint64_t) { return std::make_unique<ScriptedEnv>(true); }, 100, 7, 5);
  CHECK(good.success_rate == 1.0);
  CHECK(good.std_error == 0.0);
  EvalResult bad = evaluate(
      e, [](std::uint64_t) { return std::make_unique<ScriptedEnv>(false); }, 100, 7, 5);
  CHECK(bad.success_rate == 0.0);

  Rng init2(4);
  PrimitiveConfig pc2 = pc;
  pc2.obs_dim = 104;
  pc2.n_actions = 4;
  PrimitiveEnsemble rooms = PrimitiveEnsemble::create(2, pc2, 0.005, 0.005, init2);
  EvalResult r1 = evaluate(rooms, "fourrooms-v2", 60, 10, 77);
  EvalResult r2 = evaluate(rooms, "fourrooms-v2", 60, 3, 77);
  CHECK(r1.successes == r2.successes);  // pure in (params, env spec, seed)
}

TEST_CASE("run_train with max_frames = 0 emits the initial evaluation row only") {
  const std::string dir = tmp_dir("zero_frames");
  ExperimentConfig cfg = tiny_cfg(dir + "/run");
  cfg.max_frames = 0;
  cfg.seeds = {4, 8};
  TrainRunResult res = run_train(cfg);
  REQUIRE(res.seeds.size() == 2);
  for (const auto& s : res.seeds) {
    CHECK(s.rows.size() == 1);
    CHECK(s.rows[0].frames == 0);
    auto reread = read_metrics_csv(s.metrics_path);
    REQUIRE(reread.size() == 1);
    CHECK(reread[0].success_rate == s.rows[0].success_rate);
    double act_sum = 0.0;
    for (double a : reread[0].activation) act_sum += a;
    CHECK(act_sum == Catch::Approx(1.0).margin(1e-9));
  }
  CHECK(std::filesystem::exists(dir + "/run/config.cfg"));
  CHECK(std::filesystem::exists(dir + "/run/summary.txt"));
}

TEST_CASE("metrics rows survive the CSV round trip exactly") {
  const std::string dir = tmp_dir("metrics");
  MetricsWriter w;
  w.open(dir + "/m.csv", 2);
  MetricsRow row;
  row.frames = 320;
  row.update_idx = 1;
  row.phase = 2;
  row.success_rate = 0.123456789012345;
  row.activation = {0.25, 0.75};
  row.mean_info_cost = {1.5, 2.5e-7};
  row.mean_alpha = {0.4, 0.6};
  row.alpha_entropy = 0.69;
  row.pg_loss = -1e-3;
  row.value_loss = 0.5;
  row.entropy = 1.09;
  row.reg_loss = 3e-5;
  row.grad_norm = 0.49;
  row.wall_clock_s = 12.5;
  w.append(row);
  auto rows = read_metrics_csv(dir + "/m.csv");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].success_rate == row.success_rate);
  CHECK(rows[0].activation == row.activation);
  CHECK(rows[0].mean_info_cost == row.mean_info_cost);
  CHECK(rows[0].phase == 2);
}

TEST_CASE("export produces the tidy plot CSVs with exact headers") {
  const std::string dir = tmp_dir("export");
  ExperimentConfig cfg = tiny_cfg(dir + "/run");
  cfg.seeds = {0, 2};
  cfg.max_frames = 640;
  cfg.eval_every = 320;
  TrainRunResult res = run_train(cfg);

  ExportCounts counts = export_plot_data(res.out_dir);
  std::ifstream succ(counts.success_path);
  std::string header;
  std::getline(succ, header);
  CHECK(header == "frames,seed,success_rate");
  std::ifstream act(counts.activations_path);
  std::getline(act, header);
  CHECK(header == "frames,seed,primitive,activation_freq");

  long expected_rows = 0;
  for (const auto& s : res.seeds) expected_rows += static_cast<long>(s.rows.size());
  CHECK(counts.success_rows == expected_rows);
  CHECK(counts.activation_rows == expected_rows * 2);

  // Activation rows per (frames, seed) sum to 1.
  std::string line;
  std::map<std::string, double> sums;
  while (std::getline(act, line)) {
    const auto f = split_comma(line);
    REQUIRE(f.size() == 4);
    sums[f[0] + "," + f[1]] += std::stod(f[3]);
  }
  for (const auto& [key, total] : sums) CHECK(total == Catch::Approx(1.0).margin(1e-9));

  CHECK_THROWS_AS(export_plot_data(dir + "/nonexistent"), std::runtime_error);
}

TEST_CASE("combine doubles K and records provenance through save/load") {
  const std::string dir = tmp_dir("combine");
  ExperimentConfig cfg = tiny_cfg(dir + "/src");
  TrainRunResult src = run_train(cfg);

  ExperimentConfig cmb = tiny_cfg(dir + "/combined");
  cmb.max_frames = 640;
  const std::string ckpt = src.seeds[0].checkpoint_path;
  TrainRunResult res = run_combine({ckpt, ckpt}, cmb);
  Checkpoint final_ck = load_checkpoint(res.seeds[0].checkpoint_path);
  CHECK(final_ck.ensemble.K() == 4);
  REQUIRE(final_ck.provenance.size() == 4);
  CHECK(final_ck.provenance[0] == ckpt + "#0");
  CHECK(final_ck.provenance[3] == ckpt + "#1");
}
