#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "cip/checkpoint.hpp"
#include "cip/config.hpp"
#include "cip/distributions.hpp"
#include "cip/evaluate.hpp"
#include "cip/metrics.hpp"
#include "cip/trainer.hpp"

namespace cip {

struct PhaseOutcome {
  int phase = 0;
  std::string env;
  double threshold = -1.0;
  long frames_used = 0;
  bool reached = false;
  long frames_to_threshold = -1;
  double final_success = 0.0;
  std::vector<double> activation;  // per primitive over the whole phase
};

// One seed's training process: ensemble + optimizer + rollout worker +
// metrics stream. Phases share the model and the frame counter; each phase
// gets a fresh env and a reset optimizer (transfer semantics).
class SeedRun {
 public:
  SeedRun(ExperimentConfig cfg, std::uint64_t seed, std::string run_dir,
          std::shared_ptr<const FourRoomsLayout> layout)
      : cfg_(std::move(cfg)),
        seed_(seed),
        dir_(std::move(run_dir)),
        layout_(std::move(layout)),
        opt_(cfg_.train.optimizer, cfg_.train),
        start_(std::chrono::steady_clock::now()) {
    std::filesystem::create_directories(dir_);
  }

  // Fresh model. The flat baseline is a K=1 deterministic-latent ensemble
  // with both betas zero, trained through the identical path.
  void init_fresh(bool flat_baseline = false) {
    auto probe_env = make_env(cfg_.env, 0, layout_.get());
    Env& probe = *probe_env;
    PrimitiveConfig pc = cfg_.primitive_config(probe.obs_dim(), probe.n_actions());
    Rng init_rng(derive_seed(seed_, 0));
    if (flat_baseline) {
      ensemble_ = make_flat_baseline(pc, init_rng);
      cfg_.train.beta_ind = 0.0;
      cfg_.train.beta_reg = 0.0;
      cfg_.k = 1;
    } else {
      ensemble_ = PrimitiveEnsemble::create(cfg_.k, pc, cfg_.train.beta_ind, cfg_.train.beta_reg,
                                            init_rng);
    }
    ensemble_.selection_mode = selection_mode_from_string(cfg_.selection_mode);
    provenance_.assign(ensemble_.K(), "fresh");
  }

  // Adopts an existing model (transfer / combine): optimizer state is reset,
  // the frame counter continues from `frames_offset`.
  void init_from_ensemble(PrimitiveEnsemble e, std::vector<std::string> provenance,
                          long frames_offset) {
    ensemble_ = std::move(e);
    provenance_ = std::move(provenance);
    if (provenance_.empty()) provenance_.assign(ensemble_.K(), "fresh");
    frames_total_ = frames_offset;
    opt_.reset();
  }

  // Exact resume: restores parameters, optimizer slots, env states, hidden
  // states, and rng streams from a checkpoint with training state.
  void restore(const Checkpoint& ck) {
    if (!ck.has_train_state)
      throw std::invalid_argument("SeedRun::restore: checkpoint has no training state");
    ensemble_ = ck.ensemble;
    provenance_ = ck.provenance;
    frames_total_ = ck.frames;
    opt_.reset();
    opt_.m1() = ck.opt_m1;
    opt_.m2() = ck.opt_m2;
    opt_.set_step_count(ck.opt_step_count);
    train_rng_.load_state(ck.rng_train);

    auto vec = std::make_unique<VecEnv>(ck.config.env, cfg_.n_envs, 0, layout_.get());
    for (int i = 0; i < vec->size(); ++i) vec->env(i).load_state(ck.env_states[i]);
    worker_ = std::make_unique<RolloutWorker>(std::move(vec), 0);
    worker_->rng().load_state(ck.rng_worker);
    if (ck.worker_initialized) {
      worker_->hiddens() = ck.hiddens;
      worker_->last_obs_ref() = ck.last_obs;
      worker_->set_initialized(true);
    }
    worker_env_ = ck.config.env;
  }

  // Trains on one env until the frame cap or the success threshold
  // (threshold < 0 disables early stop). Appends metrics rows throughout.
  // Calling again with the same env continues the existing worker and
  // optimizer (resume); a new env means transfer: fresh worker, fresh
  // optimizer state.
  PhaseOutcome run_phase(const std::string& env_spec, int phase, long frame_cap,
                         double threshold) {
    if (ensemble_.K() == 0) throw std::logic_error("SeedRun: model not initialized");
    current_env_ = env_spec;
    if (!worker_ || worker_env_ != env_spec) {
      auto vec = std::make_unique<VecEnv>(
          env_spec, cfg_.n_envs,
          derive_seed(seed_, 1000 + static_cast<std::uint64_t>(phase) * 2), layout_.get());
      worker_ = std::make_unique<RolloutWorker>(
          std::move(vec), derive_seed(seed_, 1001 + static_cast<std::uint64_t>(phase) * 2));
      worker_env_ = env_spec;
      opt_.reset();
    }
    if (!writer_.is_open()) writer_.open(dir_ + "/metrics.csv", ensemble_.K());

    PhaseOutcome out;
    out.phase = phase;
    out.env = env_spec;
    out.threshold = threshold;
    std::vector<long> phase_act(ensemble_.K(), 0);
    long phase_frames = 0;
    window_.reset(ensemble_.K());

    EvalResult ev = eval_now();
    append_row(phase, ev.success_rate);
    out.final_success = ev.success_rate;
    if (threshold >= 0.0 && ev.success_rate >= threshold) {
      out.reached = true;
      out.frames_to_threshold = 0;
    }

    long next_eval = cfg_.eval_every;
    while (!out.reached && phase_frames < frame_cap) {
      RolloutBatch batch = worker_->collect(ensemble_, cfg_.train.t_steps);
      UpdateStats stats = apply_update(ensemble_, batch, cfg_.train, opt_);
      accumulate(batch, stats);
      for (int k = 0; k < ensemble_.K(); ++k) phase_act[k] += batch.activation_counts[k];
      phase_frames += stats.frames;
      frames_total_ += stats.frames;
      ++update_idx_;
      if (phase_frames >= next_eval || phase_frames >= frame_cap) {
        next_eval += cfg_.eval_every;
        ev = eval_now();
        append_row(phase, ev.success_rate);
        out.final_success = ev.success_rate;
        if (threshold >= 0.0 && ev.success_rate >= threshold) {
          out.reached = true;
          out.frames_to_threshold = phase_frames;
        }
      }
    }
    out.frames_used = phase_frames;
    long total_act = 0;
    for (long c : phase_act) total_act += c;
    out.activation.assign(ensemble_.K(), total_act > 0 ? 0.0 : 1.0 / ensemble_.K());
    if (total_act > 0)
      for (int k = 0; k < ensemble_.K(); ++k)
        out.activation[k] = static_cast<double>(phase_act[k]) / static_cast<double>(total_act);
    return out;
  }

  // Writes a checkpoint; with_state additionally captures everything needed
  // for an exact resume. Live parameters are quantized through f32 so the
  // continuing process matches a later resume bit for bit.
  std::string save(const std::string& filename, bool with_state) {
    quantize_params_f32(ensemble_);
    Checkpoint ck;
    ck.frames = frames_total_;
    ck.config = cfg_;
    ck.config.env = current_env_.empty() ? cfg_.env : current_env_;
    ck.config.k = ensemble_.K();
    ck.provenance = provenance_;
    ck.ensemble = ensemble_;
    if (with_state && worker_) {
      ck.has_train_state = true;
      ck.opt_kind = cfg_.train.optimizer == OptimizerKind::RmsProp ? "rmsprop" : "adam";
      ck.opt_step_count = opt_.step_count();
      ck.opt_m1 = opt_.m1();
      ck.opt_m2 = opt_.m2();
      ck.rng_train = train_rng_.save_state();
      ck.rng_worker = worker_->rng().save_state();
      ck.worker_initialized = worker_->initialized();
      if (worker_->initialized()) {
        ck.hiddens = worker_->hiddens();
        ck.last_obs = worker_->last_obs();
      }
      for (int i = 0; i < worker_->envs().size(); ++i)
        ck.env_states.push_back(worker_->envs().env(i).save_state());
    }
    const std::string path = dir_ + "/" + filename;
    save_checkpoint(ck, path);
    return path;
  }

  EvalResult eval_now() {
    return evaluate(ensemble_, current_env_.empty() ? cfg_.env : current_env_, cfg_.eval_episodes,
                    cfg_.eval_workers, derive_seed(seed_, 3), layout_.get());
  }

  PrimitiveEnsemble& ensemble() { return ensemble_; }
  const ExperimentConfig& cfg() const { return cfg_; }
  long frames() const { return frames_total_; }
  long updates() const { return update_idx_; }
  const std::vector<MetricsRow>& rows() const { return rows_; }
  const std::string& dir() const { return dir_; }
  std::uint64_t seed() const { return seed_; }
  Optimizer& optimizer() { return opt_; }

 private:
  struct Window {
    long frames = 0;
    long updates = 0;
    long steps = 0;
    long episodes = 0;
    long successes = 0;
    std::vector<long> act_counts;
    std::vector<double> info_sum, alpha_sum;
    double alpha_ent_sum = 0.0;
    double pg = 0.0, value = 0.0, entropy = 0.0, reg = 0.0, grad_norm = 0.0;

    void reset(int k) {
      *this = Window{};
      act_counts.assign(k, 0);
      info_sum.assign(k, 0.0);
      alpha_sum.assign(k, 0.0);
    }
  };

  void accumulate(const RolloutBatch& batch, const UpdateStats& stats) {
    window_.frames += stats.frames;
    window_.updates += 1;
    window_.pg += stats.pg_loss;
    window_.value += stats.value_loss;
    window_.entropy += stats.entropy;
    window_.reg += stats.reg_loss;
    window_.grad_norm += stats.grad_norm;
    window_.episodes += batch.episodes;
    window_.successes += batch.successes;
    for (int k = 0; k < batch.K; ++k) {
      window_.act_counts[k] += batch.activation_counts[k];
      window_.info_sum[k] += stats.mean_info_cost[k] * stats.frames;
      window_.alpha_sum[k] += stats.mean_alpha[k] * stats.frames;
    }
    std::vector<double> arow(batch.K);
    for (std::size_t tn = 0; tn < static_cast<std::size_t>(batch.T) * batch.N; ++tn) {
      for (int k = 0; k < batch.K; ++k) arow[k] = batch.alpha[tn * batch.K + k];
      window_.alpha_ent_sum += entropy(arow);
      ++window_.steps;
    }
  }

  void append_row(int phase, double success_rate) {
    const int K = ensemble_.K();
    MetricsRow row;
    row.frames = frames_total_;
    row.update_idx = update_idx_;
    row.phase = phase;
    row.success_rate = success_rate;
    row.train_success_rate =
        window_.episodes > 0
            ? static_cast<double>(window_.successes) / static_cast<double>(window_.episodes)
            : 0.0;
    row.activation.assign(K, 1.0 / K);
    row.mean_info_cost.assign(K, 0.0);
    row.mean_alpha.assign(K, 0.0);
    long total_act = 0;
    for (long c : window_.act_counts) total_act += c;
    if (total_act > 0)
      for (int k = 0; k < K; ++k)
        row.activation[k] =
            static_cast<double>(window_.act_counts[k]) / static_cast<double>(total_act);
    if (window_.frames > 0)
      for (int k = 0; k < K; ++k) {
        row.mean_info_cost[k] = window_.info_sum[k] / static_cast<double>(window_.frames);
        row.mean_alpha[k] = window_.alpha_sum[k] / static_cast<double>(window_.frames);
      }
    row.alpha_entropy = window_.steps > 0 ? window_.alpha_ent_sum / window_.steps : 0.0;
    if (window_.updates > 0) {
      row.pg_loss = window_.pg / window_.updates;
      row.value_loss = window_.value / window_.updates;
      row.entropy = window_.entropy / window_.updates;
      row.reg_loss = window_.reg / window_.updates;
      row.grad_norm = window_.grad_norm / window_.updates;
    }
    row.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    rows_.push_back(row);
    writer_.append(row);
    window_.reset(K);
  }

  ExperimentConfig cfg_;
  std::uint64_t seed_;
  std::string dir_;
  std::shared_ptr<const FourRoomsLayout> layout_;
  PrimitiveEnsemble ensemble_;
  Optimizer opt_;
  std::unique_ptr<RolloutWorker> worker_;
  std::string worker_env_;
  std::string current_env_;
  Rng train_rng_{0};
  MetricsWriter writer_;
  std::vector<MetricsRow> rows_;
  std::vector<std::string> provenance_;
  Window window_;
  long frames_total_ = 0;
  long update_idx_ = 0;
  std::chrono::steady_clock::time_point start_;
};

namespace detail {

inline std::shared_ptr<const FourRoomsLayout> resolve_layout(const ExperimentConfig& cfg) {
  if (cfg.map_file.empty()) return nullptr;  // env falls back to the built-in map
  return std::make_shared<FourRoomsLayout>(FourRoomsLayout::load_file(cfg.map_file));
}

// Runs fn(i) for i in [0, n) on up to `jobs` threads.
inline void parallel_for(int n, int jobs, const std::function<void(int)>& fn) {
  if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(jobs);
  for (int w = 0; w < jobs; ++w)
    pool.emplace_back([&, w] {
      try {
        for (int i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

struct TrainRunResult {
  struct PerSeed {
    std::uint64_t seed = 0;
    PhaseOutcome outcome;
    std::string checkpoint_path;
    std::string metrics_path;
    std::vector<MetricsRow> rows;
  };
  std::vector<PerSeed> seeds;
  double median_final = 0.0;
  double iqr_final = 0.0;
  std::string out_dir;
};

namespace detail {

inline void write_summary(const TrainRunResult& res, const std::string& label) {
  std::ofstream out(res.out_dir + "/summary.txt");
  out << "run: " << label << "\n";
  out << "seeds: " << res.seeds.size() << "\n";
  for (const auto& s : res.seeds)
    out << "seed " << s.seed << ": final_success = " << fmt_g17(s.outcome.final_success)
        << ", frames = " << s.outcome.frames_used
        << (s.outcome.threshold >= 0
                ? (s.outcome.reached
                       ? ", reached threshold at " + std::to_string(s.outcome.frames_to_threshold)
                       : ", threshold not reached")
                : "")
        << "\n";
  out << "median_final_success = " << fmt_g17(res.median_final) << "\n";
  out << "iqr_final_success = " << fmt_g17(res.iqr_final) << "\n";
}

}  // namespace detail

// Trains one model per seed (in parallel up to cfg.jobs), writes per-seed
// metrics + final checkpoints + a summary, and returns everything needed to
// aggregate. `flat_baseline` trains the single flat policy instead.
inline TrainRunResult run_train(const ExperimentConfig& cfg, bool flat_baseline = false) {
  cfg.validate();
  auto layout = detail::resolve_layout(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream echo(cfg.out_dir + "/config.cfg");
    echo << config_to_text(cfg);
  }
  TrainRunResult res;
  res.out_dir = cfg.out_dir;
  res.seeds.resize(cfg.seeds.size());
  detail::parallel_for(static_cast<int>(cfg.seeds.size()), cfg.jobs, [&](int i) {
    const std::uint64_t seed = cfg.seeds[i];
    SeedRun run(cfg, seed, cfg.out_dir + "/seed_" + std::to_string(seed), layout);
    run.init_fresh(flat_baseline);
    PhaseOutcome outcome = run.run_phase(cfg.env, 0, cfg.max_frames, cfg.success_threshold);
    auto& slot = res.seeds[i];
    slot.seed = seed;
    slot.outcome = outcome;
    slot.checkpoint_path = run.save("final.ckpt", true);
    slot.metrics_path = run.dir() + "/metrics.csv";
    slot.rows = run.rows();
  });
  std::vector<double> finals;
  for (const auto& s : res.seeds) finals.push_back(s.outcome.final_success);
  res.median_final = median(finals);
  res.iqr_final = iqr(finals);
  detail::write_summary(res, flat_baseline ? "flat baseline" : "primitive ensemble");
  return res;
}

// --- continual curriculum ----------------------------------------------------

struct ContinualReport {
  struct Leg {
    std::string name;  // "primitives" or "flat"
    std::uint64_t seed = 0;
    std::vector<PhaseOutcome> phases;
    std::vector<long> boundaries;  // cumulative frames at each phase end
    std::string metrics_path;
  };
  std::vector<Leg> legs;
  std::vector<double> thresholds;
  // Per phase, medians of frames-to-threshold (cap when not reached).
  std::vector<double> median_frames_primitives;
  std::vector<double> median_frames_flat;
  std::string out_dir;
  std::string report_path;

  const Leg* find(const std::string& name, std::uint64_t seed) const {
    for (const auto& l : legs)
      if (l.name == name && l.seed == seed) return &l;
    return nullptr;
  }
};

// The v0 -> v1 -> v2 protocol: train to 100% / 100% / 60% success, capped at
// phase_max_frames per phase, run identically for the primitive ensemble and
// the flat transfer baseline. Optimizer state resets at each transfer; the
// frame counter continues.
inline ContinualReport run_continual(const ExperimentConfig& cfg) {
  cfg.validate();
  if (cfg.env.rfind("fourrooms-", 0) != 0)
    throw std::invalid_argument("run_continual: requires a fourrooms env");
  auto layout = detail::resolve_layout(cfg);
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream echo(cfg.out_dir + "/config.cfg");
    echo << config_to_text(cfg);
  }
  const std::vector<std::string> phase_envs = {"fourrooms-v0", "fourrooms-v1", "fourrooms-v2"};
  const std::vector<double> thresholds = {1.0, 1.0, 0.6};

  ContinualReport report;
  report.thresholds = thresholds;
  report.out_dir = cfg.out_dir;
  const int n_seeds = static_cast<int>(cfg.seeds.size());
  report.legs.resize(static_cast<std::size_t>(n_seeds) * 2);

  detail::parallel_for(n_seeds * 2, cfg.jobs, [&](int idx) {
    const bool flat = idx >= n_seeds;
    const std::uint64_t seed = cfg.seeds[idx % n_seeds];
    const std::string name = flat ? "flat" : "primitives";
    SeedRun run(cfg, seed, cfg.out_dir + "/" + name + "_seed_" + std::to_string(seed), layout);
    run.init_fresh(flat);
    ContinualReport::Leg leg;
    leg.name = name;
    leg.seed = seed;
    for (int phase = 0; phase < 3; ++phase) {
      PhaseOutcome out =
          run.run_phase(phase_envs[phase], phase, cfg.phase_max_frames, thresholds[phase]);
      leg.phases.push_back(out);
      leg.boundaries.push_back(run.frames());
      run.save("phase" + std::to_string(phase) + ".ckpt", false);
    }
    leg.metrics_path = run.dir() + "/metrics.csv";
    report.legs[idx] = std::move(leg);
  });

  for (int phase = 0; phase < 3; ++phase) {
    std::vector<double> prim, flat;
    for (const auto& leg : report.legs) {
      const auto& ph = leg.phases[phase];
      const double frames = ph.reached ? static_cast<double>(ph.frames_to_threshold)
                                       : static_cast<double>(cfg.phase_max_frames);
      (leg.name == "flat" ? flat : prim).push_back(frames);
    }
    report.median_frames_primitives.push_back(median(prim));
    report.median_frames_flat.push_back(median(flat));
  }

  report.report_path = cfg.out_dir + "/continual_report.txt";
  std::ofstream out(report.report_path);
  out << "continual curriculum: fourrooms-v0 -> fourrooms-v1 -> fourrooms-v2\n";
  out << "phase thresholds: (";
  for (std::size_t i = 0; i < thresholds.size(); ++i)
    out << (i ? ", " : "") << detail::fmt_g17(thresholds[i]);
  out << ")\n";
  out << "phase frame cap: " << cfg.phase_max_frames << "\n\n";
  for (const auto& leg : report.legs) {
    out << leg.name << " seed " << leg.seed << ":\n";
    for (const auto& ph : leg.phases) {
      out << "  phase " << ph.phase << " (" << ph.env << ", threshold "
          << detail::fmt_g17(ph.threshold) << "): frames_used = " << ph.frames_used
          << (ph.reached ? "" : " (threshold NOT reached)")
          << ", final_success = " << detail::fmt_g17(ph.final_success) << ", activation = [";
      for (std::size_t k = 0; k < ph.activation.size(); ++k)
        out << (k ? ", " : "") << detail::fmt_g17(ph.activation[k]);
      out << "]\n";
    }
    out << "  phase boundaries (cumulative frames): ";
    for (std::size_t i = 0; i < leg.boundaries.size(); ++i)
      out << (i ? ", " : "") << leg.boundaries[i];
    out << "\n";
  }
  out << "\nmedian frames to threshold per phase:\n";
  for (int phase = 0; phase < 3; ++phase) {
    out << "  phase " << phase
        << ": primitives = " << detail::fmt_g17(report.median_frames_primitives[phase])
        << ", flat = " << detail::fmt_g17(report.median_frames_flat[phase]) << ", gap = "
        << detail::fmt_g17(report.median_frames_flat[phase] -
                           report.median_frames_primitives[phase])
        << "\n";
  }
  return report;
}

// --- copy and combine ---------------------------------------------------------

// Concatenates the primitives of the given checkpoints into one ensemble and
// fine-tunes it on cfg.env; primitive provenance is recorded in the manifest.
inline TrainRunResult run_combine(const std::vector<std::string>& checkpoint_paths,
                                  const ExperimentConfig& cfg) {
  cfg.validate();
  if (checkpoint_paths.empty()) throw std::invalid_argument("run_combine: no checkpoints");
  auto layout = detail::resolve_layout(cfg);
  std::vector<Checkpoint> cks;
  for (const auto& p : checkpoint_paths) cks.push_back(load_checkpoint(p, layout.get()));
  std::vector<const PrimitiveEnsemble*> parts;
  for (const auto& ck : cks) parts.push_back(&ck.ensemble);
  PrimitiveEnsemble combined = combine(parts);
  std::vector<std::string> provenance;
  long frames_offset = 0;
  for (std::size_t i = 0; i < cks.size(); ++i) {
    for (int k = 0; k < cks[i].ensemble.K(); ++k)
      provenance.push_back(checkpoint_paths[i] + "#" + std::to_string(k));
    frames_offset = std::max(frames_offset, cks[i].frames);
  }

  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream echo(cfg.out_dir + "/config.cfg");
    echo << config_to_text(cfg);
  }
  TrainRunResult res;
  res.out_dir = cfg.out_dir;
  res.seeds.resize(cfg.seeds.size());
  detail::parallel_for(static_cast<int>(cfg.seeds.size()), cfg.jobs, [&](int i) {
    const std::uint64_t seed = cfg.seeds[i];
    SeedRun run(cfg, seed, cfg.out_dir + "/seed_" + std::to_string(seed), layout);
    run.init_from_ensemble(combined, provenance, frames_offset);
    PhaseOutcome outcome = run.run_phase(cfg.env, 0, cfg.max_frames, cfg.success_threshold);
    auto& slot = res.seeds[i];
    slot.seed = seed;
    slot.outcome = outcome;
    slot.checkpoint_path = run.save("final.ckpt", true);
    slot.metrics_path = run.dir() + "/metrics.csv";
    slot.rows = run.rows();
  });
  std::vector<double> finals;
  for (const auto& s : res.seeds) finals.push_back(s.outcome.final_success);
  res.median_final = median(finals);
  res.iqr_final = iqr(finals);
  detail::write_summary(res, "copy-and-combine fine-tune");
  return res;
}

// Fine-tunes a checkpointed model on a (possibly different) env: optimizer
// reset, frame counter continued for sample-efficiency accounting.
inline TrainRunResult run_transfer(const std::string& checkpoint_path,
                                   const ExperimentConfig& cfg) {
  cfg.validate();
  auto layout = detail::resolve_layout(cfg);
  Checkpoint ck = load_checkpoint(checkpoint_path, layout.get());
  {
    auto probe_env = make_env(cfg.env, 0, layout.get());
    Env& probe = *probe_env;
    if (probe.obs_dim() != ck.ensemble.obs_dim() || probe.n_actions() != ck.ensemble.n_actions())
      throw std::invalid_argument("run_transfer: checkpoint is incompatible with env " + cfg.env);
  }
  std::filesystem::create_directories(cfg.out_dir);
  {
    std::ofstream echo(cfg.out_dir + "/config.cfg");
    echo << config_to_text(cfg);
  }
  TrainRunResult res;
  res.out_dir = cfg.out_dir;
  res.seeds.resize(cfg.seeds.size());
  detail::parallel_for(static_cast<int>(cfg.seeds.size()), cfg.jobs, [&](int i) {
    const std::uint64_t seed = cfg.seeds[i];
    SeedRun run(cfg, seed, cfg.out_dir + "/seed_" + std::to_string(seed), layout);
    run.init_from_ensemble(ck.ensemble, ck.provenance, ck.frames);
    PhaseOutcome outcome = run.run_phase(cfg.env, 0, cfg.max_frames, cfg.success_threshold);
    auto& slot = res.seeds[i];
    slot.seed = seed;
    slot.outcome = outcome;
    slot.checkpoint_path = run.save("final.ckpt", true);
    slot.metrics_path = run.dir() + "/metrics.csv";
    slot.rows = run.rows();
  });
  std::vector<double> finals;
  for (const auto& s : res.seeds) finals.push_back(s.outcome.final_success);
  res.median_final = median(finals);
  res.iqr_final = iqr(finals);
  detail::write_summary(res, "transfer fine-tune from " + checkpoint_path);
  return res;
}

// --- plot-data export ----------------------------------------------------------

struct ExportCounts {
  long success_rows = 0;
  long activation_rows = 0;
  std::string success_path;
  std::string activations_path;
};

// Tidy CSVs for plotting: (frames, seed, success_rate) and
// (frames, seed, primitive, activation_freq), one row per metrics row (x K
// for activations), gathered from every '*seed_<n>/metrics.csv' under the
// run directory.
inline ExportCounts export_plot_data(const std::string& run_dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(run_dir)) throw std::runtime_error("export: no run directory " + run_dir);
  std::vector<std::pair<long, std::string>> found;  // (seed, metrics path)
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    if (!entry.is_directory()) continue;
    const std::string name = entry.path().filename().string();
    const std::size_t pos = name.rfind("seed_");
    if (pos == std::string::npos) continue;
    const std::string metrics = entry.path().string() + "/metrics.csv";
    if (!fs::exists(metrics)) continue;
    found.push_back({std::stol(name.substr(pos + 5)), metrics});
  }
  if (found.empty()) throw std::runtime_error("export: no seed metrics under " + run_dir);
  std::sort(found.begin(), found.end());

  const std::string ex_dir = run_dir + "/export";
  fs::create_directories(ex_dir);
  ExportCounts counts;
  counts.success_path = ex_dir + "/success.csv";
  counts.activations_path = ex_dir + "/activations.csv";
  std::ofstream succ(counts.success_path);
  std::ofstream act(counts.activations_path);
  succ << "frames,seed,success_rate\n";
  act << "frames,seed,primitive,activation_freq\n";
  for (const auto& [seed, path] : found) {
    for (const auto& row : read_metrics_csv(path)) {
      succ << row.frames << "," << seed << "," << detail::fmt_g17(row.success_rate) << "\n";
      ++counts.success_rows;
      for (std::size_t k = 0; k < row.activation.size(); ++k) {
        act << row.frames << "," << seed << "," << k << "," << detail::fmt_g17(row.activation[k])
            << "\n";
        ++counts.activation_rows;
      }
    }
  }
  return counts;
}

}  // namespace cip
