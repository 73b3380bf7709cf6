#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cip/envs.hpp"
#include "cip/primitives.hpp"
#include "cip/rng.hpp"

namespace cip {

enum class Algorithm { A2c, Ppo };
enum class OptimizerKind { RmsProp, Adam };

struct TrainConfig {
  Algorithm algorithm = Algorithm::A2c;
  OptimizerKind optimizer = OptimizerKind::RmsProp;
  double lr = 7e-4;
  double gamma = 0.99;
  double lambda = 0.95;
  double entropy_coef = 1e-2;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  double beta_ind = 0.005;
  double beta_reg = 0.005;
  double ppo_clip = 0.2;
  int ppo_epochs = 10;
  int t_steps = 5;
  // Alternative policy-gradient credit: log sum_k alpha_k pi_k(a|s) instead
  // of the selected primitive's log-prob weighted by alpha_sel.
  bool mixture_logprob = false;
  // Per-batch advantage standardization; applied for PPO only.
  bool normalize_adv_ppo = true;
  double rmsprop_alpha = 0.99;
  double rmsprop_eps = 1e-5;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (gamma < 0.0 || gamma >= 1.0) throw std::invalid_argument("TrainConfig: gamma must be in [0,1)");
    if (lambda < 0.0 || lambda > 1.0) throw std::invalid_argument("TrainConfig: lambda must be in [0,1]");
    if (lr <= 0.0) throw std::invalid_argument("TrainConfig: lr must be positive");
    if (entropy_coef < 0.0 || value_coef < 0.0 || max_grad_norm < 0.0 || beta_ind < 0.0 ||
        beta_reg < 0.0)
      throw std::invalid_argument("TrainConfig: coefficients must be >= 0");
    if (t_steps < 1) throw std::invalid_argument("TrainConfig: t_steps must be >= 1");
    if (ppo_epochs < 1) throw std::invalid_argument("TrainConfig: ppo_epochs must be >= 1");
  }
};

// On-policy T x N segment with everything needed to rebuild the update graph
// under current (or later, for PPO) parameters: observations, the latent
// noise that was drawn, initial hidden state, per-step competition outcome.
struct RolloutBatch {
  int T = 0, N = 0, K = 0, obs_dim = 0, latent_dim = 0, hidden_dim = 0;
  bool deterministic_latent = false;
  std::vector<double> obs;       // T*N*obs_dim
  std::vector<int> actions;      // T*N
  std::vector<int> selected;     // T*N
  std::vector<double> rewards;   // T*N
  std::vector<std::uint8_t> dones;  // T*N, done after this step
  std::vector<double> log_probs;    // T*N, executed action under the policy
  std::vector<double> values;       // T*N, selected primitive's critic
  std::vector<double> alpha;     // T*N*K
  std::vector<double> info_costs;   // T*N*K
  std::vector<double> eps;       // T*K*N*latent_dim (empty when deterministic)
  std::vector<double> h0;        // K*N*hidden_dim (empty for MLP encoders)
  std::vector<double> bootstrap;    // N, V(s_T) under a fresh competition draw
  // rollout bookkeeping
  long episodes = 0;
  long successes = 0;
  std::vector<long> activation_counts;  // per primitive

  std::size_t tn(int t, int i) const { return static_cast<std::size_t>(t) * N + i; }
};

// Owns the vectorized env, the per-primitive hidden states, and the rollout
// Rng; collect() advances everything by T steps. A worker reads an ensemble
// snapshot but never mutates it.
class RolloutWorker {
 public:
  RolloutWorker(std::unique_ptr<VecEnv> envs, std::uint64_t seed)
      : envs_(std::move(envs)), rng_(seed) {}

  VecEnv& envs() { return *envs_; }
  Rng& rng() { return rng_; }
  bool initialized() const { return initialized_; }

  void restart() {
    initialized_ = false;
    hiddens_.clear();
  }

  // Resets envs and hidden state on first use (or after restart()).
  void ensure_started(const PrimitiveEnsemble& ensemble) {
    if (initialized_) return;
    auto results = envs_->reset_all();
    last_obs_ = obs_matrix(results);
    hiddens_ = ensemble.zero_hiddens(envs_->size());
    initialized_ = true;
  }

  RolloutBatch collect(const PrimitiveEnsemble& ensemble, int T) {
    ensure_started(ensemble);
    const int N = envs_->size();
    const int K = ensemble.K();
    const int D = ensemble.obs_dim();
    const int L = ensemble.latent_dim();
    const bool det = ensemble.deterministic_latent();
    const bool rec = ensemble.recurrent();
    const int H = rec ? ensemble.hidden_dim() : 0;

    RolloutBatch b;
    b.T = T;
    b.N = N;
    b.K = K;
    b.obs_dim = D;
    b.latent_dim = L;
    b.hidden_dim = H;
    b.deterministic_latent = det;
    b.obs.resize(static_cast<std::size_t>(T) * N * D);
    b.actions.resize(static_cast<std::size_t>(T) * N);
    b.selected.resize(static_cast<std::size_t>(T) * N);
    b.rewards.resize(static_cast<std::size_t>(T) * N);
    b.dones.resize(static_cast<std::size_t>(T) * N);
    b.log_probs.resize(static_cast<std::size_t>(T) * N);
    b.values.resize(static_cast<std::size_t>(T) * N);
    b.alpha.resize(static_cast<std::size_t>(T) * N * K);
    b.info_costs.resize(static_cast<std::size_t>(T) * N * K);
    if (!det) b.eps.resize(static_cast<std::size_t>(T) * N * K * L);
    if (rec) {
      b.h0.resize(static_cast<std::size_t>(K) * N * H);
      for (int k = 0; k < K; ++k)
        std::copy(hiddens_[k].data.begin(), hiddens_[k].data.end(),
                  b.h0.begin() + static_cast<std::size_t>(k) * N * H);
    }
    b.bootstrap.resize(N);
    b.activation_counts.assign(K, 0);

    std::vector<int> actions(N), selected(N);
    for (int t = 0; t < T; ++t) {
      std::copy(last_obs_.data.begin(), last_obs_.data.end(),
                b.obs.begin() + static_cast<std::size_t>(t) * N * D);
      tape_.reset();
      StepEval ev = eval_step(ensemble, t, &b);
      for (int i = 0; i < N; ++i) {
        std::vector<double> arow(K);
        for (int k = 0; k < K; ++k) arow[k] = ev.alpha.at(i, k);
        const int sel = select(arow, ensemble.selection_mode, rng_);
        int action;
        double logp;
        if (ensemble.selection_mode == SelectionMode::Mixture) {
          std::vector<double> mix(envs_->n_actions(), 0.0);
          for (int k = 0; k < K; ++k)
            for (int a = 0; a < envs_->n_actions(); ++a)
              mix[a] += arow[k] * ev.probs[k].at(i, a);
          action = rng_.categorical(mix);
          logp = std::log(mix[action]);
        } else {
          action = rng_.categorical(ev.probs[sel].data.data() + static_cast<std::size_t>(i) * envs_->n_actions(),
                                    envs_->n_actions());
          logp = ev.log_probs[sel].at(i, action);
        }
        selected[i] = sel;
        actions[i] = action;
        b.selected[b.tn(t, i)] = sel;
        b.actions[b.tn(t, i)] = action;
        b.log_probs[b.tn(t, i)] = logp;
        b.values[b.tn(t, i)] = ev.values[sel].data[i];
        for (int k = 0; k < K; ++k) {
          b.alpha[(b.tn(t, i)) * K + k] = ev.alpha.at(i, k);
          b.info_costs[(b.tn(t, i)) * K + k] = ev.info_costs.at(i, k);
        }
        b.activation_counts[sel] += 1;
      }

      auto results = envs_->step_all(actions);
      for (int i = 0; i < N; ++i) {
        const auto& r = results[i];
        b.rewards[b.tn(t, i)] = r.reward;
        b.dones[b.tn(t, i)] = r.done ? 1 : 0;
        if (r.info.terminal) {
          ++b.episodes;
          if (r.info.success) ++b.successes;
        }
      }
      if (rec) {
        for (int k = 0; k < K; ++k) {
          hiddens_[k] = ev.h_new[k];
          for (int i = 0; i < N; ++i)
            if (results[i].done)
              for (int j = 0; j < H; ++j) hiddens_[k].at(i, j) = 0.0;
        }
      }
      last_obs_ = obs_matrix(results);
    }

    // Bootstrap values at s_T under a fresh competition draw.
    tape_.reset();
    StepEval ev = eval_step(ensemble, -1, nullptr);
    for (int i = 0; i < N; ++i) {
      std::vector<double> arow(K);
      for (int k = 0; k < K; ++k) arow[k] = ev.alpha.at(i, k);
      const int sel = select(arow, ensemble.selection_mode, rng_);
      b.bootstrap[i] = ev.values[sel].data[i];
    }
    tape_.reset();
    return b;
  }

  const Tensor& last_obs() const { return last_obs_; }
  std::vector<Tensor>& hiddens() { return hiddens_; }
  Tensor& last_obs_ref() { return last_obs_; }
  void set_initialized(bool v) { initialized_ = v; }

 private:
  struct StepEval {
    Tensor alpha;                   // {N, K}
    Tensor info_costs;              // {N, K}
    std::vector<Tensor> probs;      // K x {N, A}
    std::vector<Tensor> log_probs;  // K x {N, A}
    std::vector<Tensor> values;     // K x {N}
    std::vector<Tensor> h_new;      // K x {N, H}
  };

  // Runs the ensemble on last_obs_, drawing latent noise from the rollout
  // rng; records the noise into the batch when recording (t >= 0).
  StepEval eval_step(const PrimitiveEnsemble& ensemble, int t, RolloutBatch* b) {
    const int N = envs_->size();
    const int K = ensemble.K();
    const int L = ensemble.latent_dim();
    std::vector<Binding> binds;
    std::vector<Var> hvars, evars;
    for (int k = 0; k < K; ++k) {
      binds.push_back(bind_params(tape_, ensemble.prims[k].params));
      hvars.push_back(tape_.constant(hiddens_[k]));
      if (ensemble.deterministic_latent()) {
        evars.push_back(-1);
      } else {
        Tensor eps = Tensor::zeros({N, L});
        for (double& v : eps.data) v = rng_.normal();
        if (b && t >= 0)
          std::copy(eps.data.begin(), eps.data.end(),
                    b->eps.begin() +
                        (static_cast<std::size_t>(t) * N * K + static_cast<std::size_t>(k) * N) * L);
        evars.push_back(tape_.constant(std::move(eps)));
      }
    }
    Var obs_var = tape_.constant(last_obs_);
    EnsembleForward fwd = ensemble_forward(tape_, ensemble, binds, obs_var, hvars, evars);
    StepEval ev;
    ev.alpha = tape_.val(fwd.alpha);
    ev.info_costs = tape_.val(fwd.info_costs);
    for (int k = 0; k < K; ++k) {
      ev.probs.push_back(tape_.val(fwd.prim[k].probs));
      ev.log_probs.push_back(tape_.val(fwd.prim[k].log_probs));
      ev.values.push_back(tape_.val(fwd.prim[k].value));
      if (fwd.prim[k].h_new >= 0) ev.h_new.push_back(tape_.val(fwd.prim[k].h_new));
    }
    return ev;
  }

  std::unique_ptr<VecEnv> envs_;
  Rng rng_;
  Tape tape_;
  Tensor last_obs_;
  std::vector<Tensor> hiddens_;
  bool initialized_ = false;
};

// Generalized advantage estimation over a T x N segment:
//   delta_t = r_t + gamma * V_{t+1} * (1 - done_t) - V_t
//   A_t     = delta_t + gamma * lambda * (1 - done_t) * A_{t+1}
// returns = advantages + values.
inline void gae(const std::vector<double>& rewards, const std::vector<double>& values,
                const std::vector<std::uint8_t>& dones, const std::vector<double>& bootstrap,
                int T, int N, double gamma, double lambda, std::vector<double>& advantages,
                std::vector<double>& returns) {
  if (rewards.size() != static_cast<std::size_t>(T) * N || values.size() != rewards.size() ||
      dones.size() != rewards.size() || bootstrap.size() != static_cast<std::size_t>(N))
    throw std::invalid_argument("gae: shape mismatch");
  advantages.assign(rewards.size(), 0.0);
  returns.assign(rewards.size(), 0.0);
  for (int i = 0; i < N; ++i) {
    double acc = 0.0;
    for (int t = T - 1; t >= 0; --t) {
      const std::size_t idx = static_cast<std::size_t>(t) * N + i;
      const double next_v = t == T - 1 ? bootstrap[i] : values[idx + N];
      const double nonterm = dones[idx] ? 0.0 : 1.0;
      const double delta = rewards[idx] + gamma * next_v * nonterm - values[idx];
      acc = delta + gamma * lambda * nonterm * acc;
      advantages[idx] = acc;
      returns[idx] = acc + values[idx];
    }
  }
}

// --- optimizers --------------------------------------------------------------

inline std::vector<Tensor*> collect_params(PrimitiveEnsemble& e) {
  std::vector<Tensor*> out;
  for (auto& p : e.prims)
    for (auto& entry : p.params.entries) out.push_back(&entry.value);
  return out;
}

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, const TrainConfig& cfg) : kind_(kind), cfg_(cfg) {}

  void reset() {
    m1_.clear();
    m2_.clear();
    step_count_ = 0;
  }

  long step_count() const { return step_count_; }

  void step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads) {
    if (params.size() != grads.size()) throw std::invalid_argument("Optimizer::step: size mismatch");
    if (m2_.empty()) {
      for (auto* p : params) m2_.push_back(Tensor::zeros(p->shape));
      if (kind_ == OptimizerKind::Adam)
        for (auto* p : params) m1_.push_back(Tensor::zeros(p->shape));
    }
    ++step_count_;
    if (kind_ == OptimizerKind::RmsProp) {
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& theta = *params[p];
        const Tensor& g = grads[p];
        Tensor& sq = m2_[p];
        for (std::size_t i = 0; i < theta.size(); ++i) {
          sq.data[i] = cfg_.rmsprop_alpha * sq.data[i] +
                       (1.0 - cfg_.rmsprop_alpha) * g.data[i] * g.data[i];
          theta.data[i] -= cfg_.lr * g.data[i] / (std::sqrt(sq.data[i]) + cfg_.rmsprop_eps);
        }
      }
    } else {
      const double bc1 = 1.0 - std::pow(cfg_.adam_beta1, static_cast<double>(step_count_));
      const double bc2 = 1.0 - std::pow(cfg_.adam_beta2, static_cast<double>(step_count_));
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor& theta = *params[p];
        const Tensor& g = grads[p];
        Tensor& m = m1_[p];
        Tensor& v = m2_[p];
        for (std::size_t i = 0; i < theta.size(); ++i) {
          m.data[i] = cfg_.adam_beta1 * m.data[i] + (1.0 - cfg_.adam_beta1) * g.data[i];
          v.data[i] = cfg_.adam_beta2 * v.data[i] + (1.0 - cfg_.adam_beta2) * g.data[i] * g.data[i];
          theta.data[i] -=
              cfg_.lr * (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + cfg_.adam_eps);
        }
      }
    }
  }

  // Checkpoint support: slots in (m1..., m2...) order.
  std::vector<Tensor>& m1() { return m1_; }
  std::vector<Tensor>& m2() { return m2_; }
  void set_step_count(long c) { step_count_ = c; }
  OptimizerKind kind() const { return kind_; }

 private:
  OptimizerKind kind_;
  TrainConfig cfg_;
  std::vector<Tensor> m1_, m2_;
  long step_count_ = 0;
};

// --- update ------------------------------------------------------------------

struct UpdateStats {
  double loss = 0.0;
  double pg_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;   // mean entropy of the acting distribution
  double reg_loss = 0.0;  // beta-weighted information terms
  double grad_norm = 0.0;  // pre-clip global norm
  bool adv_normalized = false;
  long frames = 0;
  std::vector<double> mean_info_cost;  // per primitive
  std::vector<double> mean_alpha;      // per primitive
};

namespace detail {

struct LossBuild {
  Var loss = -1;
  double pg = 0.0, value = 0.0, entropy = 0.0, reg = 0.0;
  std::vector<double> recomputed_logp;  // T*N
  std::vector<Binding> binds;           // leaf vars per primitive
};

// Rebuilds the forward graph over the stored segment under the current
// parameters and assembles the scalar training loss. `old_logp` switches the
// policy-gradient term to the PPO clipped surrogate.
inline LossBuild build_loss(Tape& tape, const PrimitiveEnsemble& ensemble,
                            const RolloutBatch& b, const TrainConfig& cfg,
                            const std::vector<double>& adv, const std::vector<double>& ret,
                            const std::vector<double>* old_logp) {
  const int T = b.T, N = b.N, K = b.K;
  const double inv_tn = 1.0 / static_cast<double>(static_cast<std::size_t>(T) * N);
  LossBuild out;
  std::vector<Binding>& binds = out.binds;
  std::vector<Var> hvars;
  for (int k = 0; k < K; ++k) {
    binds.push_back(bind_params(tape, ensemble.prims[k].params));
    if (b.hidden_dim > 0) {
      Tensor h0 = Tensor::zeros({N, b.hidden_dim});
      std::copy(b.h0.begin() + static_cast<std::size_t>(k) * N * b.hidden_dim,
                b.h0.begin() + static_cast<std::size_t>(k + 1) * N * b.hidden_dim, h0.data.begin());
      hvars.push_back(tape.constant(std::move(h0)));
    } else {
      hvars.push_back(tape.constant(Tensor::zeros({N, 1})));
    }
  }

  out.recomputed_logp.resize(static_cast<std::size_t>(T) * N);
  Var pg_sum = -1, value_sum = -1, ent_sum = -1, kl_sum = -1, lreg_sum = -1;
  auto accumulate = [&tape](Var& acc, Var term) {
    acc = acc < 0 ? term : tape.add(acc, term);
  };

  for (int t = 0; t < T; ++t) {
    Tensor obs = Tensor::zeros({N, b.obs_dim});
    std::copy(b.obs.begin() + static_cast<std::size_t>(t) * N * b.obs_dim,
              b.obs.begin() + static_cast<std::size_t>(t + 1) * N * b.obs_dim, obs.data.begin());
    Var obs_var = tape.constant(std::move(obs));
    std::vector<Var> evars(K, -1);
    if (!b.deterministic_latent) {
      for (int k = 0; k < K; ++k) {
        Tensor eps = Tensor::zeros({N, b.latent_dim});
        const std::size_t base =
            (static_cast<std::size_t>(t) * N * K + static_cast<std::size_t>(k) * N) * b.latent_dim;
        std::copy(b.eps.begin() + base, b.eps.begin() + base + static_cast<std::size_t>(N) * b.latent_dim,
                  eps.data.begin());
        evars[k] = tape.constant(std::move(eps));
      }
    }
    EnsembleForward fwd = ensemble_forward(tape, ensemble, binds, obs_var, hvars, evars);

    std::vector<int> actions_t(N), selected_t(N);
    for (int i = 0; i < N; ++i) {
      actions_t[i] = b.actions[b.tn(t, i)];
      selected_t[i] = b.selected[b.tn(t, i)];
    }

    std::vector<Var> logp_k(K), value_k(K), ent_k(K);
    for (int k = 0; k < K; ++k) {
      logp_k[k] = tape.gather_cols(fwd.prim[k].log_probs, actions_t);
      value_k[k] = fwd.prim[k].value;
      ent_k[k] = tape.neg(tape.sum_rows(tape.mul(fwd.prim[k].probs, fwd.prim[k].log_probs)));
    }
    Var alpha_sel = tape.gather_cols(fwd.alpha, selected_t);
    Var value_sel = tape.select_k(value_k, selected_t);
    Var ent_sel = tape.select_k(ent_k, selected_t);

    Var logp_exec;  // log-prob of the executed action under the acting policy
    if (cfg.mixture_logprob) {
      std::vector<Var> comps(K);
      for (int k = 0; k < K; ++k) {
        Var log_alpha_k = tape.log(tape.gather_cols(fwd.alpha, std::vector<int>(N, k)));
        comps[k] = tape.add(log_alpha_k, logp_k[k]);
      }
      logp_exec = tape.logsumexp_rows(tape.stack_cols(comps));
    } else {
      logp_exec = tape.select_k(logp_k, selected_t);
    }
    {
      const Tensor& lp = tape.val(logp_exec);
      for (int i = 0; i < N; ++i) out.recomputed_logp[b.tn(t, i)] = lp.data[i];
    }

    Tensor adv_t = Tensor::zeros({N});
    Tensor ret_t = Tensor::zeros({N});
    for (int i = 0; i < N; ++i) {
      adv_t.data[i] = adv[b.tn(t, i)];
      ret_t.data[i] = ret[b.tn(t, i)];
    }
    Var adv_const = tape.constant(std::move(adv_t));
    Var ret_const = tape.constant(std::move(ret_t));

    Var pg_term;
    if (old_logp) {
      Tensor old_t = Tensor::zeros({N});
      for (int i = 0; i < N; ++i) old_t.data[i] = (*old_logp)[b.tn(t, i)];
      Var ratio = tape.exp(tape.sub(logp_exec, tape.constant(std::move(old_t))));
      Var surr1 = tape.mul(ratio, adv_const);
      Var surr2 = tape.mul(tape.clamp(ratio, 1.0 - cfg.ppo_clip, 1.0 + cfg.ppo_clip), adv_const);
      Var surr = tape.minimum(surr1, surr2);
      pg_term = cfg.mixture_logprob ? surr : tape.mul(alpha_sel, surr);
    } else {
      Var weighted = tape.mul(adv_const, logp_exec);
      pg_term = cfg.mixture_logprob ? weighted : tape.mul(alpha_sel, weighted);
    }
    accumulate(pg_sum, tape.sum(pg_term));

    Var diff = tape.sub(value_sel, ret_const);
    accumulate(value_sum, tape.sum(tape.mul(diff, diff)));
    accumulate(ent_sum, tape.sum(ent_sel));
    accumulate(kl_sum, tape.sum(fwd.info_costs));
    accumulate(lreg_sum, tape.sum(tape.sum_rows(tape.mul(fwd.alpha, fwd.info_costs))));

    // Carry hidden state, zeroed where the episode ended.
    if (b.hidden_dim > 0) {
      Tensor mask = Tensor::zeros({N});
      for (int i = 0; i < N; ++i) mask.data[i] = b.dones[b.tn(t, i)] ? 0.0 : 1.0;
      Var mask_var = tape.constant(std::move(mask));
      for (int k = 0; k < K; ++k) hvars[k] = tape.mul_colvec(fwd.prim[k].h_new, mask_var);
    }
  }

  Var pg = tape.scale(pg_sum, -inv_tn);
  Var value = tape.scale(value_sum, cfg.value_coef * inv_tn);
  Var ent = tape.scale(ent_sum, -cfg.entropy_coef * inv_tn);
  Var reg = tape.add(tape.scale(kl_sum, cfg.beta_ind * inv_tn),
                     tape.scale(lreg_sum, cfg.beta_reg * inv_tn));
  out.loss = tape.add(tape.add(pg, value), tape.add(ent, reg));
  out.pg = tape.val(pg).item();
  out.value = tape.val(value).item();
  out.entropy = tape.val(ent_sum).item() * inv_tn;
  out.reg = tape.val(reg).item();
  return out;
}

inline double global_norm(const std::vector<Tensor>& grads) {
  double sq = 0.0;
  for (const auto& g : grads)
    for (double v : g.data) sq += v * v;
  return std::sqrt(sq);
}

// Backward pass + gradient extraction in collect_params order. Parameters
// off the gradient path get zero gradients.
inline std::vector<Tensor> extract_grads(Tape& tape, const PrimitiveEnsemble& ensemble,
                                         const std::vector<Binding>& binds, Var loss) {
  tape.backward(loss);
  std::vector<Tensor> grads;
  for (std::size_t k = 0; k < ensemble.prims.size(); ++k) {
    const auto& prim = ensemble.prims[k];
    for (int i = 0; i < prim.params.count(); ++i) {
      const Tensor* g = tape.grad(binds[k][i]);
      grads.push_back(g ? *g : Tensor::zeros(prim.params.value(i).shape));
    }
  }
  return grads;
}

}  // namespace detail

class NumericalFailure : public std::runtime_error {
 public:
  explicit NumericalFailure(const std::string& what) : std::runtime_error(what) {}
};

class StaleBatch : public std::runtime_error {
 public:
  explicit StaleBatch(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline void check_finite_loss(double loss, const std::vector<Tensor>& grads) {
  if (!std::isfinite(loss))
    throw NumericalFailure("update aborted: non-finite loss value " + std::to_string(loss));
  for (const auto& g : grads)
    if (!g.all_finite()) throw NumericalFailure("update aborted: non-finite gradient");
}

inline void clip_grads(std::vector<Tensor>& grads, double max_norm, double& pre_clip) {
  pre_clip = global_norm(grads);
  if (max_norm > 0.0 && pre_clip > max_norm) {
    const double scale = max_norm / pre_clip;
    for (auto& g : grads)
      for (double& v : g.data) v *= scale;
  }
}

inline void fill_batch_stats(const RolloutBatch& b, UpdateStats& stats) {
  stats.frames = static_cast<long>(b.T) * b.N;
  stats.mean_info_cost.assign(b.K, 0.0);
  stats.mean_alpha.assign(b.K, 0.0);
  const double inv = 1.0 / static_cast<double>(static_cast<std::size_t>(b.T) * b.N);
  for (std::size_t tn = 0; tn < static_cast<std::size_t>(b.T) * b.N; ++tn)
    for (int k = 0; k < b.K; ++k) {
      stats.mean_info_cost[k] += b.info_costs[tn * b.K + k] * inv;
      stats.mean_alpha[k] += b.alpha[tn * b.K + k] * inv;
    }
}

}  // namespace detail

// One A2C step over a freshly collected batch. Strictly on-policy: the
// executed actions' log-probs must agree with a recomputation under the
// current parameters to 1e-9, otherwise the batch is rejected as stale.
inline UpdateStats a2c_update(PrimitiveEnsemble& ensemble, const RolloutBatch& batch,
                              const TrainConfig& cfg, Optimizer& opt) {
  cfg.validate();
  std::vector<double> adv, ret;
  gae(batch.rewards, batch.values, batch.dones, batch.bootstrap, batch.T, batch.N, cfg.gamma,
      cfg.lambda, adv, ret);

  Tape tape;
  detail::LossBuild lb = detail::build_loss(tape, ensemble, batch, cfg, adv, ret, nullptr);
  for (std::size_t i = 0; i < lb.recomputed_logp.size(); ++i) {
    if (std::abs(lb.recomputed_logp[i] - batch.log_probs[i]) > 1e-9)
      throw StaleBatch("a2c_update: stored log-probs disagree with recomputation (delta " +
                       std::to_string(std::abs(lb.recomputed_logp[i] - batch.log_probs[i])) +
                       "); batch is not on-policy");
  }

  std::vector<Tensor> grads = detail::extract_grads(tape, ensemble, lb.binds, lb.loss);
  detail::check_finite_loss(tape.val(lb.loss).item(), grads);

  UpdateStats stats;
  detail::clip_grads(grads, cfg.max_grad_norm, stats.grad_norm);
  auto params = collect_params(ensemble);
  opt.step(params, grads);

  stats.loss = tape.val(lb.loss).item();
  stats.pg_loss = lb.pg;
  stats.value_loss = lb.value;
  stats.entropy = lb.entropy;
  stats.reg_loss = lb.reg;
  stats.adv_normalized = false;
  detail::fill_batch_stats(batch, stats);
  return stats;
}

// PPO: `epochs` passes of the clipped surrogate over the stored segment with
// the stored old log-probs; Adam steps. Advantages are standardized per
// batch (recorded in the stats).
inline UpdateStats ppo_update(PrimitiveEnsemble& ensemble, const RolloutBatch& batch,
                              const TrainConfig& cfg, Optimizer& opt) {
  cfg.validate();
  std::vector<double> adv, ret;
  gae(batch.rewards, batch.values, batch.dones, batch.bootstrap, batch.T, batch.N, cfg.gamma,
      cfg.lambda, adv, ret);

  bool normalized = false;
  if (cfg.normalize_adv_ppo && adv.size() >= 2) {
    double mean = 0.0;
    for (double v : adv) mean += v;
    mean /= static_cast<double>(adv.size());
    double var = 0.0;
    for (double v : adv) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(adv.size()));
    if (sd > 1e-8) {
      for (double& v : adv) v = (v - mean) / (sd + 1e-8);
      normalized = true;
    }
  }

  UpdateStats stats;
  auto params = collect_params(ensemble);
  Tape tape;
  for (int epoch = 0; epoch < cfg.ppo_epochs; ++epoch) {
    tape.reset();
    detail::LossBuild lb =
        detail::build_loss(tape, ensemble, batch, cfg, adv, ret, &batch.log_probs);
    std::vector<Tensor> grads = detail::extract_grads(tape, ensemble, lb.binds, lb.loss);
    detail::check_finite_loss(tape.val(lb.loss).item(), grads);
    detail::clip_grads(grads, cfg.max_grad_norm, stats.grad_norm);
    opt.step(params, grads);
    stats.loss = tape.val(lb.loss).item();
    stats.pg_loss = lb.pg;
    stats.value_loss = lb.value;
    stats.entropy = lb.entropy;
    stats.reg_loss = lb.reg;
  }
  stats.adv_normalized = normalized;
  detail::fill_batch_stats(batch, stats);
  return stats;
}

inline UpdateStats apply_update(PrimitiveEnsemble& ensemble, const RolloutBatch& batch,
                                const TrainConfig& cfg, Optimizer& opt) {
  return cfg.algorithm == Algorithm::A2c ? a2c_update(ensemble, batch, cfg, opt)
                                         : ppo_update(ensemble, batch, cfg, opt);
}

// Flat baseline: a single primitive with a deterministic latent (z = mu,
// sigma pinned to zero) and no information terms, trained through the exact
// same rollout/update path as the ensembles.
inline PrimitiveEnsemble make_flat_baseline(PrimitiveConfig cfg, Rng& rng) {
  cfg.deterministic_latent = true;
  return PrimitiveEnsemble::create(1, cfg, 0.0, 0.0, rng);
}

}  // namespace cip
