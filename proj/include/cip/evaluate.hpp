#pragma once

#include <atomic>
#include <functional>
#include <cmath>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "cip/envs.hpp"
#include "cip/primitives.hpp"
#include "cip/rng.hpp"

namespace cip {

struct EvalResult {
  int episodes = 0;
  long successes = 0;
  double success_rate = 0.0;
  double std_error = 0.0;
};

// Greedy policy step: latent at its mode (z = mu), argmax competition,
// argmax action. Consumes no randomness, so evaluation is a pure function of
// (parameters, env seed).
inline int greedy_action(const PrimitiveEnsemble& e, const std::vector<double>& obs,
                         std::vector<Tensor>& hiddens) {
  Tape tape;
  std::vector<Binding> binds;
  std::vector<Var> hvars, evars;
  const int K = e.K();
  for (int k = 0; k < K; ++k) {
    binds.push_back(bind_params(tape, e.prims[k].params));
    hvars.push_back(tape.constant(hiddens[k]));
    evars.push_back(e.deterministic_latent()
                        ? -1
                        : tape.constant(Tensor::zeros({1, e.latent_dim()})));
  }
  Var obs_var = tape.constant(Tensor::row_major(1, e.obs_dim(), obs));
  EnsembleForward fwd = ensemble_forward(tape, e, binds, obs_var, hvars, evars);
  const Tensor& alpha = tape.val(fwd.alpha);
  int sel = 0;
  for (int k = 1; k < K; ++k)
    if (alpha.data[k] > alpha.data[sel]) sel = k;
  const Tensor& probs = tape.val(fwd.prim[sel].probs);
  int action = 0;
  for (int a = 1; a < e.n_actions(); ++a)
    if (probs.data[a] > probs.data[action]) action = a;
  for (int k = 0; k < K; ++k)
    if (fwd.prim[k].h_new >= 0) hiddens[k] = tape.val(fwd.prim[k].h_new);
  return action;
}

// Runs one greedy episode to termination; returns the success flag.
inline bool greedy_episode(const PrimitiveEnsemble& e, Env& env) {
  StepResult r = env.reset();
  std::vector<Tensor> hiddens = e.zero_hiddens(1);
  while (true) {
    const int action = greedy_action(e, r.obs, hiddens);
    r = env.step(action);
    if (r.done) return r.info.success;
  }
}

// Success rate over `episodes` greedy episodes fanned out over `workers`
// threads. Episode e runs on its own env instance seeded from (seed, e), so
// the result does not depend on the worker partition.
inline EvalResult evaluate(const PrimitiveEnsemble& ensemble,
                           const std::function<std::unique_ptr<Env>(std::uint64_t)>& env_factory,
                           int episodes, int workers, std::uint64_t seed) {
  if (episodes < 1 || workers < 1)
    throw std::invalid_argument("evaluate: episodes and workers must be positive");
  std::atomic<long> successes{0};
  auto work = [&](int w) {
    long local = 0;
    for (int e = w; e < episodes; e += workers) {
      auto env = env_factory(derive_seed(seed, 1'000'003ull + static_cast<std::uint64_t>(e)));
      if (greedy_episode(ensemble, *env)) ++local;
    }
    successes += local;
  };
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (int w = 0; w < workers; ++w) pool.emplace_back(work, w);
  for (auto& t : pool) t.join();

  EvalResult res;
  res.episodes = episodes;
  res.successes = successes.load();
  res.success_rate = static_cast<double>(res.successes) / static_cast<double>(episodes);
  res.std_error =
      std::sqrt(res.success_rate * (1.0 - res.success_rate) / static_cast<double>(episodes));
  return res;
}

inline EvalResult evaluate(const PrimitiveEnsemble& ensemble, const std::string& env_spec,
                           int episodes, int workers, std::uint64_t seed,
                           const FourRoomsLayout* layout = nullptr) {
  return evaluate(
      ensemble, [&](std::uint64_t s) { return make_env(env_spec, s, layout); }, episodes, workers,
      seed);
}

}  // namespace cip
