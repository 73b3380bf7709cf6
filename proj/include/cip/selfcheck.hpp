#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include "cip/distributions.hpp"
#include "cip/envs.hpp"
#include "cip/grad_check.hpp"
#include "cip/primitives.hpp"
#include "cip/trainer.hpp"

namespace cip {

struct SuiteResult {
  std::string name;
  bool pass = true;
  std::vector<std::string> lines;
  double seconds = 0.0;

  void check(const std::string& what, bool ok, const std::string& detail = "") {
    pass = pass && ok;
    lines.push_back(std::string(ok ? "  ok   " : "  FAIL ") + what +
                    (detail.empty() ? "" : " (" + detail + ")"));
  }
};

namespace selfcheck {

inline double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// --- math identities -----------------------------------------------------------

inline SuiteResult math_suite() {
  const double t0 = now_seconds();
  SuiteResult res;
  res.name = "math-identity suite";
  Rng rng(20240521);

  // L_reg identity: sum_k alpha_k L_k == -H(alpha) + LSE(L).
  {
    double worst = 0.0;
    bool argmax_ok = true, bounds_ok = true, simplex_ok = true;
    for (int trial = 0; trial < 10'000; ++trial) {
      const int k = 2 + rng.uniform_int(7);
      std::vector<double> costs(k);
      for (double& v : costs) v = rng.uniform(0.0, 6.0);
      const std::vector<double> alpha = compete(costs);
      double s = 0.0;
      for (double a : alpha) s += a;
      simplex_ok = simplex_ok && std::abs(s - 1.0) < 1e-12;
      const double lhs = l_reg(alpha, costs);
      const double rhs = -entropy(alpha) + logsumexp(costs);
      worst = std::max(worst, std::abs(lhs - rhs));
      int amax_alpha = 0, amax_cost = 0;
      for (int i = 1; i < k; ++i) {
        if (alpha[i] > alpha[amax_alpha]) amax_alpha = i;
        if (costs[i] > costs[amax_cost]) amax_cost = i;
      }
      argmax_ok = argmax_ok && amax_alpha == amax_cost;
      double lo = costs[0], hi = costs[0];
      for (double v : costs) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      bounds_ok = bounds_ok && lhs >= lo - 1e-12 && lhs <= hi + 1e-12;
    }
    res.check("L_reg identity over 1e4 random cases, K=2..8, max |diff| < 1e-9", worst < 1e-9,
              "max diff " + std::to_string(worst));
    res.check("alpha stays on the simplex (sum 1 +- 1e-12)", simplex_ok);
    res.check("argmax(alpha) == argmax(L)", argmax_ok);
    res.check("min L <= L_reg <= max L", bounds_ok);
  }

  // Softmax shift invariance and normalization.
  {
    double worst_shift = 0.0, worst_sum = 0.0;
    for (int trial = 0; trial < 2'000; ++trial) {
      const int k = 2 + rng.uniform_int(7);
      std::vector<double> x(k), y(k);
      const double c = rng.uniform(-50.0, 50.0);
      for (int i = 0; i < k; ++i) {
        x[i] = rng.uniform(-10.0, 10.0);
        y[i] = x[i] + c;
      }
      const auto px = softmax(x);
      const auto py = softmax(y);
      double s = 0.0;
      for (int i = 0; i < k; ++i) {
        worst_shift = std::max(worst_shift, std::abs(px[i] - py[i]));
        s += px[i];
      }
      worst_sum = std::max(worst_sum, std::abs(s - 1.0));
    }
    res.check("softmax shift invariance < 1e-12", worst_shift < 1e-12,
              "max diff " + std::to_string(worst_shift));
    res.check("softmax sums to 1 +- 1e-12", worst_sum < 1e-12);
  }

  // Closed-form unit-prior Gaussian KL vs a 1e7-sample Monte Carlo estimate.
  {
    GaussianLatent g({0.4, -0.7}, {-1.0, 0.3});
    const double closed = gaussian_kl_std(g);
    Rng mc(731);
    const long n = 10'000'000;
    double acc = 0.0;
    for (long i = 0; i < n; ++i) {
      double log_q = 0.0, log_p = 0.0;
      for (std::size_t d = 0; d < g.dim(); ++d) {
        const double sigma = std::exp(g.log_sigma[d]);
        const double x = g.mu[d] + sigma * mc.normal();
        const double zq = (x - g.mu[d]) / sigma;
        log_q += -0.5 * zq * zq - g.log_sigma[d];
        log_p += -0.5 * x * x;
      }
      acc += log_q - log_p;
    }
    const double estimate = acc / static_cast<double>(n);
    res.check("closed-form Gaussian KL matches 1e7-sample MC within 1e-3",
              std::abs(closed - estimate) < 1e-3,
              "closed " + std::to_string(closed) + " vs mc " + std::to_string(estimate));
  }

  // Convexity bound: KL(sum_k alpha_k f_k || N(0,I)) <= sum_k alpha_k KL_k,
  // checked by Monte Carlo within 3 standard errors on random mixtures.
  {
    bool ok = true;
    std::string detail;
    for (int mix_trial = 0; mix_trial < 100; ++mix_trial) {
      const int k = 2 + rng.uniform_int(3);
      const int d = 2;
      std::vector<std::vector<double>> mu(k, std::vector<double>(d));
      std::vector<std::vector<double>> ls(k, std::vector<double>(d));
      std::vector<double> raw(k);
      for (int j = 0; j < k; ++j) {
        for (int t = 0; t < d; ++t) {
          mu[j][t] = rng.uniform(-1.5, 1.5);
          ls[j][t] = rng.uniform(-1.0, 0.5);
        }
        raw[j] = rng.uniform(-1.0, 1.0);
      }
      const std::vector<double> alpha = softmax(raw);
      double bound = 0.0;
      for (int j = 0; j < k; ++j) bound += alpha[j] * gaussian_kl_std(GaussianLatent(mu[j], ls[j]));

      const long n = 1'000'000;
      double acc = 0.0, acc2 = 0.0;
      for (long i = 0; i < n; ++i) {
        const int comp = rng.categorical(alpha);
        double x[2];
        for (int t = 0; t < d; ++t) x[t] = mu[comp][t] + std::exp(ls[comp][t]) * rng.normal();
        std::vector<double> comp_logs(k);
        for (int j = 0; j < k; ++j) {
          double lq = std::log(alpha[j]);
          for (int t = 0; t < d; ++t) {
            const double z = (x[t] - mu[j][t]) / std::exp(ls[j][t]);
            lq += -0.5 * z * z - ls[j][t];
          }
          comp_logs[j] = lq;
        }
        double log_q = logsumexp(comp_logs);
        double log_p = 0.0;
        for (int t = 0; t < d; ++t) log_p += -0.5 * x[t] * x[t];
        const double v = log_q - log_p;
        acc += v;
        acc2 += v * v;
      }
      const double mc = acc / static_cast<double>(n);
      const double var = acc2 / static_cast<double>(n) - mc * mc;
      const double se = std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
      if (mc > bound + 3.0 * se) {
        ok = false;
        detail = "mixture " + std::to_string(mix_trial) + ": mc " + std::to_string(mc) +
                 " > bound " + std::to_string(bound) + " + 3se";
        break;
      }
    }
    res.check("mixture-KL convexity bound holds within 3 SE on 100 random mixtures", ok, detail);
  }

  res.seconds = now_seconds() - t0;
  return res;
}

// --- gradient checks -------------------------------------------------------------

namespace gradient_detail {

// Builds random tensors on a tape, runs a scalar-valued graph twice (once
// for analytic grads, re-evaluated inside the FD probe), and reports the max
// relative error over all inputs.
template <typename BuildFn>
double layer_fd_error(std::vector<Tensor>& inputs, BuildFn&& build, double eps = 1e-5) {
  std::vector<Tensor*> ptrs;
  for (auto& t : inputs) ptrs.push_back(&t);
  auto eval = [&]() {
    Tape tape;
    std::vector<Var> vars;
    for (auto* p : ptrs) vars.push_back(tape.leaf(p));
    Var loss = build(tape, vars);
    return tape.val(loss).item();
  };
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (auto* p : ptrs) vars.push_back(tape.leaf(p));
    Var loss = build(tape, vars);
    tape.backward(loss);
    for (std::size_t i = 0; i < ptrs.size(); ++i) {
      const Tensor* g = tape.grad(vars[i]);
      analytic.push_back(g ? *g : Tensor::zeros(ptrs[i]->shape));
    }
  }
  return grad_check_max_rel_error(eval, ptrs, analytic, eps);
}

inline Tensor randn(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

}  // namespace gradient_detail

inline SuiteResult gradient_suite(int trials = 100) {
  using gradient_detail::layer_fd_error;
  using gradient_detail::randn;
  const double t0 = now_seconds();
  SuiteResult res;
  res.name = "gradient suite";
  Rng rng(987651);
  const double tol = 1e-4;

  auto run_layer = [&](const std::string& name, auto&& make_case) {
    double worst = 0.0;
    for (int t = 0; t < trials; ++t) worst = std::max(worst, make_case());
    res.check(name + " vs central differences < 1e-4 (" + std::to_string(trials) + " trials)",
              worst < tol, "max rel err " + std::to_string(worst));
  };

  run_layer("affine + tanh", [&]() {
    const int n = 1 + rng.uniform_int(4), in = 1 + rng.uniform_int(4), out = 1 + rng.uniform_int(4);
    std::vector<Tensor> inputs = {randn({n, in}, rng), randn({in, out}, rng, 0.5),
                                  randn({out}, rng, 0.5)};
    return layer_fd_error(inputs, [](Tape& tape, const std::vector<Var>& v) {
      return tape.sum(tape.tanh(affine(tape, v[0], v[1], v[2])));
    });
  });

  run_layer("relu mlp + log-softmax gather", [&]() {
    const int n = 1 + rng.uniform_int(3), in = 1 + rng.uniform_int(4), h = 2 + rng.uniform_int(3),
              out = 2 + rng.uniform_int(3);
    std::vector<Tensor> inputs = {randn({n, in}, rng), randn({in, h}, rng, 0.7),
                                  randn({h}, rng, 0.3), randn({h, out}, rng, 0.7),
                                  randn({out}, rng, 0.3)};
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = rng.uniform_int(out);
    return layer_fd_error(inputs, [idx](Tape& tape, const std::vector<Var>& v) {
      Var h1 = tape.relu(affine(tape, v[0], v[1], v[2]));
      Var logits = affine(tape, h1, v[3], v[4]);
      return tape.sum(tape.gather_cols(tape.log_softmax_rows(logits), idx));
    });
  });

  run_layer("softmax / logsumexp / entropy composite", [&]() {
    const int n = 1 + rng.uniform_int(3), c = 2 + rng.uniform_int(5);
    std::vector<Tensor> inputs = {randn({n, c}, rng, 2.0)};
    return layer_fd_error(inputs, [](Tape& tape, const std::vector<Var>& v) {
      Var p = tape.softmax_rows(v[0]);
      Var lp = tape.log_softmax_rows(v[0]);
      Var ent = tape.neg(tape.sum_rows(tape.mul(p, lp)));
      return tape.add(tape.sum(ent), tape.sum(tape.logsumexp_rows(v[0])));
    });
  });

  run_layer("gru cell", [&]() {
    const int n = 1 + rng.uniform_int(3), in = 1 + rng.uniform_int(3), h = 1 + rng.uniform_int(4);
    std::vector<Tensor> inputs;
    inputs.push_back(randn({n, in}, rng));       // x
    inputs.push_back(randn({n, h}, rng, 0.5));   // h_prev
    for (int w = 0; w < 3; ++w) inputs.push_back(randn({in, h}, rng, 0.5));
    for (int w = 0; w < 3; ++w) inputs.push_back(randn({h, h}, rng, 0.5));
    for (int w = 0; w < 6; ++w) inputs.push_back(randn({h}, rng, 0.3));
    Tensor proj = randn({n, h}, rng);
    return layer_fd_error(inputs, [proj](Tape& tape, const std::vector<Var>& v) {
      Var r = tape.sigmoid(tape.add(affine(tape, v[0], v[2], v[8]), affine(tape, v[1], v[5], v[11])));
      Var u = tape.sigmoid(tape.add(affine(tape, v[0], v[3], v[9]), affine(tape, v[1], v[6], v[12])));
      Var c = tape.tanh(tape.add(affine(tape, v[0], v[4], v[10]),
                                 tape.mul(r, affine(tape, v[1], v[7], v[13]))));
      Var h_new = tape.add(c, tape.mul(u, tape.sub(v[1], c)));
      return tape.sum(tape.mul(h_new, tape.constant(proj)));
    });
  });

  run_layer("gaussian KL + reparam decoder", [&]() {
    const int n = 1 + rng.uniform_int(3), d = 1 + rng.uniform_int(4);
    std::vector<Tensor> inputs = {randn({n, d}, rng), randn({n, d}, rng, 0.5)};
    Tensor eps = randn({n, d}, rng);
    return layer_fd_error(inputs, [eps](Tape& tape, const std::vector<Var>& v) {
      Var ls = tape.clamp(v[1], kLogSigmaMin, kLogSigmaMax);
      Var z = reparam_sample(tape, v[0], ls, tape.constant(eps));
      return tape.add(tape.sum(tape.gaussian_kl_rows(v[0], ls)), tape.sum(tape.tanh(z)));
    });
  });

  run_layer("l_reg through the competition softmax", [&]() {
    const int n = 1 + rng.uniform_int(3), k = 2 + rng.uniform_int(5);
    std::vector<Tensor> inputs = {randn({n, k}, rng, 1.5)};
    return layer_fd_error(inputs, [](Tape& tape, const std::vector<Var>& v) {
      Var alpha = tape.softmax_rows(v[0]);
      return tape.sum(tape.sum_rows(tape.mul(alpha, v[0])));
    });
  });

  // Full composite A2C loss on a two-primitive toy (obs_dim 3, latent 2),
  // including gradient flow through alpha into the encoders.
  {
    double worst = 0.0;
    for (int trial = 0; trial < trials; ++trial) {
      PrimitiveConfig pc;
      pc.obs_dim = 3;
      pc.n_actions = 3;
      pc.encoder = EncoderKind::Mlp;
      pc.mlp_hidden = {4};
      pc.latent_dim = 2;
      pc.head_hidden = 4;
      pc.decoder_hidden = {5};
      pc.value_hidden = {4};
      Rng init(1000 + trial);
      PrimitiveEnsemble ens = PrimitiveEnsemble::create(2, pc, 0.005, 0.005, init);

      TrainConfig tc;
      tc.beta_ind = 0.005;
      tc.beta_reg = 0.005;
      tc.entropy_coef = 0.01;
      tc.value_coef = 0.5;

      const int T = 3, N = 2;
      RolloutBatch b;
      b.T = T;
      b.N = N;
      b.K = 2;
      b.obs_dim = 3;
      b.latent_dim = 2;
      b.hidden_dim = 0;
      b.deterministic_latent = false;
      Rng data(5000 + trial);
      b.obs.resize(T * N * 3);
      for (double& v : b.obs) v = data.normal();
      b.eps.resize(static_cast<std::size_t>(T) * 2 * N * 2);
      for (double& v : b.eps) v = data.normal();
      b.actions.resize(T * N);
      b.selected.resize(T * N);
      b.dones.resize(T * N);
      for (int i = 0; i < T * N; ++i) {
        b.actions[i] = data.uniform_int(3);
        b.selected[i] = data.uniform_int(2);
        b.dones[i] = data.uniform() < 0.2 ? 1 : 0;
      }
      std::vector<double> adv(T * N), ret(T * N);
      for (int i = 0; i < T * N; ++i) {
        adv[i] = data.normal();
        ret[i] = data.normal();
      }

      auto eval = [&]() {
        Tape tape;
        return tape.val(detail::build_loss(tape, ens, b, tc, adv, ret, nullptr).loss).item();
      };
      std::vector<Tensor> analytic;
      {
        Tape tape;
        auto lb = detail::build_loss(tape, ens, b, tc, adv, ret, nullptr);
        analytic = detail::extract_grads(tape, ens, lb.binds, lb.loss);
      }
      worst = std::max(worst,
                       grad_check_max_rel_error(eval, collect_params(ens), analytic, 1e-5));
    }
    res.check("composite A2C loss on 2-primitive toy vs central differences < 1e-4 (" +
                  std::to_string(trials) + " trials)",
              worst < tol, "max rel err " + std::to_string(worst));
  }

  res.seconds = now_seconds() - t0;
  return res;
}

// --- oracle equivalences ------------------------------------------------------------

inline SuiteResult oracle_suite() {
  const double t0 = now_seconds();
  SuiteResult res;
  res.name = "oracle-equivalence suite";
  Rng rng(424242);

  // GAE vs brute-force double sum.
  {
    double worst = 0.0;
    for (int trial = 0; trial < 1'000; ++trial) {
      const int T = 1 + rng.uniform_int(8), N = 1 + rng.uniform_int(4);
      const double gamma = rng.uniform(0.9, 0.999), lambda = rng.uniform(0.0, 1.0);
      std::vector<double> rew(T * N), val(T * N), boot(N);
      std::vector<std::uint8_t> don(T * N);
      for (int i = 0; i < T * N; ++i) {
        rew[i] = rng.normal();
        val[i] = rng.normal();
        don[i] = rng.uniform() < 0.25 ? 1 : 0;
      }
      for (int i = 0; i < N; ++i) boot[i] = rng.normal();
      std::vector<double> adv, ret;
      gae(rew, val, don, boot, T, N, gamma, lambda, adv, ret);
      for (int i = 0; i < N; ++i) {
        for (int t = 0; t < T; ++t) {
          double acc = 0.0, w = 1.0;
          for (int l = t; l < T && w != 0.0; ++l) {
            const std::size_t idx = static_cast<std::size_t>(l) * N + i;
            const double nonterm = don[idx] ? 0.0 : 1.0;
            const double next_v = l == T - 1 ? boot[i] : val[idx + N];
            const double delta = rew[idx] + gamma * next_v * nonterm - val[idx];
            acc += w * delta;
            w *= gamma * lambda * nonterm;
          }
          worst = std::max(worst, std::abs(acc - adv[static_cast<std::size_t>(t) * N + i]));
        }
      }
    }
    res.check("GAE equals brute-force double sum on 1000 random segments < 1e-12", worst < 1e-12,
              "max diff " + std::to_string(worst));
  }

  // vec_env(n=1) equals the scalar env under the same seed and actions.
  {
    bool ok = true;
    for (const std::string spec : {"bandits", "fourrooms-v1"}) {
      auto scalar = make_env(spec, 77);
      VecEnv vec(spec, 1, 77);
      StepResult rs = scalar->reset();
      std::vector<StepResult> rv = vec.reset_all();
      ok = ok && rs.obs == rv[0].obs;
      Rng act_rng(5);
      for (int step = 0; step < 400 && ok; ++step) {
        const int a = act_rng.uniform_int(scalar->n_actions());
        rs = scalar->step(a);
        rv = vec.step_all({a});
        ok = ok && rs.reward == rv[0].reward && rs.done == rv[0].done;
        if (rs.done) {
          rs = scalar->reset();
          ok = ok && rs.obs == rv[0].obs;  // vec auto-reset matches manual reset
        } else {
          ok = ok && rs.obs == rv[0].obs;
        }
      }
    }
    res.check("vec_env(n=1) trace equals the scalar env trace", ok);
  }

  // A K=1, beta=0, deterministic-latent ensemble is bit-identical to the
  // flat baseline under shared seeds.
  {
    PrimitiveConfig pc;
    pc.obs_dim = 6;
    pc.n_actions = 5;
    pc.encoder = EncoderKind::Mlp;
    pc.mlp_hidden = {8};
    pc.latent_dim = 3;
    pc.head_hidden = 4;
    pc.decoder_hidden = {8};
    pc.value_hidden = {8};

    TrainConfig tc;
    tc.algorithm = Algorithm::A2c;
    tc.beta_ind = 0.0;
    tc.beta_reg = 0.0;

    auto train = [&](bool via_factory) {
      Rng init(99);
      PrimitiveConfig local = pc;
      PrimitiveEnsemble ens;
      if (via_factory) {
        ens = make_flat_baseline(local, init);
      } else {
        local.deterministic_latent = true;
        ens = PrimitiveEnsemble::create(1, local, 0.0, 0.0, init);
      }
      RolloutWorker worker(std::make_unique<VecEnv>("bandits", 4, 1234), 555);
      Optimizer opt(tc.optimizer, tc);
      for (int u = 0; u < 30; ++u) {
        RolloutBatch batch = worker.collect(ens, 5);
        a2c_update(ens, batch, tc, opt);
      }
      return ens;
    };
    PrimitiveEnsemble a = train(true);
    PrimitiveEnsemble b = train(false);
    bool identical = true;
    for (int i = 0; i < a.prims[0].params.count(); ++i)
      identical = identical && a.prims[0].params.value(i).data == b.prims[0].params.value(i).data;
    res.check("flat baseline bit-identical to K=1, beta=0 ensemble after 30 updates", identical);
  }

  res.seconds = now_seconds() - t0;
  return res;
}

// --- environment statistics -----------------------------------------------------------

inline SuiteResult env_suite() {
  const double t0 = now_seconds();
  SuiteResult res;
  res.name = "environment-statistics suite";

  {
    const auto& lay = FourRoomsLayout::default_layout();
    res.check("four-rooms open cell count == 104",
              static_cast<int>(lay.open_cells.size()) == 104);
    bool bijection = true;
    for (std::size_t id = 0; id < lay.open_cells.size(); ++id)
      bijection = bijection && lay.cell_id[lay.open_cells[id]] == static_cast<int>(id);
    res.check("cell-id <-> grid mapping is a bijection over open cells", bijection);
    res.check("goal sets have sizes 2 / 4 / 8",
              lay.goal_sets.size() == 3 && lay.goal_sets[0].size() == 2 &&
                  lay.goal_sets[1].size() == 4 && lay.goal_sets[2].size() == 8);
  }

  // Executed-action distribution under the 1/3 slip rule.
  {
    FourRoomsEnv env(2, 9001);
    env.reset();
    const long n = 300'000;
    std::array<long, 4> counts{0, 0, 0, 0};
    for (long i = 0; i < n; ++i) {
      StepResult r = env.step(0);
      ++counts[env.last_executed_action()];
      if (r.done) env.reset();
    }
    const double expected[4] = {2.0 / 3.0, 1.0 / 9.0, 1.0 / 9.0, 1.0 / 9.0};
    double worst = 0.0, chi2 = 0.0;
    for (int a = 0; a < 4; ++a) {
      const double freq = static_cast<double>(counts[a]) / static_cast<double>(n);
      worst = std::max(worst, std::abs(freq - expected[a]));
      const double exp_count = expected[a] * static_cast<double>(n);
      chi2 += (counts[a] - exp_count) * (counts[a] - exp_count) / exp_count;
    }
    res.check("executed-action frequencies within 0.005 of (2/3, 1/9, 1/9, 1/9) over 3e5 steps",
              worst < 0.005, "max dev " + std::to_string(worst));
    res.check("chi-square GOF passes at p > 0.001 (chi2 < 16.266, 3 dof)", chi2 < 16.266,
              "chi2 " + std::to_string(chi2));
  }

  // Bandits episodes never exceed 50 steps and rewards stay in {0, 1}.
  {
    BanditsEnv env(31337);
    Rng act(3);
    bool ok = true;
    for (int ep = 0; ep < 2'000 && ok; ++ep) {
      env.reset();
      int steps = 0;
      double total = 0.0;
      while (true) {
        StepResult r = env.step(act.uniform_int(5));
        ++steps;
        ok = ok && (r.reward == 0.0 || r.reward == 1.0);
        total += r.reward;
        if (r.done) break;
      }
      ok = ok && steps <= 50 && total <= 1.0;
    }
    res.check("bandits: episode length <= 50, rewards in {0,1}, episode reward in {0,1}", ok);
  }

  res.seconds = now_seconds() - t0;
  return res;
}

}  // namespace selfcheck

}  // namespace cip
