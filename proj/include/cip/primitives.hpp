#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "cip/distributions.hpp"
#include "cip/nn.hpp"
#include "cip/rng.hpp"
#include "cip/tape.hpp"
#include "cip/tensor.hpp"

namespace cip {

enum class EncoderKind { Gru, Mlp };
enum class SelectionMode { Sample, Argmax, Mixture };

inline SelectionMode selection_mode_from_string(const std::string& s) {
  if (s == "sample") return SelectionMode::Sample;
  if (s == "argmax") return SelectionMode::Argmax;
  if (s == "mixture") return SelectionMode::Mixture;
  throw std::invalid_argument("unknown selection mode: " + s);
}

struct PrimitiveConfig {
  int obs_dim = 0;
  int n_actions = 0;
  EncoderKind encoder = EncoderKind::Gru;
  int gru_hidden = 128;
  std::vector<int> mlp_hidden = {64, 64};
  int latent_dim = 32;
  int head_hidden = 64;
  std::vector<int> decoder_hidden = {64, 64};
  std::vector<int> value_hidden = {64};
  // Flat-baseline mode: z = mu exactly, no latent sampling, L_k = 0.
  bool deterministic_latent = false;

  int feature_dim() const {
    return encoder == EncoderKind::Gru ? gru_hidden : mlp_hidden.back();
  }

  void validate() const {
    if (obs_dim <= 0) throw std::invalid_argument("PrimitiveConfig: obs_dim must be positive");
    if (n_actions <= 0) throw std::invalid_argument("PrimitiveConfig: n_actions must be positive");
    if (latent_dim < 1) throw std::invalid_argument("PrimitiveConfig: latent_dim must be >= 1");
    if (head_hidden <= 0) throw std::invalid_argument("PrimitiveConfig: head_hidden must be positive");
    if (encoder == EncoderKind::Gru && gru_hidden <= 0)
      throw std::invalid_argument("PrimitiveConfig: gru_hidden must be positive");
    if (encoder == EncoderKind::Mlp && mlp_hidden.empty())
      throw std::invalid_argument("PrimitiveConfig: mlp encoder needs hidden sizes");
    for (int h : mlp_hidden)
      if (h <= 0) throw std::invalid_argument("PrimitiveConfig: sizes must be positive");
    for (int h : decoder_hidden)
      if (h <= 0) throw std::invalid_argument("PrimitiveConfig: sizes must be positive");
    for (int h : value_hidden)
      if (h <= 0) throw std::invalid_argument("PrimitiveConfig: sizes must be positive");
  }
};

// One encoder/decoder/value policy unit. The encoder maps the observation
// (plus recurrent state) to a diagonal Gaussian over the latent; the decoder
// maps a latent sample to an action distribution; the value head reads the
// latent concatenated with the encoder features.
struct Primitive {
  PrimitiveConfig cfg;
  ParamStore params;
  GruCell gru;
  Mlp enc_mlp;
  Linear trunk;
  Linear mu_head;
  Linear logsig_head;
  Mlp decoder;
  Mlp value;

  static Primitive create(const PrimitiveConfig& cfg, Rng& rng) {
    cfg.validate();
    Primitive p;
    p.cfg = cfg;
    if (cfg.encoder == EncoderKind::Gru) {
      p.gru = GruCell::create(p.params, "enc.gru", cfg.obs_dim, cfg.gru_hidden, rng);
    } else {
      std::vector<int> hidden(cfg.mlp_hidden.begin(), cfg.mlp_hidden.end() - 1);
      p.enc_mlp = Mlp::create(p.params, "enc.mlp", cfg.obs_dim, hidden, cfg.mlp_hidden.back(),
                              Activation::Tanh, rng);
    }
    const int feat = cfg.feature_dim();
    p.trunk = Linear::create(p.params, "head.trunk", feat, cfg.head_hidden, rng);
    p.mu_head = Linear::create(p.params, "head.mu", cfg.head_hidden, cfg.latent_dim, rng);
    p.logsig_head = Linear::create(p.params, "head.logsig", cfg.head_hidden, cfg.latent_dim, rng);
    p.decoder = Mlp::create(p.params, "dec", cfg.latent_dim, cfg.decoder_hidden, cfg.n_actions,
                            Activation::Relu, rng);
    p.value = Mlp::create(p.params, "val", cfg.latent_dim + feat, cfg.value_hidden, 1,
                          Activation::Tanh, rng);
    return p;
  }

  struct Forward {
    Var mu = -1;         // {N, latent}
    Var log_sigma = -1;  // {N, latent}, clamped
    Var z = -1;          // {N, latent}
    Var kl = -1;         // {N}
    Var feat = -1;       // {N, feature_dim}
    Var h_new = -1;      // {N, gru_hidden}; -1 for MLP encoders
    Var logits = -1;     // {N, n_actions}
    Var log_probs = -1;  // {N, n_actions}
    Var probs = -1;      // {N, n_actions}
    Var value = -1;      // {N}
  };

  // obs: {N, obs_dim} const var; h_prev: {N, gru_hidden} var (ignored for
  // MLP); eps: {N, latent} const var (ignored when deterministic_latent).
  Forward forward(Tape& tape, const Binding& bind, Var obs, Var h_prev, Var eps) const {
    Forward f;
    if (cfg.encoder == EncoderKind::Gru) {
      f.h_new = gru.step(tape, bind, obs, h_prev);
      f.feat = f.h_new;
    } else {
      Var h = enc_mlp(tape, bind, obs);
      f.feat = tape.tanh(h);
    }
    Var t = tape.tanh(trunk(tape, bind, f.feat));
    f.mu = mu_head(tape, bind, t);
    f.log_sigma = tape.clamp(logsig_head(tape, bind, t), kLogSigmaMin, kLogSigmaMax);
    if (cfg.deterministic_latent) {
      f.z = f.mu;
      f.kl = tape.constant(Tensor::zeros({tape.val(f.mu).rows()}));
    } else {
      f.z = reparam_sample(tape, f.mu, f.log_sigma, eps);
      f.kl = tape.gaussian_kl_rows(f.mu, f.log_sigma);
    }
    f.logits = decoder(tape, bind, f.z);
    f.log_probs = tape.log_softmax_rows(f.logits);
    f.probs = tape.softmax_rows(f.logits);
    Var vin = tape.concat_cols(f.z, f.feat);
    f.value = tape.reshape(value(tape, bind, vin), {tape.val(f.mu).rows()});
    return f;
  }
};

// The policy of the whole model: K primitives plus the competition config.
struct PrimitiveEnsemble {
  std::vector<Primitive> prims;
  SelectionMode selection_mode = SelectionMode::Sample;
  double beta_ind = 0.0;
  double beta_reg = 0.0;

  int K() const { return static_cast<int>(prims.size()); }
  int obs_dim() const { return prims.at(0).cfg.obs_dim; }
  int n_actions() const { return prims.at(0).cfg.n_actions; }
  int latent_dim() const { return prims.at(0).cfg.latent_dim; }
  bool recurrent() const { return prims.at(0).cfg.encoder == EncoderKind::Gru; }
  int hidden_dim() const { return recurrent() ? prims.at(0).cfg.gru_hidden : 0; }
  bool deterministic_latent() const { return prims.at(0).cfg.deterministic_latent; }

  static PrimitiveEnsemble create(int k, const PrimitiveConfig& cfg, double beta_ind,
                                  double beta_reg, Rng& rng) {
    if (k < 1) throw std::invalid_argument("PrimitiveEnsemble: K must be >= 1");
    if (beta_ind < 0.0 || beta_reg < 0.0)
      throw std::invalid_argument("PrimitiveEnsemble: betas must be >= 0");
    PrimitiveEnsemble e;
    e.beta_ind = beta_ind;
    e.beta_reg = beta_reg;
    for (int i = 0; i < k; ++i) e.prims.push_back(Primitive::create(cfg, rng));
    return e;
  }

  // Fresh zero hidden states, one {N, H} block per primitive.
  std::vector<Tensor> zero_hiddens(int n) const {
    std::vector<Tensor> h;
    for (int k = 0; k < K(); ++k)
      h.push_back(Tensor::zeros({n, recurrent() ? hidden_dim() : 1}));
    return h;
  }
};

// Per-step record of the full competition, for a single observation.
struct CompetitionStep {
  std::vector<std::vector<double>> mu;           // K x latent
  std::vector<std::vector<double>> log_sigma;    // K x latent
  std::vector<std::vector<double>> z;            // K x latent
  std::vector<double> info_cost;                 // L_k, nats
  std::vector<std::vector<double>> action_dist;  // K x n_actions
  std::vector<double> value;                     // V_k
  std::vector<double> alpha;                     // simplex over K
  int selected = -1;
  int action = -1;
  double log_prob = 0.0;
};

// alpha_k = exp(L_k) / sum_j exp(L_j), max-shifted.
inline std::vector<double> compete(const std::vector<double>& info_costs) {
  return softmax(info_costs);
}

// Sample / argmax over the competition weights. Argmax ties break to the
// lowest index. Mixture mode keeps alpha as blending weights, so the index
// reported is the argmax (used for diagnostics only).
inline int select(const std::vector<double>& alpha, SelectionMode mode, Rng& rng) {
  if (alpha.empty()) throw std::invalid_argument("select: empty alpha");
  switch (mode) {
    case SelectionMode::Sample:
      return rng.categorical(alpha);
    case SelectionMode::Argmax:
    case SelectionMode::Mixture: {
      int best = 0;
      for (std::size_t i = 1; i < alpha.size(); ++i)
        if (alpha[i] > alpha[best]) best = static_cast<int>(i);
      return best;
    }
  }
  throw std::invalid_argument("select: invalid mode");
}

// r_k = alpha_k * r.
inline std::vector<double> split_reward(double r, const std::vector<double>& alpha) {
  std::vector<double> out(alpha.size());
  for (std::size_t i = 0; i < alpha.size(); ++i) out[i] = alpha[i] * r;
  return out;
}

// L_reg = sum_k alpha_k L_k  (== -H(alpha) + LSE(L), see the identity tests).
inline double l_reg(const std::vector<double>& alpha, const std::vector<double>& info_costs) {
  if (alpha.size() != info_costs.size())
    throw std::invalid_argument("l_reg: alpha/L length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < alpha.size(); ++i) s += alpha[i] * info_costs[i];
  return s;
}

// beta_ind * sum_k L_k + beta_reg * L_reg for one step.
inline double regularizer_loss(const PrimitiveEnsemble& e, const CompetitionStep& step) {
  double sum_l = 0.0;
  for (double l : step.info_cost) sum_l += l;
  return e.beta_ind * sum_l + e.beta_reg * l_reg(step.alpha, step.info_cost);
}

// --- batched ensemble forward (tape) --------------------------------------

struct EnsembleForward {
  std::vector<Primitive::Forward> prim;  // size K
  Var info_costs = -1;  // {N, K}
  Var alpha = -1;       // {N, K}
};

// obs: {N, obs_dim} const; h_prev: one {N, H} var per primitive; eps: one
// {N, latent} const per primitive (unused entries may be -1 when the
// ensemble is deterministic).
inline EnsembleForward ensemble_forward(Tape& tape, const PrimitiveEnsemble& e,
                                        const std::vector<Binding>& binds, Var obs,
                                        const std::vector<Var>& h_prev,
                                        const std::vector<Var>& eps) {
  EnsembleForward out;
  std::vector<Var> kls;
  for (int k = 0; k < e.K(); ++k) {
    out.prim.push_back(e.prims[k].forward(tape, binds[k], obs, h_prev[k], eps[k]));
    kls.push_back(out.prim.back().kl);
  }
  out.info_costs = tape.stack_cols(kls);
  out.alpha = tape.softmax_rows(out.info_costs);
  return out;
}

// --- single-observation act (diagnostic / scalar API) ----------------------

struct ActResult {
  int action = -1;
  CompetitionStep step;
  std::vector<Tensor> new_hiddens;  // one {1, H} per primitive
};

// Runs every primitive on one observation, runs the competition, samples the
// executed action from the selected primitive (or the alpha-mixture in
// mixture mode). Hiddens are {1, H} rows; pass ensemble.zero_hiddens(1) at
// episode start.
inline ActResult act(const PrimitiveEnsemble& e, const std::vector<double>& obs,
                     const std::vector<Tensor>& hiddens, Rng& rng) {
  if (static_cast<int>(obs.size()) != e.obs_dim())
    throw std::invalid_argument("act: obs dimension mismatch");
  Tape tape;
  std::vector<Binding> binds;
  std::vector<Var> hvars, evars;
  for (int k = 0; k < e.K(); ++k) {
    binds.push_back(bind_params(tape, e.prims[k].params));
    hvars.push_back(tape.constant(hiddens[k]));
    if (e.deterministic_latent()) {
      evars.push_back(-1);
    } else {
      Tensor eps = Tensor::zeros({1, e.latent_dim()});
      for (double& v : eps.data) v = rng.normal();
      evars.push_back(tape.constant(std::move(eps)));
    }
  }
  Var obs_var = tape.constant(Tensor::row_major(1, e.obs_dim(), obs));
  EnsembleForward fwd = ensemble_forward(tape, e, binds, obs_var, hvars, evars);

  ActResult res;
  CompetitionStep& st = res.step;
  const int K = e.K();
  for (int k = 0; k < K; ++k) {
    const auto& f = fwd.prim[k];
    st.mu.push_back(tape.val(f.mu).data);
    st.log_sigma.push_back(tape.val(f.log_sigma).data);
    st.z.push_back(tape.val(f.z).data);
    st.info_cost.push_back(tape.val(f.kl).data[0]);
    st.action_dist.push_back(tape.val(f.probs).data);
    st.value.push_back(tape.val(f.value).data[0]);
    res.new_hiddens.push_back(f.h_new >= 0 ? tape.val(f.h_new) : hiddens[k]);
  }
  st.alpha = tape.val(fwd.alpha).data;
  st.selected = select(st.alpha, e.selection_mode, rng);

  if (e.selection_mode == SelectionMode::Mixture) {
    std::vector<double> mix(e.n_actions(), 0.0);
    for (int k = 0; k < K; ++k)
      for (int a = 0; a < e.n_actions(); ++a) mix[a] += st.alpha[k] * st.action_dist[k][a];
    st.action = rng.categorical(mix);
    st.log_prob = std::log(mix[st.action]);
  } else {
    st.action = rng.categorical(st.action_dist[st.selected]);
    st.log_prob = tape.val(fwd.prim[st.selected].log_probs).data[st.action];
  }
  res.action = st.action;
  return res;
}

// Concatenates deep copies of the given ensembles into one larger ensemble.
// Competition automatically spans the union. Selection mode and betas are
// inherited from the first input.
inline PrimitiveEnsemble combine(const std::vector<const PrimitiveEnsemble*>& parts) {
  if (parts.empty()) throw std::invalid_argument("combine: no ensembles");
  const PrimitiveEnsemble& first = *parts[0];
  for (const auto* p : parts) {
    if (p->obs_dim() != first.obs_dim() || p->n_actions() != first.n_actions() ||
        p->latent_dim() != first.latent_dim() || p->recurrent() != first.recurrent() ||
        p->hidden_dim() != first.hidden_dim())
      throw std::invalid_argument("combine: incompatible ensemble shapes");
  }
  PrimitiveEnsemble out;
  out.selection_mode = first.selection_mode;
  out.beta_ind = first.beta_ind;
  out.beta_reg = first.beta_reg;
  for (const auto* p : parts)
    for (const auto& prim : p->prims) out.prims.push_back(prim);
  return out;
}

}  // namespace cip
