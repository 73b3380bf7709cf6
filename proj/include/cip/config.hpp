#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cip/primitives.hpp"
#include "cip/trainer.hpp"

namespace cip {

// Declarative description of a training / transfer / continual run. Parsed
// from flat sectioned key-value text; every key is schema-checked so that a
// typo fails loudly instead of silently training with defaults.
struct ExperimentConfig {
  // [experiment]
  std::string env = "bandits";
  std::string map_file;  // optional four-rooms layout override
  int k = 2;
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
  long max_frames = 3'000'000;
  long eval_every = 150'000;
  int eval_episodes = 500;
  int eval_workers = 10;
  double success_threshold = -1.0;  // stop when eval reaches this; <0 disables
  long phase_max_frames = 10'000'000;
  std::string out_dir = "runs/out";
  int jobs = 0;  // parallel seed-legs; 0 = auto

  // [model]
  std::string encoder = "gru";
  int gru_hidden = 128;
  std::vector<int> mlp_hidden = {64, 64};
  int latent_dim = 32;
  int head_hidden = 64;
  std::vector<int> decoder_hidden = {64, 64};
  std::vector<int> value_hidden = {64};
  std::string selection_mode = "sample";

  // [train]
  TrainConfig train;
  int n_envs = 64;

  void validate() const {
    if (seeds.empty()) throw std::invalid_argument("config: seeds must be non-empty");
    for (std::size_t i = 0; i < seeds.size(); ++i)
      for (std::size_t j = i + 1; j < seeds.size(); ++j)
        if (seeds[i] == seeds[j]) throw std::invalid_argument("config: seeds must be distinct");
    if (k < 1) throw std::invalid_argument("config: k must be >= 1");
    if (n_envs < 1) throw std::invalid_argument("config: n_envs must be >= 1");
    if (max_frames < 0) throw std::invalid_argument("config: max_frames must be >= 0");
    if (eval_every <= 0) throw std::invalid_argument("config: eval_every must be positive");
    if (eval_episodes < 1 || eval_workers < 1)
      throw std::invalid_argument("config: eval settings must be positive");
    if (success_threshold > 1.0)
      throw std::invalid_argument("config: success_threshold must be <= 1");
    if (encoder != "gru" && encoder != "mlp")
      throw std::invalid_argument("config: encoder must be gru or mlp");
    selection_mode_from_string(selection_mode);
    train.validate();
  }

  PrimitiveConfig primitive_config(int obs_dim, int n_actions) const {
    PrimitiveConfig pc;
    pc.obs_dim = obs_dim;
    pc.n_actions = n_actions;
    pc.encoder = encoder == "gru" ? EncoderKind::Gru : EncoderKind::Mlp;
    pc.gru_hidden = gru_hidden;
    pc.mlp_hidden = mlp_hidden;
    pc.latent_dim = latent_dim;
    pc.head_hidden = head_hidden;
    pc.decoder_hidden = decoder_hidden;
    pc.value_hidden = value_hidden;
    return pc;
  }
};

namespace detail {

inline std::string fmt_g17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  return out;
}

inline double parse_num(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return d;
  } catch (...) {
    throw std::invalid_argument("config: bad numeric value for '" + key + "': " + v);
  }
}

inline long parse_long(const std::string& key, const std::string& v) {
  double d = parse_num(key, v);
  return static_cast<long>(d);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw std::invalid_argument("config: bad boolean value for '" + key + "': " + v);
}

inline std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  for (const auto& tok : split_csv(v)) out.push_back(static_cast<int>(parse_long(key, tok)));
  return out;
}

}  // namespace detail

// Applies one "section.key = value" assignment; throws on unknown keys.
inline void config_set(ExperimentConfig& c, const std::string& section, const std::string& key,
                       const std::string& value) {
  using namespace detail;
  const std::string full = section + "." + key;
  if (section == "experiment") {
    if (key == "env") { c.env = value; return; }
    if (key == "map_file") { c.map_file = value; return; }
    if (key == "k") { c.k = static_cast<int>(parse_long(full, value)); return; }
    if (key == "seeds") {
      c.seeds.clear();
      for (const auto& tok : split_csv(value))
        c.seeds.push_back(static_cast<std::uint64_t>(std::stoull(tok)));
      return;
    }
    if (key == "max_frames") { c.max_frames = parse_long(full, value); return; }
    if (key == "eval_every") { c.eval_every = parse_long(full, value); return; }
    if (key == "eval_episodes") { c.eval_episodes = static_cast<int>(parse_long(full, value)); return; }
    if (key == "eval_workers") { c.eval_workers = static_cast<int>(parse_long(full, value)); return; }
    if (key == "success_threshold") { c.success_threshold = parse_num(full, value); return; }
    if (key == "phase_max_frames") { c.phase_max_frames = parse_long(full, value); return; }
    if (key == "out") { c.out_dir = value; return; }
    if (key == "jobs") { c.jobs = static_cast<int>(parse_long(full, value)); return; }
  } else if (section == "model") {
    if (key == "encoder") { c.encoder = value; return; }
    if (key == "gru_hidden") { c.gru_hidden = static_cast<int>(parse_long(full, value)); return; }
    if (key == "mlp_hidden") { c.mlp_hidden = parse_int_list(full, value); return; }
    if (key == "latent_dim") { c.latent_dim = static_cast<int>(parse_long(full, value)); return; }
    if (key == "head_hidden") { c.head_hidden = static_cast<int>(parse_long(full, value)); return; }
    if (key == "decoder_hidden") { c.decoder_hidden = parse_int_list(full, value); return; }
    if (key == "value_hidden") { c.value_hidden = parse_int_list(full, value); return; }
    if (key == "selection_mode") { c.selection_mode = value; return; }
  } else if (section == "train") {
    TrainConfig& t = c.train;
    if (key == "algorithm") {
      if (value == "a2c") t.algorithm = Algorithm::A2c;
      else if (value == "ppo") t.algorithm = Algorithm::Ppo;
      else throw std::invalid_argument("config: algorithm must be a2c or ppo");
      return;
    }
    if (key == "optimizer") {
      if (value == "rmsprop") t.optimizer = OptimizerKind::RmsProp;
      else if (value == "adam") t.optimizer = OptimizerKind::Adam;
      else throw std::invalid_argument("config: optimizer must be rmsprop or adam");
      return;
    }
    if (key == "lr") { t.lr = parse_num(full, value); return; }
    if (key == "gamma") { t.gamma = parse_num(full, value); return; }
    if (key == "lambda") { t.lambda = parse_num(full, value); return; }
    if (key == "entropy_coef") { t.entropy_coef = parse_num(full, value); return; }
    if (key == "value_coef") { t.value_coef = parse_num(full, value); return; }
    if (key == "max_grad_norm") { t.max_grad_norm = parse_num(full, value); return; }
    if (key == "beta_ind") { t.beta_ind = parse_num(full, value); return; }
    if (key == "beta_reg") { t.beta_reg = parse_num(full, value); return; }
    if (key == "ppo_clip") { t.ppo_clip = parse_num(full, value); return; }
    if (key == "ppo_epochs") { t.ppo_epochs = static_cast<int>(parse_long(full, value)); return; }
    if (key == "t_steps") { t.t_steps = static_cast<int>(parse_long(full, value)); return; }
    if (key == "mixture_logprob") { t.mixture_logprob = parse_bool(full, value); return; }
    if (key == "n_envs") { c.n_envs = static_cast<int>(parse_long(full, value)); return; }
  } else {
    throw std::invalid_argument("config: unknown section [" + section + "]");
  }
  throw std::invalid_argument("config: unknown key '" + key + "' in section [" + section + "]");
}

inline void apply_config_text(ExperimentConfig& c, const std::string& text) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw std::invalid_argument("config: malformed section header at line " +
                                    std::to_string(lineno));
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: expected 'key = value' at line " +
                                  std::to_string(lineno));
    if (section.empty())
      throw std::invalid_argument("config: assignment before any [section] at line " +
                                  std::to_string(lineno));
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    config_set(c, section, key, value);
  }
}

inline ExperimentConfig load_config_file(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(base, buf.str());
  return base;
}

// Canonical text echo; stable ordering so checkpoint manifests round-trip
// byte-identically.
inline std::string config_to_text(const ExperimentConfig& c) {
  using detail::fmt_g17;
  std::ostringstream out;
  auto list = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  out << "[experiment]\n";
  out << "env = " << c.env << "\n";
  out << "map_file = " << c.map_file << "\n";
  out << "k = " << c.k << "\n";
  out << "seeds = ";
  for (std::size_t i = 0; i < c.seeds.size(); ++i) out << (i ? "," : "") << c.seeds[i];
  out << "\n";
  out << "max_frames = " << c.max_frames << "\n";
  out << "eval_every = " << c.eval_every << "\n";
  out << "eval_episodes = " << c.eval_episodes << "\n";
  out << "eval_workers = " << c.eval_workers << "\n";
  out << "success_threshold = " << fmt_g17(c.success_threshold) << "\n";
  out << "phase_max_frames = " << c.phase_max_frames << "\n";
  out << "out = " << c.out_dir << "\n";
  out << "jobs = " << c.jobs << "\n";
  out << "[model]\n";
  out << "encoder = " << c.encoder << "\n";
  out << "gru_hidden = " << c.gru_hidden << "\n";
  out << "mlp_hidden = " << list(c.mlp_hidden) << "\n";
  out << "latent_dim = " << c.latent_dim << "\n";
  out << "head_hidden = " << c.head_hidden << "\n";
  out << "decoder_hidden = " << list(c.decoder_hidden) << "\n";
  out << "value_hidden = " << list(c.value_hidden) << "\n";
  out << "selection_mode = " << c.selection_mode << "\n";
  out << "[train]\n";
  out << "algorithm = " << (c.train.algorithm == Algorithm::A2c ? "a2c" : "ppo") << "\n";
  out << "optimizer = " << (c.train.optimizer == OptimizerKind::RmsProp ? "rmsprop" : "adam")
      << "\n";
  out << "lr = " << fmt_g17(c.train.lr) << "\n";
  out << "gamma = " << fmt_g17(c.train.gamma) << "\n";
  out << "lambda = " << fmt_g17(c.train.lambda) << "\n";
  out << "entropy_coef = " << fmt_g17(c.train.entropy_coef) << "\n";
  out << "value_coef = " << fmt_g17(c.train.value_coef) << "\n";
  out << "max_grad_norm = " << fmt_g17(c.train.max_grad_norm) << "\n";
  out << "beta_ind = " << fmt_g17(c.train.beta_ind) << "\n";
  out << "beta_reg = " << fmt_g17(c.train.beta_reg) << "\n";
  out << "ppo_clip = " << fmt_g17(c.train.ppo_clip) << "\n";
  out << "ppo_epochs = " << c.train.ppo_epochs << "\n";
  out << "t_steps = " << c.train.t_steps << "\n";
  out << "mixture_logprob = " << (c.train.mixture_logprob ? "true" : "false") << "\n";
  out << "n_envs = " << c.n_envs << "\n";
  return out.str();
}

// Per-environment defaults following the experiment setups: PPO/Adam for the
// bandits task, A2C/RMSProp for the four-rooms curriculum.
inline ExperimentConfig default_config(const std::string& env) {
  ExperimentConfig c;
  c.env = env;
  if (env == "bandits") {
    c.train.algorithm = Algorithm::Ppo;
    c.train.optimizer = OptimizerKind::Adam;
    c.train.lr = 3e-5;
    c.train.entropy_coef = 0.0;
    c.train.value_coef = 1.0;
    c.train.ppo_epochs = 10;
    c.train.ppo_clip = 0.2;
    c.max_frames = 3'000'000;
    c.eval_every = 150'000;
  } else if (env.rfind("fourrooms-", 0) == 0) {
    c.train.algorithm = Algorithm::A2c;
    c.train.optimizer = OptimizerKind::RmsProp;
    c.train.lr = 7e-4;
    c.train.entropy_coef = 1e-2;
    c.train.value_coef = 0.5;
    c.max_frames = 10'000'000;
    c.eval_every = 250'000;
  } else {
    throw std::invalid_argument("default_config: unknown env '" + env + "'");
  }
  return c;
}

}  // namespace cip
