#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cip/config.hpp"
#include "cip/envs.hpp"
#include "cip/primitives.hpp"
#include "cip/trainer.hpp"

namespace cip {

// A checkpoint is a structured-text manifest plus binary blobs:
//   <path>          manifest
//   <path>.bin      parameters, 32-bit little-endian floats in manifest order
//   <path>.state.bin  optional training state (optimizer slots, hidden
//                     states, pending observation), 64-bit floats, written
//                     only when the checkpoint carries resumable state
// Live parameters must be quantized through f32 before saving (see
// quantize_params_f32) so that a resumed run continues bit-identically.
struct Checkpoint {
  int format_version = 1;
  long frames = 0;
  ExperimentConfig config;
  std::vector<std::string> provenance;  // one entry per primitive
  PrimitiveEnsemble ensemble;

  bool has_train_state = false;
  std::string opt_kind = "none";
  long opt_step_count = 0;
  std::vector<Tensor> opt_m1, opt_m2;
  std::string rng_train, rng_worker;
  bool worker_initialized = false;
  std::vector<Tensor> hiddens;  // per primitive {N, H}
  Tensor last_obs;              // {N, obs_dim}
  std::vector<std::string> env_states;
};

inline void quantize_params_f32(PrimitiveEnsemble& e) {
  for (auto& prim : e.prims)
    for (auto& entry : prim.params.entries)
      for (double& v : entry.value.data) v = static_cast<double>(static_cast<float>(v));
}

namespace detail {

inline void write_f32_blob(const std::string& path, const std::vector<const Tensor*>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  for (const Tensor* t : tensors)
    for (double v : t->data) {
      const float f = static_cast<float>(v);
      out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
}

inline void write_f64_blob(const std::string& path, const std::vector<const Tensor*>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  for (const Tensor* t : tensors)
    out.write(reinterpret_cast<const char*>(t->data.data()),
              static_cast<std::streamsize>(t->data.size() * sizeof(double)));
}

inline std::vector<float> read_f32_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
  const std::streamsize bytes = in.tellg();
  in.seekg(0);
  std::vector<float> data(static_cast<std::size_t>(bytes) / sizeof(float));
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  return data;
}

inline std::vector<double> read_f64_blob(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw std::runtime_error("checkpoint: cannot read " + path);
  const std::streamsize bytes = in.tellg();
  in.seekg(0);
  std::vector<double> data(static_cast<std::size_t>(bytes) / sizeof(double));
  in.read(reinterpret_cast<char*>(data.data()), bytes);
  return data;
}

inline std::string shape_line(const Tensor& t) {
  std::string s = std::to_string(t.rank());
  for (int d : t.shape) s += " " + std::to_string(d);
  return s;
}

}  // namespace detail

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  std::ostringstream m;
  m << "cip-checkpoint\n";
  m << "format_version = " << ck.format_version << "\n";
  m << "frames = " << ck.frames << "\n";
  m << "primitives = " << ck.ensemble.K() << "\n";

  const std::string cfg_text = config_to_text(ck.config);
  long cfg_lines = 0;
  for (char c : cfg_text)
    if (c == '\n') ++cfg_lines;
  m << "config_lines = " << cfg_lines << "\n" << cfg_text;

  m << "provenance_lines = " << ck.provenance.size() << "\n";
  for (const auto& p : ck.provenance) m << p << "\n";

  std::vector<const Tensor*> params;
  long offset = 0;
  std::ostringstream plist;
  for (int k = 0; k < ck.ensemble.K(); ++k) {
    const auto& store = ck.ensemble.prims[k].params;
    for (const auto& e : store.entries) {
      plist << "p" << k << "/" << e.name << " " << detail::shape_line(e.value) << " @ " << offset
            << "\n";
      offset += static_cast<long>(e.value.size());
      params.push_back(&e.value);
    }
  }
  m << "param_entries = " << params.size() << "\n" << plist.str();
  m << "param_total = " << offset << "\n";

  m << "train_state = " << (ck.has_train_state ? 1 : 0) << "\n";
  std::vector<const Tensor*> state;
  if (ck.has_train_state) {
    m << "opt_kind = " << ck.opt_kind << "\n";
    m << "opt_step_count = " << ck.opt_step_count << "\n";
    long soff = 0;
    std::ostringstream slist;
    auto add_state = [&](const std::string& name, const Tensor& t) {
      slist << name << " " << detail::shape_line(t) << " @ " << soff << "\n";
      soff += static_cast<long>(t.size());
      state.push_back(&t);
    };
    for (std::size_t i = 0; i < ck.opt_m1.size(); ++i)
      add_state("opt.m1." + std::to_string(i), ck.opt_m1[i]);
    for (std::size_t i = 0; i < ck.opt_m2.size(); ++i)
      add_state("opt.m2." + std::to_string(i), ck.opt_m2[i]);
    for (std::size_t i = 0; i < ck.hiddens.size(); ++i)
      add_state("hidden." + std::to_string(i), ck.hiddens[i]);
    if (ck.last_obs.size()) add_state("last_obs", ck.last_obs);
    m << "state_entries = " << state.size() << "\n" << slist.str();
    m << "state_total = " << soff << "\n";
    m << "worker_initialized = " << (ck.worker_initialized ? 1 : 0) << "\n";
    m << "rng_train = " << ck.rng_train << "\n";
    m << "rng_worker = " << ck.rng_worker << "\n";
    m << "env_count = " << ck.env_states.size() << "\n";
    for (const auto& e : ck.env_states) m << e << "\n";
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path);
  out << m.str();
  out.close();
  detail::write_f32_blob(path + ".bin", params);
  if (ck.has_train_state) detail::write_f64_blob(path + ".state.bin", state);
}

namespace detail {

inline std::string expect_line(std::istream& in, const std::string& where) {
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint: truncated manifest at " + where);
  return line;
}

inline long expect_kv(std::istream& in, const std::string& key) {
  std::string line = expect_line(in, key);
  const std::string prefix = key + " = ";
  if (line.rfind(prefix, 0) != 0)
    throw std::runtime_error("checkpoint: expected '" + key + "', got '" + line + "'");
  return std::stol(line.substr(prefix.size()));
}

inline std::string expect_kv_str(std::istream& in, const std::string& key) {
  std::string line = expect_line(in, key);
  const std::string prefix = key + " = ";
  if (line.rfind(prefix, 0) != 0)
    throw std::runtime_error("checkpoint: expected '" + key + "', got '" + line + "'");
  return line.substr(prefix.size());
}

struct BlobEntry {
  std::string name;
  std::vector<int> shape;
  long offset = 0;
};

inline BlobEntry parse_entry(const std::string& line) {
  std::istringstream in(line);
  BlobEntry e;
  int rank = 0;
  in >> e.name >> rank;
  e.shape.resize(rank);
  for (int i = 0; i < rank; ++i) in >> e.shape[i];
  std::string at;
  in >> at >> e.offset;
  if (at != "@") throw std::runtime_error("checkpoint: malformed blob entry '" + line + "'");
  return e;
}

}  // namespace detail

inline Checkpoint load_checkpoint(const std::string& path,
                                  const FourRoomsLayout* layout = nullptr) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  if (detail::expect_line(in, "magic") != "cip-checkpoint")
    throw std::runtime_error("checkpoint: bad magic in " + path);

  Checkpoint ck;
  ck.format_version = static_cast<int>(detail::expect_kv(in, "format_version"));
  if (ck.format_version != 1)
    throw std::runtime_error("checkpoint: unsupported format version");
  ck.frames = detail::expect_kv(in, "frames");
  const int K = static_cast<int>(detail::expect_kv(in, "primitives"));

  const long cfg_lines = detail::expect_kv(in, "config_lines");
  std::string cfg_text;
  for (long i = 0; i < cfg_lines; ++i) cfg_text += detail::expect_line(in, "config") + "\n";
  ck.config = ExperimentConfig{};
  apply_config_text(ck.config, cfg_text);

  const long prov = detail::expect_kv(in, "provenance_lines");
  for (long i = 0; i < prov; ++i) ck.provenance.push_back(detail::expect_line(in, "provenance"));

  const long pn = detail::expect_kv(in, "param_entries");
  std::vector<detail::BlobEntry> entries;
  for (long i = 0; i < pn; ++i)
    entries.push_back(detail::parse_entry(detail::expect_line(in, "param entry")));
  const long ptotal = detail::expect_kv(in, "param_total");

  // Rebuild the ensemble skeleton from the config, then overwrite values.
  auto probe_env = make_env(ck.config.env, 0, layout);
  Env& probe = *probe_env;
  PrimitiveConfig pc = ck.config.primitive_config(probe.obs_dim(), probe.n_actions());
  Rng init_rng(0);
  ck.ensemble = PrimitiveEnsemble::create(K, pc, ck.config.train.beta_ind,
                                          ck.config.train.beta_reg, init_rng);
  ck.ensemble.selection_mode = selection_mode_from_string(ck.config.selection_mode);

  std::vector<float> blob = detail::read_f32_blob(path + ".bin");
  if (static_cast<long>(blob.size()) != ptotal)
    throw std::runtime_error("checkpoint: blob length mismatch (" + std::to_string(blob.size()) +
                             " vs " + std::to_string(ptotal) + ")");
  std::size_t entry_idx = 0;
  for (int k = 0; k < K; ++k) {
    auto& store = ck.ensemble.prims[k].params;
    for (auto& e : store.entries) {
      if (entry_idx >= entries.size())
        throw std::runtime_error("checkpoint: missing param entry for " + e.name);
      const auto& be = entries[entry_idx++];
      const std::string expect = "p" + std::to_string(k) + "/" + e.name;
      if (be.name != expect)
        throw std::runtime_error("checkpoint: param order mismatch: " + be.name + " vs " + expect);
      if (be.shape != e.value.shape)
        throw std::runtime_error("checkpoint: param shape mismatch for " + e.name);
      for (std::size_t i = 0; i < e.value.size(); ++i)
        e.value.data[i] = static_cast<double>(blob[be.offset + i]);
    }
  }
  if (entry_idx != entries.size())
    throw std::runtime_error("checkpoint: extra param entries in manifest");

  ck.has_train_state = detail::expect_kv(in, "train_state") != 0;
  if (ck.has_train_state) {
    ck.opt_kind = detail::expect_kv_str(in, "opt_kind");
    ck.opt_step_count = detail::expect_kv(in, "opt_step_count");
    const long sn = detail::expect_kv(in, "state_entries");
    std::vector<detail::BlobEntry> sentries;
    for (long i = 0; i < sn; ++i)
      sentries.push_back(detail::parse_entry(detail::expect_line(in, "state entry")));
    const long stotal = detail::expect_kv(in, "state_total");
    std::vector<double> sblob = detail::read_f64_blob(path + ".state.bin");
    if (static_cast<long>(sblob.size()) != stotal)
      throw std::runtime_error("checkpoint: state blob length mismatch");
    for (const auto& se : sentries) {
      Tensor t = Tensor::zeros(se.shape);
      for (std::size_t i = 0; i < t.size(); ++i) t.data[i] = sblob[se.offset + i];
      if (se.name.rfind("opt.m1.", 0) == 0) ck.opt_m1.push_back(std::move(t));
      else if (se.name.rfind("opt.m2.", 0) == 0) ck.opt_m2.push_back(std::move(t));
      else if (se.name.rfind("hidden.", 0) == 0) ck.hiddens.push_back(std::move(t));
      else if (se.name == "last_obs") ck.last_obs = std::move(t);
      else throw std::runtime_error("checkpoint: unknown state entry " + se.name);
    }
    ck.worker_initialized = detail::expect_kv(in, "worker_initialized") != 0;
    ck.rng_train = detail::expect_kv_str(in, "rng_train");
    ck.rng_worker = detail::expect_kv_str(in, "rng_worker");
    const long en = detail::expect_kv(in, "env_count");
    for (long i = 0; i < en; ++i) ck.env_states.push_back(detail::expect_line(in, "env state"));
  }
  return ck;
}

}  // namespace cip
