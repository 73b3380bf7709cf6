#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cip/init.hpp"
#include "cip/rng.hpp"
#include "cip/tape.hpp"
#include "cip/tensor.hpp"

namespace cip {

// Named parameter registry with stable ordering; the ordering defines the
// checkpoint blob layout and the optimizer slot layout.
struct ParamStore {
  struct Entry {
    std::string name;
    Tensor value;
  };
  std::vector<Entry> entries;

  int add(std::string name, Tensor value) {
    entries.push_back({std::move(name), std::move(value)});
    return static_cast<int>(entries.size() - 1);
  }

  int count() const { return static_cast<int>(entries.size()); }
  Tensor& value(int i) { return entries[i].value; }
  const Tensor& value(int i) const { return entries[i].value; }
  const std::string& name(int i) const { return entries[i].name; }
};

// Per-tape leaf vars for every entry of a ParamStore.
struct Binding {
  std::vector<Var> leaves;
  Var operator[](int i) const { return leaves[i]; }
};

inline Binding bind_params(Tape& tape, const ParamStore& store) {
  Binding b;
  b.leaves.reserve(store.entries.size());
  for (const auto& e : store.entries) b.leaves.push_back(tape.leaf(&e.value));
  return b;
}

enum class Activation { None, Tanh, Relu };

inline Var apply_activation(Tape& tape, Var x, Activation act) {
  switch (act) {
    case Activation::None: return x;
    case Activation::Tanh: return tape.tanh(x);
    case Activation::Relu: return tape.relu(x);
  }
  return x;
}

struct Linear {
  int W = -1;
  int b = -1;
  int in = 0;
  int out = 0;

  // Orthogonal weights (gain 1), zero bias.
  static Linear create(ParamStore& store, const std::string& name, int in, int out, Rng& rng) {
    Linear l;
    l.in = in;
    l.out = out;
    Tensor w = Tensor::zeros({in, out});
    orthogonal(w, rng);
    l.W = store.add(name + ".W", std::move(w));
    l.b = store.add(name + ".b", Tensor::zeros({out}));
    return l;
  }

  Var operator()(Tape& tape, const Binding& bind, Var x) const {
    return affine(tape, x, bind[W], bind[b]);
  }
};

// Feedforward stack: activation after every layer except the last.
struct Mlp {
  std::vector<Linear> layers;
  Activation act = Activation::Tanh;

  static Mlp create(ParamStore& store, const std::string& name, int in,
                    const std::vector<int>& hidden, int out, Activation act, Rng& rng) {
    Mlp m;
    m.act = act;
    int prev = in;
    for (std::size_t i = 0; i < hidden.size(); ++i) {
      m.layers.push_back(Linear::create(store, name + ".l" + std::to_string(i), prev, hidden[i], rng));
      prev = hidden[i];
    }
    m.layers.push_back(
        Linear::create(store, name + ".l" + std::to_string(hidden.size()), prev, out, rng));
    return m;
  }

  Var operator()(Tape& tape, const Binding& bind, Var x) const {
    Var h = x;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h = layers[i](tape, bind, h);
      if (i + 1 < layers.size()) h = apply_activation(tape, h, act);
    }
    return h;
  }

  int out_dim() const { return layers.back().out; }
};

// GRU cell, gate convention:
//   r = sig(x Wir + bir + h Whr + bhr)
//   u = sig(x Wiz + biz + h Whz + bhz)
//   c = tanh(x Win + bin + r * (h Whn + bhn))
//   h' = (1 - u) * c + u * h
// All weights and biases drawn from U(-sqrt(k), sqrt(k)), k = 1/hidden.
struct GruCell {
  int in = 0;
  int hidden = 0;
  int Wir = -1, Wiz = -1, Win = -1;
  int Whr = -1, Whz = -1, Whn = -1;
  int bir = -1, biz = -1, bin = -1;
  int bhr = -1, bhz = -1, bhn = -1;

  static GruCell create(ParamStore& store, const std::string& name, int in, int hidden, Rng& rng) {
    GruCell g;
    g.in = in;
    g.hidden = hidden;
    auto weight = [&](const std::string& suffix, int r, int c) {
      Tensor t = Tensor::zeros({r, c});
      gru_uniform(t, hidden, rng);
      return store.add(name + "." + suffix, std::move(t));
    };
    auto bias = [&](const std::string& suffix) {
      Tensor t = Tensor::zeros({hidden});
      gru_uniform(t, hidden, rng);
      return store.add(name + "." + suffix, std::move(t));
    };
    g.Wir = weight("Wir", in, hidden);
    g.Wiz = weight("Wiz", in, hidden);
    g.Win = weight("Win", in, hidden);
    g.Whr = weight("Whr", hidden, hidden);
    g.Whz = weight("Whz", hidden, hidden);
    g.Whn = weight("Whn", hidden, hidden);
    g.bir = bias("bir");
    g.biz = bias("biz");
    g.bin = bias("bin");
    g.bhr = bias("bhr");
    g.bhz = bias("bhz");
    g.bhn = bias("bhn");
    return g;
  }

  Var step(Tape& tape, const Binding& bind, Var x, Var h_prev) const {
    Var r = tape.sigmoid(tape.add(affine(tape, x, bind[Wir], bind[bir]),
                                  affine(tape, h_prev, bind[Whr], bind[bhr])));
    Var u = tape.sigmoid(tape.add(affine(tape, x, bind[Wiz], bind[biz]),
                                  affine(tape, h_prev, bind[Whz], bind[bhz])));
    Var c = tape.tanh(tape.add(affine(tape, x, bind[Win], bind[bin]),
                               tape.mul(r, affine(tape, h_prev, bind[Whn], bind[bhn]))));
    // (1-u)*c + u*h = c + u*(h - c)
    return tape.add(c, tape.mul(u, tape.sub(h_prev, c)));
  }
};

}  // namespace cip
