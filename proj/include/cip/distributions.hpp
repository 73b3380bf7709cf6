#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "cip/rng.hpp"
#include "cip/tape.hpp"
#include "cip/tensor.hpp"

namespace cip {

// Diagonal Gaussian over the latent, parameterized by mean and log stddev.
// log_sigma is expected to be pre-clamped to [-10, 5] by the encoder head.
struct GaussianLatent {
  std::vector<double> mu;
  std::vector<double> log_sigma;

  GaussianLatent() = default;
  GaussianLatent(std::vector<double> m, std::vector<double> ls)
      : mu(std::move(m)), log_sigma(std::move(ls)) {
    if (mu.size() != log_sigma.size())
      throw std::invalid_argument("GaussianLatent: mu/log_sigma length mismatch");
  }
  std::size_t dim() const { return mu.size(); }
};

constexpr double kLogSigmaMin = -10.0;
constexpr double kLogSigmaMax = 5.0;

// KL( N(mu, diag(sigma^2)) || N(0, I) ) in closed form:
//   0.5 * sum_i (mu_i^2 + sigma_i^2 - 1 - 2 log sigma_i).
inline double gaussian_kl_std(const GaussianLatent& g) {
  double s = 0.0;
  for (std::size_t i = 0; i < g.dim(); ++i) {
    const double m = g.mu[i];
    const double ls = g.log_sigma[i];
    s += m * m + std::exp(2.0 * ls) - 1.0 - 2.0 * ls;
  }
  return 0.5 * s;
}

// z = mu + exp(log_sigma) * eps, eps ~ N(0, I); one draw per call.
inline std::vector<double> reparam_sample(const GaussianLatent& g, Rng& rng) {
  std::vector<double> z(g.dim());
  for (std::size_t i = 0; i < g.dim(); ++i)
    z[i] = g.mu[i] + std::exp(g.log_sigma[i]) * rng.normal();
  return z;
}

// Tape route of the same transform; gradient flows to mu and log_sigma, eps
// enters as a constant.
inline Var reparam_sample(Tape& tape, Var mu, Var log_sigma, Var eps) {
  return tape.add(mu, tape.mul(tape.exp(log_sigma), eps));
}

// Max-shifted softmax over a plain vector.
inline std::vector<double> softmax(const std::vector<double>& x) {
  if (x.empty()) throw std::invalid_argument("softmax: empty input");
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> out(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = std::exp(x[i] - mx);
    s += out[i];
  }
  for (double& v : out) v /= s;
  return out;
}

// Max-shifted log(sum_j exp(x_j)).
inline double logsumexp(const std::vector<double>& x) {
  if (x.empty()) throw std::invalid_argument("logsumexp: empty input");
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  double s = 0.0;
  for (double v : x) s += std::exp(v - mx);
  return mx + std::log(s);
}

inline double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double v : p)
    if (v > 0.0) h -= v * std::log(v);
  return h;
}

}  // namespace cip
