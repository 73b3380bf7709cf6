#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace cip {

inline std::uint64_t splitmix64_next(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ull;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Derives an independent stream seed from a base seed. Used to hand every
// env instance / worker / seed-leg its own generator.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
  std::uint64_t x = base ^ (0x9e3779b97f4a7c15ull * (stream + 1));
  std::uint64_t a = splitmix64_next(x);
  std::uint64_t b = splitmix64_next(x);
  return a ^ (b << 1);
}

// xoshiro256++ with splitmix64 seeding. All distributions are implemented
// here rather than with <random> so that a seed pins the exact sample
// sequence independent of the standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) { reseed(seed); }

  void reseed(std::uint64_t seed) {
    seed_ = seed;
    std::uint64_t x = seed;
    for (auto& s : state_) s = splitmix64_next(x);
    has_cached_normal_ = false;
    cached_normal_ = 0.0;
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  int uniform_int(int n) {
    if (n <= 0) throw std::invalid_argument("Rng::uniform_int: n must be positive");
    return static_cast<int>(mul_hi(next_u64(), static_cast<std::uint64_t>(n)));
  }

  // Standard normal via the Marsaglia polar method; pairs are cached.
  double normal() {
    if (has_cached_normal_) {
      has_cached_normal_ = false;
      return cached_normal_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double m = std::sqrt(-2.0 * std::log(s) / s);
    cached_normal_ = v * m;
    has_cached_normal_ = true;
    return u * m;
  }

  // Draws an index from an unnormalized nonnegative weight vector.
  int categorical(const double* w, int n) {
    if (n <= 0) throw std::invalid_argument("Rng::categorical: empty weights");
    double total = 0.0;
    for (int i = 0; i < n; ++i) total += w[i];
    if (!(total > 0.0)) throw std::invalid_argument("Rng::categorical: weights sum to zero");
    const double u = uniform() * total;
    double acc = 0.0;
    for (int i = 0; i < n; ++i) {
      acc += w[i];
      if (u < acc) return i;
    }
    return n - 1;
  }

  int categorical(const std::vector<double>& w) {
    return categorical(w.data(), static_cast<int>(w.size()));
  }

  // State serialization for checkpoints: exact integer round trip.
  std::string save_state() const {
    std::string out;
    for (auto s : state_) out += std::to_string(s) + " ";
    out += has_cached_normal_ ? "1 " : "0 ";
    std::uint64_t bits = 0;
    std::memcpy(&bits, &cached_normal_, sizeof(bits));
    out += std::to_string(bits);
    out += " " + std::to_string(seed_);
    return out;
  }

  void load_state(const std::string& text) {
    std::array<std::uint64_t, 7> vals{};
    std::size_t pos = 0;
    for (auto& v : vals) {
      while (pos < text.size() && text[pos] == ' ') ++pos;
      std::size_t used = 0;
      v = std::stoull(text.substr(pos), &used);
      pos += used;
    }
    state_ = {vals[0], vals[1], vals[2], vals[3]};
    has_cached_normal_ = vals[4] != 0;
    std::memcpy(&cached_normal_, &vals[5], sizeof(cached_normal_));
    seed_ = vals[6];
  }

 private:
  static std::uint64_t rotl(std::uint64_t x, int k) {
    return (x << k) | (x >> (64 - k));
  }
  static std::uint64_t mul_hi(std::uint64_t a, std::uint64_t b) {
    return static_cast<std::uint64_t>(
        (static_cast<unsigned __int128>(a) * static_cast<unsigned __int128>(b)) >> 64);
  }

  std::array<std::uint64_t, 4> state_{};
  std::uint64_t seed_ = 0;
  bool has_cached_normal_ = false;
  double cached_normal_ = 0.0;
};

}  // namespace cip
