#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace cip {

// Dense row-major tensor of doubles. Rank 1 ({n}) and rank 2 ({rows, cols})
// cover everything in this library; scalars are {1}.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<int> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (count(shape) != data.size())
      throw std::invalid_argument("Tensor: shape/data size mismatch");
  }

  static std::size_t count(const std::vector<int>& s) {
    std::size_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("Tensor: negative dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  static Tensor zeros(std::vector<int> s) {
    std::size_t n = count(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }

  static Tensor full(std::vector<int> s, double v) {
    std::size_t n = count(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor row_major(int rows, int cols, std::vector<double> d) {
    return Tensor({rows, cols}, std::move(d));
  }

  static Tensor vec(std::vector<double> d) {
    int n = static_cast<int>(d.size());
    return Tensor({n}, std::move(d));
  }

  std::size_t size() const { return data.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int rows() const { return rank() >= 1 ? shape[0] : 1; }
  int cols() const { return rank() >= 2 ? shape[1] : 1; }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }

  double item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: not a scalar");
    return data[0];
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    out += std::to_string(s[i]);
    if (i + 1 < s.size()) out += ",";
  }
  return out + "]";
}

}  // namespace cip
