#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>

#include "cip/rng.hpp"
#include "cip/tensor.hpp"

namespace cip {

// Fills with N(0,1) entries.
inline void unit_gaussian(Tensor& t, Rng& rng) {
  for (double& v : t.data) v = rng.normal();
}

// (Semi) orthogonal init: W^T W = I on the smaller dimension. Gaussian fill,
// thin QR, columns sign-corrected by diag(R).
inline void orthogonal(Tensor& t, Rng& rng, double gain = 1.0) {
  if (t.rank() != 2) throw std::invalid_argument("orthogonal: rank-2 tensor required");
  const int rows = t.rows(), cols = t.cols();
  const int big = std::max(rows, cols), small = std::min(rows, cols);
  Eigen::MatrixXd a(big, small);
  for (int j = 0; j < small; ++j)
    for (int i = 0; i < big; ++i) a(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(a);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(big, small);
  Eigen::MatrixXd r = qr.matrixQR().topRows(small).triangularView<Eigen::Upper>();
  for (int j = 0; j < small; ++j)
    if (r(j, j) < 0.0) q.col(j) = -q.col(j);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) t.at(i, j) = gain * (rows >= cols ? q(i, j) : q(j, i));
}

// U(-sqrt(k), sqrt(k)) with k = 1/hidden_size; the GRU weight/bias scheme.
inline void gru_uniform(Tensor& t, int hidden_size, Rng& rng) {
  if (hidden_size <= 0) throw std::invalid_argument("gru_uniform: hidden_size must be positive");
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_size));
  for (double& v : t.data) v = rng.uniform(-bound, bound);
}

}  // namespace cip
