#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "cip/tensor.hpp"

namespace cip {

// Central finite differences against an analytic gradient. `f` evaluates the
// scalar function at the current parameter values; `params` are the tensors
// f depends on; `analytic` holds dL/dparam in matching order. Returns the
// max relative error over all coordinates, with an absolute floor so that
// near-zero gradient pairs do not blow up the ratio.
inline double grad_check_max_rel_error(const std::function<double()>& f,
                                       std::vector<Tensor*> params,
                                       const std::vector<Tensor>& analytic,
                                       double eps = 1e-5, double floor = 1e-8) {
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = *params[p];
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t.data[i];
      t.data[i] = orig + eps;
      const double up = f();
      t.data[i] = orig - eps;
      const double down = f();
      t.data[i] = orig;
      const double numeric = (up - down) / (2.0 * eps);
      const double exact = analytic[p].data[i];
      const double denom = std::max({std::abs(numeric), std::abs(exact), floor});
      worst = std::max(worst, std::abs(numeric - exact) / denom);
    }
  }
  return worst;
}

}  // namespace cip
