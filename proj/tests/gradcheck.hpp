#pragma once

#include <functional>

#include "dfkd/autodiff.hpp"

namespace dfkd::testutil {

// Central finite differences against analytic gradients. `f` must rebuild the
// graph from the given inputs on every call and return a scalar Var.
inline double max_rel_grad_err(
    const std::function<Var<double>(std::vector<Var<double>>&)>& f,
    std::vector<Tensor<double>> input_vals, double eps = 1e-5) {
  std::vector<Var<double>> inputs;
  for (auto& t : input_vals) inputs.emplace_back(t, true);
  Var<double> out = f(inputs);
  backward(out);

  double worst = 0.0;
  for (size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double> analytic = inputs[k].grad();
    for (size_t j = 0; j < input_vals[k].data.size(); ++j) {
      std::vector<Var<double>> probe;
      for (auto& t : input_vals) probe.emplace_back(t, false);
      probe[k].val().data[j] += eps;
      double up = f(probe).scalar();
      probe[k].val().data[j] -= 2 * eps;
      double dn = f(probe).scalar();
      probe[k].val().data[j] += eps;
      double numeric = (up - dn) / (2 * eps);
      double denom = std::max(1e-4, std::abs(numeric) + std::abs(analytic.data[j]));
      worst = std::max(worst, std::abs(numeric - analytic.data[j]) / denom);
    }
  }
  return worst;
}

}  // namespace dfkd::testutil
