#pragma once

// Central finite-difference gradient oracle. Independent of the backward
// pass it checks: it only re-runs forward passes with perturbed leaves.

#include "kad/autodiff.hpp"

#include <cmath>
#include <functional>
#include <vector>

namespace kad::test {

inline double rel_err(double a, double b) {
  const double denom = std::max({std::abs(a), std::abs(b), 1e-4});
  return std::abs(a - b) / denom;
}

// make_loss rebuilds the scalar loss graph from the current leaf values.
// Returns the maximum relative error between analytic and central-difference
// gradients over every element of every leaf.
inline double max_grad_rel_err(const std::function<kad::ad::Var<double>()>& make_loss,
                               std::vector<kad::ad::Var<double>> leaves,
                               double step = 1e-6) {
  kad::ad::Var<double> loss = make_loss();
  kad::ad::GradStore<double> gs = kad::ad::backward(loss);
  double worst = 0.0;
  for (auto& leaf : leaves) {
    const kad::Tensor<double>* analytic = gs.find(leaf.node());
    for (std::int64_t i = 0; i < leaf.value().numel(); ++i) {
      double& x = leaf.mutable_value()[i];
      const double saved = x;
      x = saved + step;
      const double fp = make_loss().item();
      x = saved - step;
      const double fm = make_loss().item();
      x = saved;
      const double fd = (fp - fm) / (2.0 * step);
      const double an = analytic ? (*analytic)[i] : 0.0;
      worst = std::max(worst, rel_err(an, fd));
    }
  }
  return worst;
}

}  // namespace kad::test
