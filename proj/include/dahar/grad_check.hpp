#pragma once

#include <functional>
#include <vector>

#include "dahar/tensor.hpp"

namespace dahar {

// Central-difference gradient verification. `f` must be a deterministic
// scalar-valued closure over `inputs`; it is re-evaluated after in-place
// coordinate perturbations. Runs in whatever precision the tensors carry;
// use double for meaningful thresholds.
inline double grad_check(const std::function<Tensor<double>()>& f,
                         std::vector<Tensor<double>> inputs, double eps = 1e-5) {
  for (auto& t : inputs) {
    t.set_requires_grad(true);
    t.zero_grad();
  }

  Tensor<double> probe = f();
  if (probe.numel() != 1) throw ContractError("grad_check: f must be scalar-valued");
  Tensor<double> probe2 = f();
  if (probe.at(0) != probe2.at(0))
    throw ContractError("grad_check: f is not deterministic (two evaluations differ)");

  Graph<double> g;
  Tensor<double> loss;
  {
    auto rec = g.record();
    loss = f();
  }
  g.backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  double max_err = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    for (int64_t i = 0; i < inputs[ti].numel(); ++i) {
      const double orig = inputs[ti].at(i);
      inputs[ti].at(i) = orig + eps;
      const double fp = f().at(0);
      inputs[ti].at(i) = orig - eps;
      const double fm = f().at(0);
      inputs[ti].at(i) = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[ti][static_cast<size_t>(i)];
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      max_err = std::max(max_err, std::abs(a - numeric) / denom);
    }
  }
  return max_err;
}

}  // namespace dahar
