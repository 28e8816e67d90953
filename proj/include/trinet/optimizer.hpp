#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "trinet/graph.hpp"
#include "trinet/param_store.hpp"

namespace trinet {

enum class OptKind { sgd, adam };

struct OptimizerState {
  OptKind kind = OptKind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::int64_t step = 0;  // adam bias-correction counter
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;

  static OptimizerState sgd_state(double lr) {
    OptimizerState s;
    s.kind = OptKind::sgd;
    s.lr = lr;
    return s;
  }
  static OptimizerState adam_state(double lr, double b1 = 0.9, double b2 = 0.999,
                                   double eps = 1e-8) {
    OptimizerState s;
    s.kind = OptKind::adam;
    s.lr = lr;
    s.beta1 = b1;
    s.beta2 = b2;
    s.eps = eps;
    return s;
  }
};

// out_i = gate_i * grad_i for every entry that has a gate; other entries
// pass through unchanged. Gate shapes must match their gradients.
GradMap apply_gate(const GradMap& grads, const std::map<std::string, Tensor>& gates);

// In-place update of every parameter named in grads. sgd: p -= lr*g;
// adam: standard first/second moment recursion with bias correction.
// Non-finite gradients abort with the parameter name.
void optimizer_step(ParameterStore& params, const GradMap& grads, OptimizerState& state);

}  // namespace trinet
