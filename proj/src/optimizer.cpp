#include "trinet/optimizer.hpp"

#include <cmath>

namespace trinet {

GradMap apply_gate(const GradMap& grads, const std::map<std::string, Tensor>& gates) {
  GradMap out = grads;
  for (auto& [name, g] : out) {
    auto it = gates.find(name);
    if (it == gates.end()) continue;
    const Tensor& gate = it->second;
    TRI_CHECK(gate.shape == g.shape, "apply_gate: gate shape ", shape_str(gate.shape),
              " does not match gradient shape ", shape_str(g.shape), " for '", name, "'");
    for (std::size_t i = 0; i < g.size(); ++i) g.v[i] = gate.v[i] * g.v[i];
  }
  return out;
}

void optimizer_step(ParameterStore& params, const GradMap& grads, OptimizerState& state) {
  if (state.kind == OptKind::adam) ++state.step;
  for (const auto& [name, g] : grads) {
    TRI_CHECK(params.has(name), "optimizer_step: gradient for unknown parameter '", name, "'");
    if (!g.all_finite())
      detail::fail("optimizer_step: non-finite gradient for parameter '", name, "'");
    Tensor& p = params.at(name);
    TRI_CHECK(p.shape == g.shape, "optimizer_step: gradient shape ", shape_str(g.shape),
              " does not match parameter '", name, "' shape ", shape_str(p.shape));
    if (state.kind == OptKind::sgd) {
      for (std::size_t i = 0; i < p.size(); ++i) p.v[i] -= state.lr * g.v[i];
      continue;
    }
    Tensor& m = state.m.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    Tensor& v = state.v.try_emplace(name, Tensor::zeros(p.shape)).first->second;
    TRI_CHECK(m.shape == p.shape && v.shape == p.shape,
              "optimizer_step: stale moment buffers for '", name, "'");
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < p.size(); ++i) {
      m.v[i] = state.beta1 * m.v[i] + (1.0 - state.beta1) * g.v[i];
      v.v[i] = state.beta2 * v.v[i] + (1.0 - state.beta2) * g.v[i] * g.v[i];
      const double mhat = m.v[i] / bc1;
      const double vhat = v.v[i] / bc2;
      p.v[i] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace trinet
