#pragma once

// Shared helpers for unit and acceptance tests: finite-difference gradient
// oracle and small random-net builders. Test-only; the oracle never calls
// the reverse pass it checks.

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "trinet/graph.hpp"
#include "trinet/rng.hpp"

namespace tritest {

using trinet::Graph;
using trinet::GradMap;
using trinet::Shape;
using trinet::Tensor;
using trinet::TensorMap;

// Central finite difference of a scalar graph output with respect to one
// parameter entry.
inline double fd_partial(const Graph& g, TensorMap bindings, int loss,
                         const std::string& pname, std::size_t idx, double h = 1e-4) {
  const double orig = bindings[pname].v[idx];
  bindings[pname].v[idx] = orig + h;
  const double up = trinet::forward_eval(g, bindings).value(loss).item();
  bindings[pname].v[idx] = orig - h;
  const double dn = trinet::forward_eval(g, bindings).value(loss).item();
  bindings[pname].v[idx] = orig;
  return (up - dn) / (2.0 * h);
}

struct FdReport {
  double max_rel_err = 0.0;
  std::string worst;
  std::size_t checked = 0;
};

// Compares reverse-mode gradients of `loss` against central differences for
// every requires_grad leaf in `param_names`. rel = |a-b| / max(1,|a|,|b|).
inline FdReport fd_check(const Graph& g, const TensorMap& bindings, int loss,
                         const std::vector<std::string>& param_names, double h = 1e-4) {
  auto ev = trinet::forward_eval(g, bindings);
  GradMap grads = trinet::backward(g, ev, loss);
  FdReport rep;
  for (const auto& pname : param_names) {
    const Tensor& p = bindings.at(pname);
    const Tensor& ad = grads.at(pname);
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double fd = fd_partial(g, bindings, loss, pname, i, h);
      const double a = ad.v[i];
      const double rel = std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      ++rep.checked;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = pname + "[" + std::to_string(i) + "]";
      }
    }
  }
  return rep;
}

// True when no relu/leaky-relu/step preactivation sits within `margin` of its
// kink, so central differences stay on one linear piece.
inline bool kink_safe(const Graph& g, const trinet::Evaluation& ev, double margin = 1e-3) {
  for (int id = 0; id < g.size(); ++id) {
    const auto& n = g.node(id);
    if (n.op == trinet::Op::Relu || n.op == trinet::Op::LeakyRelu ||
        n.op == trinet::Op::StepMix) {
      for (double x : ev.value(n.in[0]).v)
        if (std::abs(x) < margin) return false;
    }
  }
  return true;
}

inline Tensor random_tensor(Shape s, trinet::Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(s));
  for (auto& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

}  // namespace tritest
