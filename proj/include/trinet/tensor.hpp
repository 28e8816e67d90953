#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "trinet/check.hpp"

namespace trinet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense n-d value of doubles. Scalars are rank 0 with a single entry.
struct Tensor {
  Shape shape;
  std::vector<double> v;
  bool requires_grad = false;

  Tensor() : v(1, 0.0) {}
  explicit Tensor(Shape s) : shape(std::move(s)), v(shape_size(shape), 0.0) {}
  Tensor(Shape s, std::vector<double> vals) : shape(std::move(s)), v(std::move(vals)) {
    TRI_CHECK(v.size() == shape_size(shape), "tensor value count ", v.size(),
              " does not match shape ", shape_str(shape));
  }

  static Tensor scalar(double x) {
    Tensor t;
    t.v[0] = x;
    return t;
  }
  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, double x) {
    Tensor t(std::move(s));
    std::fill(t.v.begin(), t.v.end(), x);
    return t;
  }

  std::size_t size() const { return v.size(); }
  std::size_t rank() const { return shape.size(); }
  double& at(std::size_t i) { return v[i]; }
  double at(std::size_t i) const { return v[i]; }
  double item() const {
    TRI_CHECK(v.size() == 1, "item() on non-scalar tensor ", shape_str(shape));
    return v[0];
  }
  // 2-d access
  double& operator()(std::size_t r, std::size_t c) { return v[r * shape[1] + c]; }
  double operator()(std::size_t r, std::size_t c) const { return v[r * shape[1] + c]; }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

inline bool is_scalar_shape(const Shape& s) { return shape_size(s) == 1 && s.size() <= 1; }

}  // namespace trinet
