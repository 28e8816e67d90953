#pragma once

#include <map>
#include <string>
#include <vector>

#include "trinet/tensor.hpp"

namespace trinet {

// Named parameter tensors for the four network groups. Names are
// dot-prefixed ("G.", "D.", "Dp.", "C."); group views select by prefix.
class ParameterStore {
 public:
  void set(const std::string& name, Tensor t) {
    t.requires_grad = true;
    params_[name] = std::move(t);
  }
  bool has(const std::string& name) const { return params_.count(name) != 0; }
  Tensor& at(const std::string& name) {
    auto it = params_.find(name);
    TRI_CHECK(it != params_.end(), "unknown parameter '", name, "'");
    return it->second;
  }
  const Tensor& at(const std::string& name) const {
    auto it = params_.find(name);
    TRI_CHECK(it != params_.end(), "unknown parameter '", name, "'");
    return it->second;
  }
  void erase(const std::string& name) { params_.erase(name); }

  std::vector<std::string> names(const std::string& prefix = "") const {
    std::vector<std::string> out;
    for (const auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) out.push_back(k);
    return out;
  }

  std::map<std::string, Tensor>& all() { return params_; }
  const std::map<std::string, Tensor>& all() const { return params_; }

  // Deep copy of a prefix slice.
  std::map<std::string, Tensor> slice(const std::string& prefix) const {
    std::map<std::string, Tensor> out;
    for (const auto& [k, v] : params_)
      if (k.rfind(prefix, 0) == 0) out[k] = v;
    return out;
  }

 private:
  std::map<std::string, Tensor> params_;
};

}  // namespace trinet
