#pragma once

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <utility>

#include "miles/autodiff.hpp"
#include "miles/errors.hpp"
#include "miles/tensor.hpp"

namespace miles {

/// Named parameter set of one encoder. Names are stable and ordered, which is
/// what EMA blending and checkpointing key on.
template <typename T>
class ParamStore {
 public:
  using Map = std::map<std::string, Parameter<T>>;

  Parameter<T>& add(const std::string& name, Tensor<T> value) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw ContractError("duplicate parameter name '" + name + "'");
    it->second.value = std::move(value);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  Var<T> var(Tape<T>& tape, const std::string& name) { return tape.leaf(at(name)); }

  void zero_grad() {
    for (auto& [_, p] : params_) p.zero_grad();
  }

  std::size_t size() const noexcept { return params_.size(); }
  std::size_t numel() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  /// Value-only copy (gradients dropped).
  ParamStore clone_values() const {
    ParamStore out;
    for (const auto& [name, p] : params_) out.add(name, p.value);
    return out;
  }

  template <typename U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (const auto& [name, p] : params_) out.add(name, p.value.template cast<U>());
    return out;
  }

  /// True when both stores hold the same names with the same shapes.
  bool same_layout(const ParamStore& other) const {
    if (params_.size() != other.params_.size()) return false;
    auto it = other.params_.begin();
    for (const auto& [name, p] : params_) {
      if (it->first != name || it->second.value.shape() != p.value.shape()) return false;
      ++it;
    }
    return true;
  }

  bool values_equal(const ParamStore& other) const {
    if (!same_layout(other)) return false;
    auto it = other.params_.begin();
    for (const auto& [name, p] : params_) {
      if (!(it->second.value == p.value)) return false;
      ++it;
    }
    return true;
  }

 private:
  Map params_;
};

template <typename T, typename Rng>
Tensor<T> truncated_normal(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor<T> out(std::move(shape));
  for (auto& v : out.data()) {
    double z = dist(rng);
    while (std::abs(z) > 2.0) z = dist(rng);
    v = static_cast<T>(z * stddev);
  }
  return out;
}

}  // namespace miles
