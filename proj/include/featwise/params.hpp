#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "featwise/errors.hpp"
#include "featwise/tensor.hpp"

namespace featwise {

// Named parameter tensors, iterated in lexicographic name order.
class ParamStore {
 public:
  using Map = std::map<std::string, Tensor>;

  void add(const std::string& name, Tensor value) {
    if (!entries_.emplace(name, std::move(value)).second) {
      throw ContractError("ParamStore: duplicate parameter name '" + name + "'");
    }
  }

  void set(const std::string& name, Tensor value) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LookupError("ParamStore: unknown parameter '" + name + "'");
    if (it->second.shape() != value.shape()) {
      throw DimensionError("ParamStore: shape change for '" + name + "' from " + shape_str(it->second.shape()) +
                           " to " + shape_str(value.shape()));
    }
    it->second = std::move(value);
  }

  const Tensor& get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw LookupError("ParamStore: unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  void erase(const std::string& name) { entries_.erase(name); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, t] : entries_) out.push_back(name);
    return out;
  }

  // Names that begin with `prefix`, in order.
  std::vector<std::string> names_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (auto it = entries_.lower_bound(prefix); it != entries_.end() && it->first.starts_with(prefix); ++it) {
      out.push_back(it->first);
    }
    return out;
  }

  // Copy with every tensor detached from its graph.
  ParamStore detached() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) out.entries_.emplace(name, t.detach());
    return out;
  }

  // Bit-identical names, shapes and values.
  bool identical(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    auto a = entries_.begin();
    auto b = other.entries_.begin();
    for (; a != entries_.end(); ++a, ++b) {
      if (a->first != b->first || !a->second.identical(b->second)) return false;
    }
    return true;
  }

  Map::const_iterator begin() const { return entries_.begin(); }
  Map::const_iterator end() const { return entries_.end(); }

 private:
  Map entries_;
};

// Registers every tensor of `params` as a leaf of `graph`.
inline ParamStore attach_all(const ParamStore& params, Graph& graph) {
  ParamStore out;
  for (const auto& [name, t] : params) out.add(name, graph.leaf(t.detach()));
  return out;
}

// Central-difference gradient of `f` at `params`, one entry at a time:
// (f(p + eps e_i) - f(p - eps e_i)) / (2 eps). `f` must be deterministic.
inline ParamStore finite_difference_grad(const std::function<double(const ParamStore&)>& f, const ParamStore& params,
                                         double eps) {
  if (!(eps > 0.0)) throw ContractError("finite_difference_grad: eps must be positive");
  auto eval = [&](const ParamStore& p) {
    const double v = f(p);
    if (!std::isfinite(v)) throw NumericError("finite_difference_grad: function returned a non-finite value");
    return v;
  };
  ParamStore grads;
  ParamStore probe = params.detached();
  for (const auto& [name, base] : params) {
    const Tensor original = base.detach();
    std::vector<double> g(original.numel());
    for (std::size_t i = 0; i < original.numel(); ++i) {
      std::vector<double> plus(original.values().begin(), original.values().end());
      std::vector<double> minus = plus;
      plus[i] += eps;
      minus[i] -= eps;
      probe.set(name, Tensor(original.shape(), std::move(plus)));
      const double fp = eval(probe);
      probe.set(name, Tensor(original.shape(), std::move(minus)));
      const double fm = eval(probe);
      g[i] = (fp - fm) / (2.0 * eps);
    }
    probe.set(name, original);
    grads.add(name, Tensor(original.shape(), std::move(g)));
  }
  return grads;
}

}  // namespace featwise
