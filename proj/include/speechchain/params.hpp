#pragma once

#include <deque>
#include <stdexcept>
#include <string>
#include <unordered_map>

#include "speechchain/rng.hpp"
#include "speechchain/tensor.hpp"

namespace speechchain {

// A named trainable tensor plus its gradient accumulator.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Ordered collection of parameters with stable addresses. Order is the
// declaration order, which fixes iteration order everywhere (optimizer,
// checkpoints), so runs are reproducible.
class ParamSet {
 public:
  // All parameters are drawn uniform from [-init_range, init_range].
  static constexpr double kInitRange = 0.08;

  Parameter& add(const std::string& name, Shape shape, Rng& rng) {
    Parameter& p = emplace(name, std::move(shape));
    for (double& v : p.value.data) v = rng.uniform(-kInitRange, kInitRange);
    return p;
  }

  Parameter& add_zeros(const std::string& name, Shape shape) {
    return emplace(name, std::move(shape));
  }

  Parameter& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }

  const Parameter& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw std::out_of_range("no parameter named " + name);
    return params_[it->second];
  }

  bool contains(const std::string& name) const {
    return index_.count(name) > 0;
  }

  std::size_t size() const { return params_.size(); }

  void zero_grad() {
    for (Parameter& p : params_) p.grad.fill(0.0);
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

 private:
  Parameter& emplace(const std::string& name, Shape shape) {
    if (index_.count(name))
      throw std::invalid_argument("duplicate parameter name " + name);
    Parameter p;
    p.name = name;
    p.value = Tensor(shape);
    p.value.requires_grad = true;
    p.grad = Tensor(std::move(shape));
    params_.push_back(std::move(p));
    index_[name] = params_.size() - 1;
    return params_.back();
  }

  std::deque<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

inline bool bit_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  auto ia = a.begin();
  auto ib = b.begin();
  for (; ia != a.end(); ++ia, ++ib) {
    if (ia->name != ib->name || !bit_equal(ia->value, ib->value)) return false;
  }
  return true;
}

}  // namespace speechchain
