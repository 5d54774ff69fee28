#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <string>

#include "nmrwm/autodiff/tensor.hpp"

namespace nmrwm::ad {

template <typename Scalar>
struct Parameter {
  std::string name;
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  Tensor<Scalar> adam_m;
  Tensor<Scalar> adam_v;
  bool trainable = true;  // false for running statistics
};

/// Named parameters in registration order, with optimizer state.
template <typename Scalar>
class ParamStore {
 public:
  using ParameterT = Parameter<Scalar>;

  ParameterT& add(std::string name, Tensor<Scalar> value, bool trainable = true) {
    if (index_.contains(name)) throw UsageError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    ParameterT p;
    p.name = std::move(name);
    p.grad = Tensor<Scalar>(value.shape());
    p.adam_m = Tensor<Scalar>(value.shape());
    p.adam_v = Tensor<Scalar>(value.shape());
    p.value = std::move(value);
    p.trainable = trainable;
    return entries_.emplace_back(std::move(p));
  }

  bool contains(const std::string& name) const { return index_.contains(name); }

  ParameterT& at(const std::string& name) { return entries_[lookup(name)]; }
  const ParameterT& at(const std::string& name) const { return entries_[lookup(name)]; }

  /// Overwrites a value; the shape must not change.
  void assign(const std::string& name, const Tensor<Scalar>& value) {
    ParameterT& p = at(name);
    if (p.value.shape() != value.shape())
      throw UsageError("parameter " + name + " has shape " + shape_string(p.value.shape()) + ", got " +
                       shape_string(value.shape()));
    p.value = value;
  }

  void zero_grad() {
    for (auto& p : entries_) p.grad.array().setZero();
  }

  std::size_t size() const { return entries_.size(); }
  Index scalar_count(bool trainable_only = true) const {
    Index n = 0;
    for (const auto& p : entries_)
      if (p.trainable || !trainable_only) n += p.value.size();
    return n;
  }

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::int64_t adam_steps = 0;

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw UsageError("unknown parameter: " + name);
    return it->second;
  }

  std::deque<ParameterT> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace nmrwm::ad
