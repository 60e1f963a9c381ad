#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "lmvcat/autodiff.hpp"
#include "lmvcat/error.hpp"
#include "lmvcat/tensor.hpp"

namespace lmvcat {

/// Ordered, named collection of parameter tensors. Order is creation order
/// and is the order used by checkpoints and the optimizer.
template <class T>
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    require(!find(name).has_value(), ErrorKind::InvalidArgument, "duplicate parameter name " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  Tensor<T>& value(std::size_t i) { return values_[i]; }
  const Tensor<T>& value(std::size_t i) const { return values_[i]; }
  std::vector<Tensor<T>>& values() noexcept { return values_; }
  const std::vector<Tensor<T>>& values() const noexcept { return values_; }
  const std::vector<std::string>& names() const noexcept { return names_; }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i)
      if (names_[i] == name) return i;
    return std::nullopt;
  }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& v : values_) total += v.size();
    return total;
  }

  /// Registers every parameter as a differentiable leaf on `tape`.
  std::vector<ad::Var<T>> bind(ad::Tape<T>& tape) const {
    std::vector<ad::Var<T>> vars;
    vars.reserve(values_.size());
    for (const auto& v : values_) vars.push_back(tape.leaf(v, true));
    return vars;
  }

  bool all_finite() const {
    for (const auto& v : values_)
      for (T x : v.data())
        if (!std::isfinite(x)) return false;
    return true;
  }

  template <class U>
  ParamStore<U> cast() const {
    ParamStore<U> out;
    for (std::size_t i = 0; i < values_.size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
};

}  // namespace lmvcat
