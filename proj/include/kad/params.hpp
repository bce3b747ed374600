#pragma once

// Named trainable parameters. One store per training run; the model and the
// aggregator both register into it, which is also what makes teacher/student
// parameter sharing structural: both paths hold the same Var handles.

#include "kad/autodiff.hpp"
#include "kad/instrument.hpp"
#include "kad/tensor.hpp"

#include <stdexcept>
#include <string>
#include <vector>

namespace kad {

enum class ParamGroup { backbone = 0, transformer = 1 };

template <typename T>
class ParamStore {
public:
  struct Entry {
    std::string name;
    ad::Var<T> var;
    ParamGroup group;
  };

  ad::Var<T> add(const std::string& name, Tensor<T> init, ParamGroup group) {
    if (find(name) != nullptr) {
      throw std::invalid_argument("ParamStore: duplicate parameter " + name);
    }
    entries_.push_back({name, ad::Var<T>::leaf(std::move(init)), group});
    return entries_.back().var;
  }

  const Entry* find(const std::string& name) const {
    for (const auto& e : entries_) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  Entry* find(const std::string& name) {
    for (auto& e : entries_) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<Entry>& entries() { return entries_; }

  std::int64_t total_size() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.var.value().numel();
    return n;
  }

private:
  std::vector<Entry> entries_;
};

}  // namespace kad
