#pragma once

#include <map>
#include <string>
#include <vector>

#include "pointlap/errors.hpp"
#include "pointlap/tensor.hpp"

namespace pointlap {

// Registry of named tensors backing a model. Learnable entries are what the
// optimizer updates; non-learnable entries (running statistics, kernel
// geometry) still serialize so checkpoints restore the full model state.
// Names are dotted paths, e.g. "encoder.stage2.block0.reduce.weight".
class ParamStore {
 public:
  struct Entry {
    Tensor tensor;
    bool learnable = true;
  };

  Tensor add(const std::string& name, Tensor t, bool learnable = true) {
    if (entries_.count(name)) {
      throw ConfigError("parameter registered twice: " + name);
    }
    entries_[name] = Entry{t, learnable};
    return t;
  }

  bool contains(const std::string& name) const { return entries_.count(name) > 0; }

  Tensor get(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
    return it->second.tensor;
  }

  // Sorted by name, so iteration order is stable across runs.
  const std::map<std::string, Entry>& entries() const { return entries_; }

  std::size_t learnable_scalar_count() const {
    std::size_t n = 0;
    for (const auto& [name, e] : entries_) {
      if (e.learnable) n += e.tensor.numel();
    }
    return n;
  }

  void zero_grad() {
    for (auto& [name, e] : entries_) e.tensor.zero_grad();
  }

  // Copies values from `src` into same-named entries. Every entry must be
  // present in `src` with a matching shape.
  void load_values(const std::map<std::string, Tensor>& src) {
    for (auto& [name, e] : entries_) {
      auto it = src.find(name);
      if (it == src.end()) throw ConfigError("checkpoint missing parameter: " + name);
      if (it->second.shape() != e.tensor.shape()) {
        throw ShapeError("checkpoint shape mismatch for " + name + ": expected " +
                         format_shape(e.tensor.shape()) + ", got " +
                         format_shape(it->second.shape()));
      }
      auto dst = e.tensor.mutable_values();
      auto srcv = it->second.values();
      std::copy(srcv.begin(), srcv.end(), dst.begin());
    }
  }

 private:
  std::map<std::string, Entry> entries_;
};

}  // namespace pointlap
