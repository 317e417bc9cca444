#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "mce/tensor.hpp"

namespace mce {

// Named parameter tensors with paired gradient accumulators and momentum
// buffers. Iteration order is the (deterministic) lexicographic map order.
class ParamStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;      // same shape as value
    Tensor momentum;  // zero-initialized
  };

  Entry& add(const std::string& name, Tensor init);
  Entry& at(const std::string& name);
  const Entry& at(const std::string& name) const;
  bool has(const std::string& name) const { return entries_.count(name) > 0; }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  int64_t param_count() const;
  void zero_grads();

 private:
  std::map<std::string, Entry> entries_;
};

// v <- momentum*v + grad; value <- value - lr*v; grad <- 0.
void sgd_momentum_step(ParamStore& store, double lr, double momentum);

}  // namespace mce
