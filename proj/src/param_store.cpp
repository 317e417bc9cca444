#include "mce/param_store.hpp"

#include "mce/errors.hpp"

namespace mce {

ParamStore::Entry& ParamStore::add(const std::string& name, Tensor init) {
  if (has(name)) throw ConfigError("duplicate parameter name: " + name);
  Entry e;
  e.grad = Tensor::zeros_like(init);
  e.momentum = Tensor::zeros_like(init);
  e.value = std::move(init);
  return entries_.emplace(name, std::move(e)).first->second;
}

ParamStore::Entry& ParamStore::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

int64_t ParamStore::param_count() const {
  int64_t n = 0;
  for (const auto& [name, e] : entries_) n += e.value.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& [name, e] : entries_) e.grad.fill(0.0);
}

void sgd_momentum_step(ParamStore& store, double lr, double momentum) {
  for (auto& [name, e] : store.entries()) {
    double* v = e.momentum.data.data();
    double* g = e.grad.data.data();
    double* p = e.value.data.data();
    const int64_t n = e.value.numel();
    for (int64_t i = 0; i < n; ++i) {
      v[i] = momentum * v[i] + g[i];
      p[i] -= lr * v[i];
      g[i] = 0.0;
    }
  }
}

}  // namespace mce
