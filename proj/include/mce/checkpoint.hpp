#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mce/datasets.hpp"
#include "mce/ensemble.hpp"
#include "mce/tensor.hpp"

namespace mce {

// Flat little-endian container, version 1:
//   magic "MCEC" | u32 version | u32 metadata length | metadata (JSON object
//   of strings) | u32 array count | per array: u32 name length, name bytes,
//   u32 ndim, u64 dims..., f64 values...
struct Container {
  std::map<std::string, std::string> metadata;
  std::vector<std::pair<std::string, Tensor>> arrays;

  const Tensor* find(const std::string& name) const;
  void add(const std::string& name, Tensor t) { arrays.emplace_back(name, std::move(t)); }
};

void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);

// Model checkpoints: every parameter of both models, the frozen classifier
// parameters, and the class prior, plus metadata (C, w, alpha, seed, config
// hash, architectures).
void save_checkpoint(const std::string& path, const MceModel& model, uint64_t seed,
                     uint64_t config_hash);
MceModel load_checkpoint(const std::string& path);

// Dataset bundle cache in the same container format.
void save_bundle(const std::string& path, const DatasetBundle& bundle);
DatasetBundle load_bundle(const std::string& path);

}  // namespace mce
