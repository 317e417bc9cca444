#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace mce {

// Seeded random source. Sampling helpers are written out here instead of
// using <random> distribution objects, whose output is implementation
// defined; this keeps runs bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Uniform integer in [0, n), unbiased (rejection sampling).
  uint64_t below(uint64_t n);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
};

// Derives an independent stream seed from a base seed and a component label,
// so adding or removing one consumer never perturbs another's stream.
uint64_t derive_seed(uint64_t base, std::string_view stream);
uint64_t derive_seed(uint64_t base, std::string_view stream, uint64_t index);

}  // namespace mce
