#include "mce/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "mce/errors.hpp"

namespace mce {

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ConfigError("tensor dimension must be non-negative");
    n *= d;
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape_in)
    : shape(std::move(shape_in)), data(static_cast<size_t>(shape_numel(shape)), 0.0) {}

Tensor::Tensor(std::vector<int> shape_in, std::vector<double> data_in)
    : shape(std::move(shape_in)), data(std::move(data_in)) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw ConfigError("tensor data length does not match shape");
  }
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

}  // namespace mce
