#pragma once

#include <cstdint>
#include <vector>

namespace mce {

int64_t shape_numel(const std::vector<int>& shape);

// Dense row-major tensor of 64-bit floats.
struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape_in);  // zero-filled
  Tensor(std::vector<int> shape_in, std::vector<double> data_in);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  double& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  double operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  // 2-D accessors (row-major).
  double& at(int r, int c) { return data[static_cast<size_t>(r) * shape[1] + c]; }
  double at(int r, int c) const { return data[static_cast<size_t>(r) * shape[1] + c]; }

  bool same_shape(const Tensor& other) const { return shape == other.shape; }
  bool all_finite() const;
  void fill(double v);
};

}  // namespace mce
