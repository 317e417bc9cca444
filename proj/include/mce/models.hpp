#pragma once

#include <memory>
#include <string>

#include "mce/graph.hpp"

namespace mce {

// A parameterized feature extractor producing pre-softmax logits [B, C],
// recorded on a Graph for reverse-mode gradients.
class Model {
 public:
  virtual ~Model() = default;
  virtual Graph::NodeId forward(Graph& g, const Tensor& x, bool train_mode, Rng& dropout_rng) = 0;
  virtual std::string arch() const = 0;
  virtual int num_classes() const = 0;

  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  int64_t param_count() const { return store_.param_count(); }

 protected:
  ParamStore store_;
};

enum class Arch {
  ConvNet,  // conv 8@7x7 valid -> ReLU -> flatten -> dense 128 -> ReLU -> dropout -> dense C
  MlpNet,   // flatten -> dense 128 -> ReLU -> dropout -> dense C
};

// Inputs are [B, 3, 28, 28] images. Weights are drawn uniform in
// +-sqrt(6/(fan_in+fan_out)); biases start at zero.
std::unique_ptr<Model> make_model(Arch arch, int num_classes, double dropout_rate, Rng& init_rng);

Tensor glorot_uniform(std::vector<int> shape, int fan_in, int fan_out, Rng& rng);

}  // namespace mce
