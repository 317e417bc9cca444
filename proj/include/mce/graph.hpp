#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mce/param_store.hpp"
#include "mce/rng.hpp"
#include "mce/tensor.hpp"

namespace mce {

// Reverse-mode tape. One Graph records one forward pass; nodes are stored in
// construction order, which is a topological order, so backward() is a single
// reverse sweep that visits each node exactly once. A second backward on the
// same recording is an error.
class Graph {
 public:
  using NodeId = int;

  struct Node {
    Tensor value;
    Tensor grad;  // allocated when backward runs
    std::vector<NodeId> parents;
    std::function<void(Graph&, NodeId)> backward_fn;  // empty for leaves
    ParamStore::Entry* param = nullptr;               // set for parameter leaves
  };

  NodeId input(Tensor value);
  // Parameter leaf: copies the current value in; after backward() the node's
  // gradient is accumulated into the store entry's gradient buffer.
  NodeId param(ParamStore& store, const std::string& name);
  NodeId custom(Tensor value, std::vector<NodeId> parents,
                std::function<void(Graph&, NodeId)> backward_fn);

  // Seeds d(root)/d(root) = 1 (root must be scalar) and sweeps the tape in
  // reverse, then flushes parameter-leaf gradients into their stores.
  void backward(NodeId root);

  const Tensor& value(NodeId id) const { return nodes_[static_cast<size_t>(id)].value; }
  Tensor& grad(NodeId id) { return nodes_[static_cast<size_t>(id)].grad; }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

// --- tensor_core operations ------------------------------------------------
// Each builds one tape node; shapes are validated at recording time.

// x:[B,I] * w:[I,O] + b:[O] -> [B,O]
Graph::NodeId dense(Graph& g, Graph::NodeId x, Graph::NodeId w, Graph::NodeId b);

// Valid (no padding) stride-1 cross-correlation.
// x:[B,Cin,H,W], k:[F,Cin,KH,KW], b:[F] -> [B,F,H-KH+1,W-KW+1]
Graph::NodeId conv2d(Graph& g, Graph::NodeId x, Graph::NodeId k, Graph::NodeId b);

Graph::NodeId relu(Graph& g, Graph::NodeId x);

// Train mode zeroes entries with probability `rate` and scales survivors by
// 1/(1-rate); eval mode is the identity and consumes no randomness.
Graph::NodeId dropout(Graph& g, Graph::NodeId x, double rate, bool train_mode, Rng& rng);

// [B, d1, d2, ...] -> [B, d1*d2*...]
Graph::NodeId flatten(Graph& g, Graph::NodeId x);

Graph::NodeId add(Graph& g, Graph::NodeId a, Graph::NodeId b);

// x:[B,C] + row:[C] broadcast over rows; `row` is a constant (no gradient).
Graph::NodeId add_rowvec(Graph& g, Graph::NodeId x, std::vector<double> row);

Graph::NodeId scale(Graph& g, Graph::NodeId x, double c);

// Identity forward; multiplies the incoming gradient by `s` (s=0 detaches).
Graph::NodeId grad_scale(Graph& g, Graph::NodeId x, double s);

// [B,Ca] ++ [B,Cb] -> [B,Ca+Cb]
Graph::NodeId concat_cols(Graph& g, Graph::NodeId a, Graph::NodeId b);

// Numerically stable row-wise log-softmax over [B,C].
Graph::NodeId log_softmax(Graph& g, Graph::NodeId x);

// Mean over the batch of -log_probs[b, labels[b]]; with weights, the weighted
// mean (weights normalized to sum 1). Returns a scalar node.
Graph::NodeId cross_entropy(Graph& g, Graph::NodeId log_probs, const std::vector<int>& labels,
                            const std::vector<double>* weights = nullptr);

// Mean over all entries of (pred - target)^2. Returns a scalar node.
Graph::NodeId mse(Graph& g, Graph::NodeId pred, Graph::NodeId target);

}  // namespace mce
