#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "mce/graph.hpp"
#include "mce/inner_solver.hpp"
#include "mce/models.hpp"

namespace mce {

// Empirical label distribution of the training set, factored explicitly into
// every prediction in log space.
struct ClassPrior {
  Eigen::VectorXd probs;
  Eigen::VectorXd log_probs;
  int num_classes() const { return static_cast<int>(probs.size()); }
  std::vector<double> log_row() const {
    return std::vector<double>(log_probs.data(), log_probs.data() + log_probs.size());
  }
};

// probs[c] = count(c)/N. A class absent from `labels` is an error (its log
// prior would be -inf); callers should smooth or drop the class upstream.
ClassPrior compute_prior(const std::vector<int>& labels, int num_classes);

struct PredictionBundle {
  Eigen::VectorXd y_e, y_l, y_h;  // ensemble / lower-only / higher-only, each on the simplex
};

// Joint state of the two-model ensemble.
struct MceModel {
  std::unique_ptr<Model> higher;
  std::unique_ptr<Model> lower;  // absent for single-model baselines
  ClassPrior prior;
  double w = 0.2;
  double alpha = 0.002;
  // Lower capacity must be strictly below higher capacity; violations are
  // flagged (the same-capacity sanity check trips this deliberately).
  bool capacity_warning = false;
  std::optional<ResidualAffineParams> frozen_theta_h;
  std::optional<ResidualAffineParams> frozen_theta_l;

  int num_classes() const { return higher->num_classes(); }
  bool frozen() const { return frozen_theta_h.has_value(); }
};

// Emits ceil(N/B) batches per epoch; each class's shuffled pool is dealt
// contiguously across the batches so every example appears exactly once and
// every class lands in every batch (when counts allow).
class StratifiedBatcher {
 public:
  StratifiedBatcher(const std::vector<int>& labels, int num_classes, int batch_size);
  std::vector<std::vector<int>> epoch_batches(Rng& rng) const;
  int batches_per_epoch() const { return batches_per_epoch_; }

 private:
  std::vector<std::vector<int>> class_pools_;
  int batch_size_;
  int batches_per_epoch_;
};

Eigen::VectorXd softmax(const Eigen::VectorXd& scores);

// y_e = softmax(o_h + o_l + log p_y); y_l, y_h analogously with one expert.
PredictionBundle predict(const Eigen::VectorXd& o_h, const Eigen::VectorXd& o_l,
                         const ClassPrior& prior);

// Records the per-batch inner argmin fit as one tape node: forward solves the
// regularized classifier problem on the current features (warm-started) and
// outputs the classifier's log-space scores; backward routes gradients to the
// features through both the direct path and, when `backprop_implicit` is set,
// the implicit dependence of the argmin parameters on the features.
Graph::NodeId argmin_classifier_node(Graph& g, Graph::NodeId z, const std::vector<int>& labels,
                                     const ClassPrior& prior, double alpha, bool backprop_implicit,
                                     ResidualAffineParams* warm_io, InnerSolution* sol_out);

struct MceLoss {
  Graph::NodeId loss;           // scalar: L(y_e, y) + w * L(y_l, y)
  Graph::NodeId ensemble_ce;
  Graph::NodeId lower_ce;
  Graph::NodeId logits_h, logits_l;  // feature-extractor outputs z
  InnerSolution sol_h, sol_l;
};

// Algorithm of the per-batch training loss: fit both inner classifiers, form
// ensemble and lower predictions, and combine their cross-entropies.
MceLoss build_mce_loss(Graph& g, MceModel& model, const Tensor& x, const std::vector<int>& labels,
                       bool train_mode, Rng& dropout_rng_h, Rng& dropout_rng_l,
                       bool backprop_argmin, ResidualAffineParams* warm_h,
                       ResidualAffineParams* warm_l);

// Eval-mode logits (dropout disabled), computed in chunks to bound memory.
Eigen::MatrixXd eval_logits(Model& model, const Tensor& x, int chunk = 1000);

// Solves the inner problems once on a labelled training sample (dropout
// disabled) and stores the resulting classifier parameters so later
// predictions need no labels.
void freeze_eval_classifiers(MceModel& model, const Tensor& sample_x,
                             const std::vector<int>& sample_labels);

// argmax of y_h with ties broken toward the lower class index. Requires
// frozen classifiers.
std::vector<int> test_predictions(MceModel& model, const Tensor& x);

int argmax_tie_low(const Eigen::VectorXd& v);

// Masks classes the lower model scores below t, then takes the higher-model
// argmax over the survivors; if everything is masked, ignores the mask.
int prune_candidates(const Eigen::VectorXd& lower_probs, const Eigen::VectorXd& higher_logits,
                     double threshold);

const std::vector<double>& prune_threshold_grid();

// Largest grid threshold whose gold-label prune rate on the calibration set
// stays within max_prune_rate.
double calibrate_threshold(const Eigen::MatrixXd& lower_probs, const std::vector<int>& gold,
                           double max_prune_rate);

// Discrete joint distribution over (x_h, x_l, y), flattened so that
// P(a, b, c) = table[(a*nl + b)*ny + c].
// Computes P(y|x_h,x_l) exactly and via the log-space ensemble factorization
// normalize(P(y|x_h)/P(y) * P(y|x_l)/P(y) * P(y)); returns the maximum
// absolute deviation over all cells with positive evidence mass.
double verify_ci_factorization(const std::vector<double>& table, int nh, int nl, int ny);

}  // namespace mce
