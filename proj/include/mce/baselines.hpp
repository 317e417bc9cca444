#pragma once

#include <functional>
#include <optional>
#include <string>
#include <utility>

#include "mce/datasets.hpp"
#include "mce/ensemble.hpp"

namespace mce {

enum class Method { None, Mce, NoCi, NoBp, WithAdversary, PretrainedBias, SameCapacity };

std::string method_name(Method m);
Method parse_method(const std::string& name);

struct TrainRecipe {
  double lr = 0.01;
  double momentum = 0.9;
  int batch_size = 1000;
  double dropout = 0.5;
  int max_epochs = 200;
  // Stop when the epoch training loss has not improved by more than
  // early_stop_delta for early_stop_patience consecutive epochs.
  double early_stop_delta = 1e-4;
  int early_stop_patience = 10;
};

struct MethodConfig {
  Method method = Method::Mce;
  double w = 0.2;
  double alpha = 0.002;
  std::optional<double> adversary_weight;  // required iff method == WithAdversary
};

// Tuned (w, adversary_weight) per bias for the adversarial baseline, which
// has no universally effective setting.
std::pair<double, double> adversary_defaults(BiasKind kind);

// Logistic map from a one-hot modification index to class log-scores,
// trained to convergence on (applied_mod, label) pairs.
struct BiasOnlyModel {
  ResidualAffineParams params;  // plain affine: o = one_hot(mod) W + b
  Eigen::MatrixXd logits_for(const std::vector<int>& mods) const;
  double accuracy(const std::vector<int>& mods, const std::vector<int>& labels,
                  const ClassPrior& prior) const;
};

BiasOnlyModel train_bias_only(const std::vector<int>& applied_mods, const std::vector<int>& labels,
                              const ClassPrior& prior);

struct InnerSolveStats {
  long solves = 0;
  double max_grad_norm = 0.0;
  bool all_converged = true;
  int max_newton_iterations = 0;
};

struct TrainHooks {
  // Called after each training batch of an argmin method.
  std::function<void(const InnerSolution& sol_h, const InnerSolution& sol_l)> on_batch_solved;
  int epoch_cap = 0;  // >0 overrides recipe.max_epochs (tests)
};

struct TrainOutcome {
  MceModel model;
  std::optional<BiasOnlyModel> bias_only;
  bool diverged = false;
  std::string failure_reason;
  int epochs = 0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;  // task loss (adversary terms excluded)
  InnerSolveStats inner_stats;
};

// Trains one method on one bundle with the shared recipe. All methods with
// the same architecture draw identical parameter initializations and batch
// orders for a given trial seed, so accuracy differences are attributable to
// the method alone. A non-finite loss aborts the trial and reports it.
TrainOutcome train_method(const MethodConfig& cfg, const DatasetBundle& bundle,
                          const TrainRecipe& recipe, uint64_t trial_seed,
                          const TrainHooks* hooks = nullptr);

struct EvalResult {
  double ood_acc = 0.0;
  double id_acc = 0.0;
  std::optional<double> ood_acc_pruned;  // methods with a lower model
  std::optional<double> prune_threshold;
  std::optional<double> id_gold_prune_rate;  // realized rate at the calibrated threshold
  std::optional<double> lower_ood_acc, lower_id_acc;
};

// Frozen-classifier evaluation on the bundle's OOD and ID test sets. When a
// lower model exists, also calibrates the pruning threshold on the ID test
// set and reports pruned OOD accuracy.
EvalResult evaluate_trial(MceModel& model, const DatasetBundle& bundle, double max_prune_rate);

struct SameCapacityReport {
  EvalResult eval;
  bool capacity_warning = false;
  bool lower_reaches_higher_id = false;  // the failure signature
  bool diverged = false;
};

// MCE with the lower model architecturally identical to the higher one.
SameCapacityReport run_same_capacity_check(const DatasetBundle& bundle, const TrainRecipe& recipe,
                                           const MethodConfig& cfg, uint64_t trial_seed);

}  // namespace mce
