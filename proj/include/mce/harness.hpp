#pragma once

#include <ostream>
#include <string>

#include "mce/config.hpp"
#include "mce/report.hpp"

namespace mce {

// Locates the training IDX pair under data_dir, inflating .gz copies first
// if only those are present.
MnistData load_mnist_dir(const std::string& data_dir);

// One (bias, method, trial) job; deterministic given the config and trial
// index, independent of any other trial.
TrialResult run_single_trial(const ExperimentConfig& cfg, const MnistData& pool, BiasKind bias,
                             Method method, int trial_index);

// Runs the full grid in a worker pool, persisting one JSON record per trial
// under <out_dir>/trials/ and emitting report.csv / report.json / report.md.
// With resume=true, existing records whose config hash and seed match are
// reused. Diverged trials are recorded and excluded from aggregation.
AggregateReport run_experiment(const ExperimentConfig& cfg, std::ostream& log);

struct SelfcheckOptions {
  bool corrupt_implicit_sign = false;  // mutation hook: flips the implicit gradient term
  bool zero_alpha = false;             // mutation hook: drops the inner L2 regularizer
  std::string data_dir;                // empty = default; missing data falls back
                                       // to the procedural pool
};

// Fast invariant suite: operation gradients, inner-solver certificates, the
// ensemble factorization identity, and the dataset bias leak bound. Prints
// one PASS/FAIL line per check; returns the number of failures.
int selfcheck(const SelfcheckOptions& opts, std::ostream& out);

}  // namespace mce
