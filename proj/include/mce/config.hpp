#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mce/baselines.hpp"
#include "mce/datasets.hpp"

namespace mce {

// Full experiment description. Serializes to a flat `key = value` text file;
// every key can also be set from the command line.
struct ExperimentConfig {
  std::string data_dir;  // defaults to $MCE_DATA_DIR or data/mnist
  std::string out_dir = "runs/experiment";
  std::vector<BiasKind> biases = {BiasKind::Background, BiasKind::Patch, BiasKind::Split};
  std::vector<Method> methods = {Method::Mce,  Method::NoCi, Method::NoBp,
                                 Method::WithAdversary, Method::None, Method::PretrainedBias};
  int trials = 20;
  uint64_t seed = 1;
  int workers = 0;  // 0 = hardware concurrency
  bool resume = false;
  BundleSizes sizes;
  TrainRecipe recipe;
  double w = 0.2;
  double alpha = 0.002;
  // The adversarial baseline defaults to its per-bias tuned (w, weight) pair;
  // either can be pinned here instead.
  std::optional<double> adversary_w;
  std::optional<double> adversary_weight;
  double max_prune_rate = 0.001;
};

std::string default_data_dir();

std::string serialize_config(const ExperimentConfig& cfg);
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);
void save_config_file(const ExperimentConfig& cfg, const std::string& path);

// Applies one `key = value` assignment; unknown keys are configuration errors.
void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value);

// Effective per-trial method hyperparameters (adversary picks up its tuned
// per-bias defaults unless overridden).
MethodConfig method_config_for(const ExperimentConfig& cfg, BiasKind bias, Method method);

// Hash over every semantic field that determines one trial's result (recipe,
// sizes, hyperparameters, bias, method). Used to validate resumed trials.
uint64_t trial_config_hash(const ExperimentConfig& cfg, BiasKind bias, Method method);

}  // namespace mce
