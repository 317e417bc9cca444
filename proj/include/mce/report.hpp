#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace mce {

// One (method, bias, trial) outcome. Accuracies are stored in [0, 1];
// a diverged trial carries no accuracies.
struct TrialResult {
  std::string method;
  std::string bias;
  uint64_t seed = 0;
  int trial_index = 0;
  bool diverged = false;
  std::optional<double> ood_acc;
  std::optional<double> id_acc;
  std::optional<double> ood_acc_pruned;
  double wall_time_s = 0.0;
  int epochs = 0;
  uint64_t config_hash = 0;
  std::map<std::string, double> extra;
};

std::string trial_to_json(const TrialResult& r);
TrialResult trial_from_json(const std::string& text);

// Fixed column order: method,bias,seed,ood_acc,id_acc,ood_acc_pruned,diverged,wall_time.
// The wall_time column is written as 0.000 so report bytes depend only on
// (config, seed); measured times live in the per-trial JSON files.
std::string render_csv(const std::vector<TrialResult>& results);
std::string render_json(const std::vector<TrialResult>& results);
// Paper-style method x bias grid of mean +- std accuracies (in percent).
std::string render_markdown(const std::vector<TrialResult>& results);

struct AggregateCell {
  int n = 0;         // surviving trials
  int diverged = 0;  // excluded trials
  double ood_mean = 0, ood_std = 0;
  double id_mean = 0, id_std = 0;
  std::optional<double> pruned_mean;
};

// Derived view over stored per-trial records, keyed (method, bias).
struct AggregateReport {
  std::vector<std::tuple<std::string, std::string, AggregateCell>> cells;
  const AggregateCell* find(const std::string& method, const std::string& bias) const;
};

AggregateReport aggregate(const std::vector<TrialResult>& results);

// Temp file + rename so readers never observe a partial report.
void write_text_atomic(const std::string& path, const std::string& content);
std::string read_text(const std::string& path);

}  // namespace mce
