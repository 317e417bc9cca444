#include "mce/config.hpp"

#include <charconv>
#include <cstdlib>
#include <sstream>

#include "mce/errors.hpp"
#include "mce/report.hpp"
#include "mce/rng.hpp"

namespace mce {

namespace {

// Shortest representation that parses back to the same double.
std::string fmt_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& s, const std::string& key) {
  try {
    size_t pos = 0;
    const double v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": bad number '" + s + "'");
  }
}

int parse_int(const std::string& s, const std::string& key) {
  try {
    size_t pos = 0;
    const int v = std::stoi(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key " + key + ": bad integer '" + s + "'");
  }
}

bool parse_bool(const std::string& s, const std::string& key) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key " + key + ": bad boolean '" + s + "'");
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(s);
  while (std::getline(in, item, ',')) {
    const auto a = item.find_first_not_of(" \t");
    const auto b = item.find_last_not_of(" \t");
    if (a != std::string::npos) out.push_back(item.substr(a, b - a + 1));
  }
  return out;
}

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::string default_data_dir() {
  const char* env = std::getenv("MCE_DATA_DIR");
  return env != nullptr && env[0] != '\0' ? env : "data/mnist";
}

std::string serialize_config(const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "data_dir = " << (cfg.data_dir.empty() ? default_data_dir() : cfg.data_dir) << "\n";
  out << "out_dir = " << cfg.out_dir << "\n";
  out << "biases = ";
  for (size_t i = 0; i < cfg.biases.size(); ++i) {
    out << (i > 0 ? "," : "") << bias_name(cfg.biases[i]);
  }
  out << "\nmethods = ";
  for (size_t i = 0; i < cfg.methods.size(); ++i) {
    out << (i > 0 ? "," : "") << method_name(cfg.methods[i]);
  }
  out << "\ntrials = " << cfg.trials << "\n";
  out << "seed = " << cfg.seed << "\n";
  out << "workers = " << cfg.workers << "\n";
  out << "resume = " << (cfg.resume ? "true" : "false") << "\n";
  out << "train_per_class = " << cfg.sizes.train_per_class << "\n";
  out << "ood_dev_per_class = " << cfg.sizes.ood_dev_per_class << "\n";
  out << "ood_test_per_class = " << cfg.sizes.ood_test_per_class << "\n";
  out << "id_test_per_class = " << cfg.sizes.id_test_per_class << "\n";
  out << "lr = " << fmt_double(cfg.recipe.lr) << "\n";
  out << "momentum = " << fmt_double(cfg.recipe.momentum) << "\n";
  out << "batch_size = " << cfg.recipe.batch_size << "\n";
  out << "dropout = " << fmt_double(cfg.recipe.dropout) << "\n";
  out << "max_epochs = " << cfg.recipe.max_epochs << "\n";
  out << "early_stop_delta = " << fmt_double(cfg.recipe.early_stop_delta) << "\n";
  out << "early_stop_patience = " << cfg.recipe.early_stop_patience << "\n";
  out << "w = " << fmt_double(cfg.w) << "\n";
  out << "alpha = " << fmt_double(cfg.alpha) << "\n";
  if (cfg.adversary_w) out << "adversary_w = " << fmt_double(*cfg.adversary_w) << "\n";
  if (cfg.adversary_weight) {
    out << "adversary_weight = " << fmt_double(*cfg.adversary_weight) << "\n";
  }
  out << "max_prune_rate = " << fmt_double(cfg.max_prune_rate) << "\n";
  return out.str();
}

void set_config_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "data_dir") {
    cfg.data_dir = value;
  } else if (key == "out_dir") {
    cfg.out_dir = value;
  } else if (key == "biases") {
    cfg.biases.clear();
    for (const auto& item : split_list(value)) cfg.biases.push_back(parse_bias(item));
    if (cfg.biases.empty()) throw ConfigError("biases: empty list");
  } else if (key == "methods") {
    cfg.methods.clear();
    for (const auto& item : split_list(value)) cfg.methods.push_back(parse_method(item));
    if (cfg.methods.empty()) throw ConfigError("methods: empty list");
  } else if (key == "trials") {
    cfg.trials = parse_int(value, key);
    if (cfg.trials < 1) throw ConfigError("trials must be >= 1");
  } else if (key == "seed") {
    cfg.seed = static_cast<uint64_t>(std::stoull(value));
  } else if (key == "workers") {
    cfg.workers = parse_int(value, key);
  } else if (key == "resume") {
    cfg.resume = parse_bool(value, key);
  } else if (key == "train_per_class") {
    cfg.sizes.train_per_class = parse_int(value, key);
  } else if (key == "ood_dev_per_class") {
    cfg.sizes.ood_dev_per_class = parse_int(value, key);
  } else if (key == "ood_test_per_class") {
    cfg.sizes.ood_test_per_class = parse_int(value, key);
  } else if (key == "id_test_per_class") {
    cfg.sizes.id_test_per_class = parse_int(value, key);
  } else if (key == "lr") {
    cfg.recipe.lr = parse_double(value, key);
  } else if (key == "momentum") {
    cfg.recipe.momentum = parse_double(value, key);
  } else if (key == "batch_size") {
    cfg.recipe.batch_size = parse_int(value, key);
  } else if (key == "dropout") {
    cfg.recipe.dropout = parse_double(value, key);
  } else if (key == "max_epochs") {
    cfg.recipe.max_epochs = parse_int(value, key);
  } else if (key == "early_stop_delta") {
    cfg.recipe.early_stop_delta = parse_double(value, key);
  } else if (key == "early_stop_patience") {
    cfg.recipe.early_stop_patience = parse_int(value, key);
  } else if (key == "w") {
    cfg.w = parse_double(value, key);
  } else if (key == "alpha") {
    cfg.alpha = parse_double(value, key);
  } else if (key == "adversary_w") {
    cfg.adversary_w = parse_double(value, key);
  } else if (key == "adversary_weight") {
    cfg.adversary_weight = parse_double(value, key);
  } else if (key == "max_prune_rate") {
    cfg.max_prune_rate = parse_double(value, key);
  } else {
    throw ConfigError("unknown config key: " + key);
  }
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig cfg;
  cfg.data_dir = default_data_dir();
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    set_config_key(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) { return parse_config(read_text(path)); }

void save_config_file(const ExperimentConfig& cfg, const std::string& path) {
  write_text_atomic(path, serialize_config(cfg));
}

MethodConfig method_config_for(const ExperimentConfig& cfg, BiasKind bias, Method method) {
  MethodConfig mc;
  mc.method = method;
  mc.w = cfg.w;
  mc.alpha = cfg.alpha;
  if (method == Method::WithAdversary) {
    const auto [tuned_w, tuned_weight] = adversary_defaults(bias);
    mc.w = cfg.adversary_w.value_or(tuned_w);
    mc.adversary_weight = cfg.adversary_weight.value_or(tuned_weight);
  }
  return mc;
}

uint64_t trial_config_hash(const ExperimentConfig& cfg, BiasKind bias, Method method) {
  const MethodConfig mc = method_config_for(cfg, bias, method);
  std::ostringstream key;
  key << "v1|" << bias_name(bias) << "|" << method_name(method) << "|" << fmt_double(mc.w) << "|"
      << fmt_double(mc.alpha) << "|"
      << (mc.adversary_weight ? fmt_double(*mc.adversary_weight) : "-") << "|"
      << cfg.sizes.train_per_class << "," << cfg.sizes.ood_dev_per_class << ","
      << cfg.sizes.ood_test_per_class << "," << cfg.sizes.id_test_per_class << "|"
      << fmt_double(cfg.recipe.lr) << "," << fmt_double(cfg.recipe.momentum) << ","
      << cfg.recipe.batch_size << "," << fmt_double(cfg.recipe.dropout) << ","
      << cfg.recipe.max_epochs << "," << fmt_double(cfg.recipe.early_stop_delta) << ","
      << cfg.recipe.early_stop_patience << "|" << fmt_double(cfg.max_prune_rate);
  const std::string s = key.str();
  return derive_seed(0x9d5c0f3a11e6b4d1ULL, s);
}

}  // namespace mce
