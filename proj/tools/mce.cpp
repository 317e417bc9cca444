#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include "mce/checkpoint.hpp"
#include "mce/errors.hpp"
#include "mce/harness.hpp"
#include "mce/pngio.hpp"

namespace fs = std::filesystem;
using namespace mce;

namespace {

// Exit codes: 0 success, 1 check/assertion failure, 2 configuration error,
// 3 I/O or data error.
constexpr int kExitCheckFailed = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;

int cmd_fetch_data(const std::string& data_dir) {
  const fs::path dir(data_dir);
  std::cout << "data directory: " << dir.string() << "\n";
  const MnistData data = load_mnist_dir(dir.string());
  std::vector<int> counts(10, 0);
  for (int y : data.labels) counts[static_cast<size_t>(y)]++;
  std::cout << "train images: " << data.images.size() << "\n";
  std::cout << "first label: " << data.labels.front() << "\n";
  std::cout << "per-class counts:";
  for (int c = 0; c < 10; ++c) std::cout << " " << counts[static_cast<size_t>(c)];
  std::cout << "\n";
  float lo = 1.0f, hi = 0.0f;
  for (const auto& img : data.images) {
    for (float v : img.pixels) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  std::cout << "intensity range: [" << lo << ", " << hi << "]\n";
  if (data.images.size() != 60000 || data.labels.front() != 5) {
    std::cout << "warning: not the standard 60k training files\n";
  }
  std::cout << "ok\n";
  return 0;
}

int cmd_synth(const ExperimentConfig& cfg, const std::string& bias, uint64_t seed,
              const std::string& out_file, const std::string& png_file, int png_per_class) {
  const MnistData pool = load_mnist_dir(cfg.data_dir);
  const DatasetBundle bundle = synthesize(parse_bias(bias), pool, cfg.sizes, seed);
  double biased_fraction = 0.0;
  for (uint8_t b : bundle.train.biased) biased_fraction += b;
  biased_fraction /= bundle.train.size();
  std::cout << "bias: " << bias << ", classes: " << bundle.num_classes << "\n";
  std::cout << "train: " << bundle.train.size() << " (biased fraction " << biased_fraction
            << ")\n";
  std::cout << "ood_dev: " << bundle.ood_dev.size() << ", ood_test: " << bundle.ood_test.size()
            << ", id_test: " << bundle.id_test.size() << "\n";
  if (!out_file.empty()) {
    save_bundle(out_file, bundle);
    std::cout << "bundle written to " << out_file << "\n";
  }
  if (!png_file.empty()) {
    write_png(png_file, render_sample_grid(bundle, png_per_class));
    std::cout << "sample grid written to " << png_file << "\n";
  }
  return 0;
}

int cmd_train(const ExperimentConfig& cfg, const std::string& bias, const std::string& method,
              int trial, const std::string& checkpoint_path, const std::string& result_path) {
  const MnistData pool = load_mnist_dir(cfg.data_dir);
  const BiasKind kind = parse_bias(bias);
  const Method m = parse_method(method);
  const TrialResult r = run_single_trial(cfg, pool, kind, m, trial);
  const std::string json = trial_to_json(r);
  std::cout << json;
  if (!result_path.empty()) write_text_atomic(result_path, json);

  if (!checkpoint_path.empty()) {
    // Re-train to materialize the model (run_single_trial reports metrics only).
    const DatasetBundle bundle =
        synthesize(kind, pool, cfg.sizes, derive_seed(cfg.seed, "bundle", static_cast<uint64_t>(trial)));
    TrainOutcome outcome = train_method(method_config_for(cfg, kind, m), bundle, cfg.recipe,
                                        derive_seed(cfg.seed, "trial", static_cast<uint64_t>(trial)));
    if (outcome.diverged) {
      std::cout << "trial diverged; no checkpoint written\n";
    } else {
      save_checkpoint(checkpoint_path, outcome.model, r.seed, r.config_hash);
      std::cout << "checkpoint written to " << checkpoint_path << "\n";
    }
  }
  return r.diverged ? kExitCheckFailed : 0;
}

int cmd_experiment(const ExperimentConfig& cfg) {
  save_config_file(cfg, cfg.out_dir + "/config.used");
  const AggregateReport report = run_experiment(cfg, std::cout);
  std::cout << "\n" << read_text(cfg.out_dir + "/report.md");
  std::cout << "reports written under " << cfg.out_dir << "\n";
  (void)report;
  return 0;
}

int cmd_report(const std::string& dir, const std::string& format) {
  std::vector<TrialResult> results;
  std::vector<fs::path> files;
  const fs::path trials = fs::path(dir) / "trials";
  if (!fs::is_directory(trials)) throw IoError(trials.string() + " is not a directory");
  for (const auto& entry : fs::directory_iterator(trials)) {
    if (entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) results.push_back(trial_from_json(read_text(f.string())));
  if (results.empty()) throw DataError("no trial records under " + trials.string());
  if (format == "csv") {
    std::cout << render_csv(results);
  } else if (format == "json") {
    std::cout << render_json(results);
  } else if (format == "markdown") {
    std::cout << render_markdown(results);
  } else {
    throw ConfigError("unknown report format: " + format);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixed-capacity ensemble training and bias-removal experiments"};
  app.require_subcommand(1);

  ExperimentConfig cfg;
  cfg.data_dir = default_data_dir();
  std::string config_path;
  std::vector<std::string> overrides;

  app.add_option("--config", config_path, "experiment config file");
  app.add_option("--set", overrides, "override a config key (key=value), repeatable");
  app.add_option("--data-dir", cfg.data_dir, "MNIST IDX directory (also $MCE_DATA_DIR)");

  auto* fetch = app.add_subcommand("fetch-data", "verify the MNIST IDX files");

  auto* synth = app.add_subcommand("synth", "synthesize a biased dataset bundle");
  std::string synth_bias = "background", synth_out, synth_png;
  uint64_t synth_seed = 1;
  int synth_png_per_class = 8;
  synth->add_option("--bias", synth_bias, "background|patch|split")->required();
  synth->add_option("--seed", synth_seed, "bundle seed");
  synth->add_option("--out", synth_out, "write the bundle container here");
  synth->add_option("--png", synth_png, "write a sample grid PNG here");
  synth->add_option("--png-per-class", synth_png_per_class, "samples per class in the grid");

  auto* train = app.add_subcommand("train", "train and evaluate a single trial");
  std::string train_bias = "background", train_method_name = "mce", train_ckpt, train_out;
  int train_trial = 0;
  train->add_option("--bias", train_bias, "background|patch|split")->required();
  train->add_option("--method", train_method_name,
                    "none|mce|no_ci|no_bp|with_adversary|pretrained_bias|same_capacity")
      ->required();
  train->add_option("--trial", train_trial, "trial index (seeds derive from it)");
  train->add_option("--save-checkpoint", train_ckpt, "write the trained model here");
  train->add_option("--out", train_out, "also write the trial record here");

  auto* experiment = app.add_subcommand("experiment", "run the full method x bias grid");

  auto* report = app.add_subcommand("report", "re-aggregate stored trial records");
  std::string report_dir, report_format = "markdown";
  report->add_option("--dir", report_dir, "experiment output directory")->required();
  report->add_option("--format", report_format, "csv|json|markdown");

  auto* self = app.add_subcommand("selfcheck", "run the fast invariant suite");
  SelfcheckOptions self_opts;
  self->add_flag("--corrupt-implicit-sign", self_opts.corrupt_implicit_sign)->group("");
  self->add_flag("--zero-alpha", self_opts.zero_alpha)->group("");

  CLI11_PARSE(app, argc, argv);

  try {
    if (!config_path.empty()) {
      const std::string saved_data_dir = cfg.data_dir;
      cfg = load_config_file(config_path);
      if (app.count("--data-dir") > 0) cfg.data_dir = saved_data_dir;
    }
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got " + kv);
      set_config_key(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }

    if (fetch->parsed()) return cmd_fetch_data(cfg.data_dir);
    if (synth->parsed()) {
      return cmd_synth(cfg, synth_bias, synth_seed, synth_out, synth_png, synth_png_per_class);
    }
    if (train->parsed()) {
      return cmd_train(cfg, train_bias, train_method_name, train_trial, train_ckpt, train_out);
    }
    if (experiment->parsed()) return cmd_experiment(cfg);
    if (report->parsed()) return cmd_report(report_dir, report_format);
    if (self->parsed()) {
      self_opts.data_dir = cfg.data_dir;
      return selfcheck(self_opts, std::cout) == 0 ? 0 : kExitCheckFailed;
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitIo;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitCheckFailed;
  }
  return 0;
}
