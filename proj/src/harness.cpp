#include "mce/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <mutex>
#include <thread>

#include "mce/errors.hpp"

namespace mce {

namespace fs = std::filesystem;

MnistData load_mnist_dir(const std::string& data_dir) {
  const fs::path dir(data_dir);
  const fs::path images = dir / "train-images-idx3-ubyte";
  const fs::path labels = dir / "train-labels-idx1-ubyte";
  for (const fs::path& p : {images, labels}) {
    if (!fs::exists(p)) {
      const fs::path gz = p.string() + ".gz";
      if (fs::exists(gz)) {
        gunzip_file(gz.string(), p.string());
      } else {
        throw IoError("MNIST file " + p.string() +
                      " not found; point --data-dir or MCE_DATA_DIR at the IDX files "
                      "(run `mce fetch-data` to verify a directory)");
      }
    }
  }
  return load_mnist(images.string(), labels.string());
}

TrialResult run_single_trial(const ExperimentConfig& cfg, const MnistData& pool, BiasKind bias,
                             Method method, int trial_index) {
  TrialResult r;
  r.method = method_name(method);
  r.bias = bias_name(bias);
  r.trial_index = trial_index;
  r.seed = derive_seed(cfg.seed, "trial", static_cast<uint64_t>(trial_index));
  r.config_hash = trial_config_hash(cfg, bias, method);

  const DatasetBundle bundle =
      synthesize(bias, pool, cfg.sizes, derive_seed(cfg.seed, "bundle", static_cast<uint64_t>(trial_index)));
  const MethodConfig mc = method_config_for(cfg, bias, method);

  const auto t0 = std::chrono::steady_clock::now();
  try {
    TrainOutcome outcome = train_method(mc, bundle, cfg.recipe, r.seed);
    r.epochs = outcome.epochs;
    if (outcome.diverged) {
      r.diverged = true;
    } else {
      const EvalResult eval = evaluate_trial(outcome.model, bundle, cfg.max_prune_rate);
      r.ood_acc = eval.ood_acc;
      r.id_acc = eval.id_acc;
      r.ood_acc_pruned = eval.ood_acc_pruned;
      if (eval.prune_threshold) r.extra["prune_threshold"] = *eval.prune_threshold;
      if (eval.id_gold_prune_rate) r.extra["id_gold_prune_rate"] = *eval.id_gold_prune_rate;
      if (eval.lower_ood_acc) r.extra["lower_ood_acc"] = *eval.lower_ood_acc;
      if (eval.lower_id_acc) r.extra["lower_id_acc"] = *eval.lower_id_acc;
      if (outcome.model.capacity_warning) r.extra["capacity_warning"] = 1.0;
      if (method == Method::SameCapacity) {
        r.extra["lower_ge_higher_id"] =
            eval.lower_id_acc.value_or(0.0) >= eval.id_acc ? 1.0 : 0.0;
      }
      if (outcome.inner_stats.solves > 0) {
        r.extra["inner_max_grad_norm"] = outcome.inner_stats.max_grad_norm;
        r.extra["inner_max_newton_iters"] = outcome.inner_stats.max_newton_iterations;
      }
    }
  } catch (const SolverError&) {
    r.diverged = true;
  }
  r.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

namespace {

struct Job {
  BiasKind bias;
  Method method;
  int trial;
};

std::string trial_file(const ExperimentConfig& cfg, const Job& job) {
  return cfg.out_dir + "/trials/" + bias_name(job.bias) + "__" + method_name(job.method) + "__" +
         std::to_string(job.trial) + ".json";
}

}  // namespace

AggregateReport run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  fs::create_directories(cfg.out_dir + "/trials");
  const MnistData pool = load_mnist_dir(cfg.data_dir);

  std::vector<Job> jobs;
  for (BiasKind bias : cfg.biases) {
    for (Method method : cfg.methods) {
      for (int t = 0; t < cfg.trials; ++t) jobs.push_back({bias, method, t});
    }
  }
  std::vector<TrialResult> results(jobs.size());

  const unsigned workers =
      cfg.workers > 0 ? static_cast<unsigned>(cfg.workers)
                      : std::max(1u, std::thread::hardware_concurrency());
  std::atomic<size_t> next{0};
  std::mutex log_mutex;
  std::exception_ptr first_error;
  std::mutex error_mutex;

  auto worker = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      const Job& job = jobs[i];
      try {
        const std::string path = trial_file(cfg, job);
        const uint64_t want_hash = trial_config_hash(cfg, job.bias, job.method);
        const uint64_t want_seed = derive_seed(cfg.seed, "trial", static_cast<uint64_t>(job.trial));
        bool reused = false;
        if (cfg.resume && fs::exists(path)) {
          try {
            TrialResult r = trial_from_json(read_text(path));
            if (r.config_hash == want_hash && r.seed == want_seed &&
                r.method == method_name(job.method) && r.bias == bias_name(job.bias)) {
              results[i] = std::move(r);
              reused = true;
            }
          } catch (const IoError&) {
            // unreadable record: recompute below
          }
        }
        if (!reused) {
          results[i] = run_single_trial(cfg, pool, job.bias, job.method, job.trial);
          write_text_atomic(path, trial_to_json(results[i]));
        }
        std::lock_guard<std::mutex> lk(log_mutex);
        const TrialResult& r = results[i];
        log << r.bias << "/" << r.method << " trial " << r.trial_index
            << (reused ? " (cached)" : "");
        if (r.diverged) {
          log << " DIVERGED";
        } else {
          log << " ood=" << *r.ood_acc << " id=" << *r.id_acc;
        }
        log << " [" << r.epochs << " epochs, " << static_cast<int>(r.wall_time_s) << "s]\n"
            << std::flush;
      } catch (...) {
        std::lock_guard<std::mutex> lk(error_mutex);
        if (!first_error) first_error = std::current_exception();
        next.store(jobs.size());  // stop handing out work
        return;
      }
    }
  };

  std::vector<std::thread> threads;
  for (unsigned k = 0; k < workers; ++k) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);

  write_text_atomic(cfg.out_dir + "/report.csv", render_csv(results));
  write_text_atomic(cfg.out_dir + "/report.json", render_json(results));
  write_text_atomic(cfg.out_dir + "/report.md", render_markdown(results));
  return aggregate(results);
}

// ---------------------------------------------------------------------------
// selfcheck

namespace {

struct CheckScope {
  std::ostream& out;
  int& failures;
  bool check(const std::string& name, bool ok, const std::string& detail = "") {
    if (ok) {
      out << "PASS  " << name << "\n";
    } else {
      ++failures;
      out << "FAIL  " << name << (detail.empty() ? "" : ": " + detail) << "\n";
    }
    return ok;
  }
};

double rel_err(double a, double b) {
  return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

// Central-difference check of d(loss)/d(param entries) for a freshly rebuilt
// forward pass; checks every k-th coordinate.
bool fd_check_store(const std::function<double()>& loss_fn, ParamStore& store,
                    const std::string& entry, const Tensor& analytic, int stride, double tol,
                    double h, std::string* detail) {
  Tensor& value = store.at(entry).value;
  for (int64_t i = 0; i < value.numel(); i += stride) {
    const double keep = value[i];
    value[i] = keep + h;
    const double up = loss_fn();
    value[i] = keep - h;
    const double down = loss_fn();
    value[i] = keep;
    const double fd = (up - down) / (2.0 * h);
    const double err = rel_err(fd, analytic[i]);
    if (err > tol) {
      *detail = entry + "[" + std::to_string(i) + "]: fd=" + std::to_string(fd) +
                " analytic=" + std::to_string(analytic[i]);
      return false;
    }
  }
  return true;
}

void check_op_gradients(CheckScope& sc) {
  Rng rng(123);
  ParamStore store;
  store.add("k", glorot_uniform({2, 3, 7, 7}, 147, 98, rng));
  store.add("kb", Tensor({2}));
  store.add("w", glorot_uniform({18, 5}, 18, 5, rng));
  store.add("wb", Tensor({5}));
  Tensor x({4, 3, 9, 9});
  for (auto& v : x.data) v = rng.uniform(-1.0, 1.0);
  const std::vector<int> labels = {0, 2, 4, 1};

  auto forward = [&](Graph& g) {
    auto h = conv2d(g, g.input(x), g.param(store, "k"), g.param(store, "kb"));
    h = flatten(g, relu(g, h));
    h = dense(g, h, g.param(store, "w"), g.param(store, "wb"));
    return cross_entropy(g, log_softmax(g, h), labels);
  };
  auto loss_fn = [&]() {
    Graph g;
    return g.value(forward(g))[0];
  };

  Graph g;
  auto loss = forward(g);
  g.backward(loss);

  std::string detail;
  bool ok = true;
  for (const auto& [name, stride] : std::initializer_list<std::pair<const char*, int>>{
           {"k", 7}, {"kb", 1}, {"w", 5}, {"wb", 1}}) {
    Tensor analytic = store.at(name).grad;
    store.zero_grads();
    if (!fd_check_store(loss_fn, store, name, analytic, stride, 1e-5, 1e-6, &detail)) {
      ok = false;
      break;
    }
  }
  sc.check("gradient/ops", ok, detail);
}

void check_argmin_gradient(CheckScope& sc, bool corrupt_sign) {
  Rng rng(321);
  const int B = 12, C = 3;
  InnerProblem prob;
  prob.features.resize(B, C);
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < C; ++c) prob.features(r, c) = rng.uniform(-1.5, 1.5);
  }
  for (int b = 0; b < B; ++b) prob.labels.push_back(b % C);
  prob.log_prior = Eigen::VectorXd::Constant(C, std::log(1.0 / C));
  prob.alpha = 0.01;

  Eigen::MatrixXd R(B, C);
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < C; ++c) R(r, c) = rng.uniform(-1.0, 1.0);
  }
  auto loss_at = [&](const Eigen::MatrixXd& Z) {
    InnerProblem p = prob;
    p.features = Z;
    const InnerSolution s = solve(p, nullptr, 1e-12);
    return (classifier_logits(s.params, Z).array() * R.array()).sum();
  };

  const InnerSolution sol = solve(prob, nullptr, 1e-12);
  Eigen::MatrixXd wplus = sol.params.W;
  wplus.diagonal().array() += 1.0;
  ResidualAffineParams dtheta;
  dtheta.W = prob.features.transpose() * R;
  dtheta.b = R.colwise().sum().transpose();
  Eigen::MatrixXd direct = R * wplus.transpose();
  Eigen::MatrixXd dz = backward_through_argmin(sol, prob, flatten_params(dtheta), direct);
  if (corrupt_sign) dz = 2.0 * direct - dz;  // mutation hook: flips the implicit term

  const double h = 1e-5;
  double max_err = 0.0;
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < C; ++c) {
      Eigen::MatrixXd zp = prob.features, zm = prob.features;
      zp(r, c) += h;
      zm(r, c) -= h;
      const double fd = (loss_at(zp) - loss_at(zm)) / (2.0 * h);
      max_err = std::max(max_err, rel_err(fd, dz(r, c)));
    }
  }
  sc.check("gradient/argmin_implicit", max_err < 1e-4,
           "max rel err " + std::to_string(max_err));
}

void check_inner_optimality(CheckScope& sc, bool zero_alpha) {
  Rng rng(777);
  const int B = 40, C = 5;
  InnerProblem prob;
  prob.features.resize(B, C);
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < C; ++c) prob.features(r, c) = rng.uniform(-2.0, 2.0);
  }
  for (int b = 0; b < B; ++b) prob.labels.push_back(b % C);
  prob.log_prior = Eigen::VectorXd::Constant(C, std::log(1.0 / C));
  prob.alpha = zero_alpha ? 0.0 : 0.002;

  try {
    const InnerSolution sol = solve(prob);
    bool ok = sol.converged && sol.grad_norm <= 1e-8;
    std::string detail = "grad_norm " + std::to_string(sol.grad_norm);

    const double j_star = inner_objective(sol.params, prob);
    const int D = (C + 1) * C;
    for (int rep = 0; rep < 100 && ok; ++rep) {
      Eigen::VectorXd delta(D);
      for (int i = 0; i < D; ++i) delta(i) = rng.uniform(-1.0, 1.0);
      delta *= 1e-3 / delta.norm();
      const ResidualAffineParams perturbed =
          unflatten_params(flatten_params(sol.params) + delta, C);
      if (inner_objective(perturbed, prob) < j_star) {
        ok = false;
        detail = "perturbation " + std::to_string(rep) + " decreased the objective";
      }
    }

    // Uniqueness: wildly different warm starts agree.
    ResidualAffineParams far = ResidualAffineParams::zero(C);
    far.W.setConstant(2.0);
    far.b.setConstant(-1.0);
    const InnerSolution again = solve(prob, &far);
    const double gap = (flatten_params(again.params) - flatten_params(sol.params))
                           .cwiseAbs()
                           .maxCoeff();
    if (ok && gap >= 1e-6) {
      ok = false;
      detail = "warm starts disagree by " + std::to_string(gap);
    }

    InnerProblem stiffer = prob;
    stiffer.alpha *= 10.0;
    if (ok && solve(stiffer).params.W.norm() > sol.params.W.norm()) {
      ok = false;
      detail = "10x alpha increased ||W||";
    }
    sc.check("inner/optimality", ok, detail);
  } catch (const ConfigError& e) {
    sc.check("inner/optimality", false, e.what());
  }
}

void check_eq6(CheckScope& sc) {
  Rng rng(9001);
  double worst = 0.0;
  for (int rep = 0; rep < 100; ++rep) {
    const int ny = 2 + static_cast<int>(rng.below(3));
    const int nh = 2 + static_cast<int>(rng.below(4));
    const int nl = 2 + static_cast<int>(rng.below(4));
    auto simplex = [&](int n) {
      std::vector<double> v(static_cast<size_t>(n));
      double total = 0.0;
      for (auto& x : v) total += (x = 0.05 + rng.uniform01());
      for (auto& x : v) x /= total;
      return v;
    };
    const auto py = simplex(ny);
    std::vector<std::vector<double>> ph, pl;
    for (int c = 0; c < ny; ++c) {
      ph.push_back(simplex(nh));
      pl.push_back(simplex(nl));
    }
    std::vector<double> joint(static_cast<size_t>(nh) * nl * ny);
    for (int a = 0; a < nh; ++a) {
      for (int b = 0; b < nl; ++b) {
        for (int c = 0; c < ny; ++c) {
          joint[(static_cast<size_t>(a) * nl + b) * ny + c] =
              py[static_cast<size_t>(c)] * ph[static_cast<size_t>(c)][static_cast<size_t>(a)] *
              pl[static_cast<size_t>(c)][static_cast<size_t>(b)];
        }
      }
    }
    worst = std::max(worst, verify_ci_factorization(joint, nh, nl, ny));
  }
  sc.check("ensemble/eq6_exactness", worst < 1e-12, "max deviation " + std::to_string(worst));
}

void check_leak_bound(CheckScope& sc, const std::string& data_dir) {
  MnistData pool;
  bool synthetic = false;
  try {
    pool = load_mnist_dir(data_dir.empty() ? default_data_dir() : data_dir);
  } catch (const IoError&) {
    pool = synthetic_pool(600, 4242);
    synthetic = true;
  }
  BundleSizes sizes;
  sizes.train_per_class = 100;
  sizes.ood_dev_per_class = 20;
  sizes.ood_test_per_class = 200;
  sizes.id_test_per_class = 200;

  bool ok = true;
  std::string detail = synthetic ? "(procedural image pool)" : "";
  for (BiasKind kind : {BiasKind::Background, BiasKind::Patch, BiasKind::Split}) {
    const DatasetBundle bundle = synthesize(kind, pool, sizes, 99);
    const ClassPrior prior = compute_prior(bundle.train.labels, bundle.num_classes);
    const BiasOnlyModel bias = train_bias_only(bundle.train.applied_mod, bundle.train.labels, prior);
    const double id = bias.accuracy(bundle.id_test.applied_mod, bundle.id_test.labels, prior);
    const double ood = bias.accuracy(bundle.ood_test.applied_mod, bundle.ood_test.labels, prior);
    const double chance = 1.0 / bundle.num_classes;
    if (std::abs(id - 0.9) > 0.02 || std::abs(ood - chance) > 0.02) {
      ok = false;
      detail = bias_name(kind) + ": id=" + std::to_string(id) + " ood=" + std::to_string(ood);
      break;
    }
  }
  sc.check("data/leak_bound", ok, detail);
}

}  // namespace

int selfcheck(const SelfcheckOptions& opts, std::ostream& out) {
  int failures = 0;
  CheckScope sc{out, failures};
  check_op_gradients(sc);
  check_argmin_gradient(sc, opts.corrupt_implicit_sign);
  check_inner_optimality(sc, opts.zero_alpha);
  check_eq6(sc);
  check_leak_bound(sc, opts.data_dir);
  out << (failures == 0 ? "selfcheck: all checks passed\n"
                        : "selfcheck: " + std::to_string(failures) + " check(s) failed\n");
  return failures;
}

}  // namespace mce
