#include "mce/baselines.hpp"

#include <algorithm>
#include <cmath>

#include "mce/errors.hpp"

namespace mce {

std::string method_name(Method m) {
  switch (m) {
    case Method::None: return "none";
    case Method::Mce: return "mce";
    case Method::NoCi: return "no_ci";
    case Method::NoBp: return "no_bp";
    case Method::WithAdversary: return "with_adversary";
    case Method::PretrainedBias: return "pretrained_bias";
    case Method::SameCapacity: return "same_capacity";
  }
  return "?";
}

Method parse_method(const std::string& name) {
  for (Method m : {Method::None, Method::Mce, Method::NoCi, Method::NoBp, Method::WithAdversary,
                   Method::PretrainedBias, Method::SameCapacity}) {
    if (method_name(m) == name) return m;
  }
  throw ConfigError("unknown method: " + name);
}

std::pair<double, double> adversary_defaults(BiasKind kind) {
  switch (kind) {
    case BiasKind::Background: return {0.05, 0.08};
    case BiasKind::Patch: return {0.7, 0.01};
    case BiasKind::Split: return {0.02, 0.01};
  }
  return {0.2, 0.01};
}

Eigen::MatrixXd BiasOnlyModel::logits_for(const std::vector<int>& mods) const {
  const int C = params.num_classes();
  Eigen::MatrixXd o(static_cast<Eigen::Index>(mods.size()), C);
  for (size_t i = 0; i < mods.size(); ++i) {
    o.row(static_cast<Eigen::Index>(i)) = params.W.row(mods[i]) + params.b.transpose();
  }
  return o;
}

double BiasOnlyModel::accuracy(const std::vector<int>& mods, const std::vector<int>& labels,
                               const ClassPrior& prior) const {
  const Eigen::MatrixXd o = logits_for(mods);
  int correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    const Eigen::VectorXd scores =
        o.row(static_cast<Eigen::Index>(i)).transpose() + prior.log_probs;
    if (argmax_tie_low(scores) == labels[i]) ++correct;
  }
  return labels.empty() ? 0.0 : static_cast<double>(correct) / labels.size();
}

BiasOnlyModel train_bias_only(const std::vector<int>& applied_mods, const std::vector<int>& labels,
                              const ClassPrior& prior) {
  const int C = prior.num_classes();
  InnerProblem prob;
  prob.features = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(applied_mods.size()), C);
  for (size_t i = 0; i < applied_mods.size(); ++i) {
    const int m = applied_mods[i];
    if (m < 0 || m >= C) throw DataError("bias-only model: modification index out of range");
    prob.features(static_cast<Eigen::Index>(i), m) = 1.0;
  }
  prob.labels = labels;
  prob.log_prior = prior.log_probs;
  prob.alpha = 1e-3;  // small ridge; the fit is otherwise unconstrained
  prob.residual = false;
  BiasOnlyModel model;
  model.params = solve(prob).params;
  return model;
}

namespace {

struct Batch {
  Tensor x;
  std::vector<int> labels;
  std::vector<int> mods;
};

Batch gather(const ExampleSet& set, const std::vector<int>& rows) {
  Batch b;
  const int64_t stride = 3 * kMnistPixels;
  b.x = Tensor({static_cast<int>(rows.size()), 3, kMnistSide, kMnistSide});
  for (size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    std::copy(set.images.data.begin() + r * stride, set.images.data.begin() + (r + 1) * stride,
              b.x.data.begin() + static_cast<int64_t>(i) * stride);
    b.labels.push_back(set.labels[static_cast<size_t>(r)]);
    b.mods.push_back(set.applied_mod[static_cast<size_t>(r)]);
  }
  return b;
}

Tensor one_hot(const std::vector<int>& values, int width) {
  Tensor t({static_cast<int>(values.size()), width});
  for (size_t i = 0; i < values.size(); ++i) t.at(static_cast<int>(i), values[i]) = 1.0;
  return t;
}

Tensor matrix_rows(const Eigen::MatrixXd& m, const std::vector<int>& rows) {
  Tensor t({static_cast<int>(rows.size()), static_cast<int>(m.cols())});
  for (size_t i = 0; i < rows.size(); ++i) {
    for (int c = 0; c < m.cols(); ++c) t.at(static_cast<int>(i), c) = m(rows[i], c);
  }
  return t;
}

bool uses_lower_model(Method m) {
  return m == Method::Mce || m == Method::NoCi || m == Method::NoBp ||
         m == Method::WithAdversary || m == Method::SameCapacity;
}

bool uses_argmin(Method m) {
  return m == Method::Mce || m == Method::NoBp || m == Method::SameCapacity;
}

}  // namespace

TrainOutcome train_method(const MethodConfig& cfg, const DatasetBundle& bundle,
                          const TrainRecipe& recipe, uint64_t trial_seed,
                          const TrainHooks* hooks) {
  const int C = bundle.num_classes;
  const Method method = cfg.method;
  if (method == Method::WithAdversary && !cfg.adversary_weight.has_value()) {
    throw ConfigError("with_adversary requires an adversary weight");
  }

  TrainOutcome out;
  MceModel& model = out.model;
  model.w = cfg.w;
  model.alpha = cfg.alpha;
  {
    Rng init_h(derive_seed(trial_seed, "init_higher"));
    model.higher = make_model(Arch::ConvNet, C, recipe.dropout, init_h);
  }
  if (uses_lower_model(method)) {
    Rng init_l(derive_seed(trial_seed, "init_lower"));
    model.lower = make_model(method == Method::SameCapacity ? Arch::ConvNet : Arch::MlpNet, C,
                             recipe.dropout, init_l);
    model.capacity_warning = model.lower->param_count() >= model.higher->param_count();
  }
  model.prior = compute_prior(bundle.train.labels, C);
  const auto log_prior = model.prior.log_row();

  // Adversary heads regress each model's log-scores from the other's plus a
  // one-hot label. Gradients reach only the model whose scores they consume.
  ParamStore adv_store;
  if (method == Method::WithAdversary) {
    Rng init_a(derive_seed(trial_seed, "init_adversary"));
    adv_store.add("h2l.weight", glorot_uniform({2 * C, C}, 2 * C, C, init_a));
    adv_store.add("h2l.bias", Tensor({C}));
    adv_store.add("l2h.weight", glorot_uniform({2 * C, C}, 2 * C, C, init_a));
    adv_store.add("l2h.bias", Tensor({C}));
  }

  // Pretrained Bias phase 1: fit the bias-only model, then precompute its
  // log-scores for every training example.
  Eigen::MatrixXd bias_logits;
  if (method == Method::PretrainedBias) {
    out.bias_only = train_bias_only(bundle.train.applied_mod, bundle.train.labels, model.prior);
    bias_logits = out.bias_only->logits_for(bundle.train.applied_mod);
  }

  Rng rng_batch(derive_seed(trial_seed, "batcher"));
  Rng rng_do_h(derive_seed(trial_seed, "dropout_higher"));
  Rng rng_do_l(derive_seed(trial_seed, "dropout_lower"));
  StratifiedBatcher batcher(bundle.train.labels, C, recipe.batch_size);

  ResidualAffineParams warm_h = ResidualAffineParams::zero(C);
  ResidualAffineParams warm_l = ResidualAffineParams::zero(C);

  const int max_epochs =
      hooks != nullptr && hooks->epoch_cap > 0 ? hooks->epoch_cap : recipe.max_epochs;
  double best_loss = std::numeric_limits<double>::infinity();
  int patience = 0;

  for (int epoch = 0; epoch < max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    int epoch_examples = 0;
    for (const auto& batch_rows : batcher.epoch_batches(rng_batch)) {
      Batch batch = gather(bundle.train, batch_rows);
      const int B = static_cast<int>(batch.labels.size());

      Graph g;
      Graph::NodeId task_loss;
      Graph::NodeId total_loss;
      try {
        if (uses_argmin(method)) {
          MceLoss nodes = build_mce_loss(g, model, batch.x, batch.labels, /*train_mode=*/true,
                                         rng_do_h, rng_do_l,
                                         /*backprop_argmin=*/method != Method::NoBp, &warm_h,
                                         &warm_l);
          task_loss = total_loss = nodes.loss;
          out.inner_stats.solves += 2;
          out.inner_stats.max_grad_norm = std::max(
              {out.inner_stats.max_grad_norm, nodes.sol_h.grad_norm, nodes.sol_l.grad_norm});
          out.inner_stats.max_newton_iterations =
              std::max({out.inner_stats.max_newton_iterations, nodes.sol_h.newton_iterations,
                        nodes.sol_l.newton_iterations});
          out.inner_stats.all_converged =
              out.inner_stats.all_converged && nodes.sol_h.converged && nodes.sol_l.converged;
          if (hooks != nullptr && hooks->on_batch_solved) {
            hooks->on_batch_solved(nodes.sol_h, nodes.sol_l);
          }
        } else if (method == Method::None) {
          auto z = model.higher->forward(g, batch.x, true, rng_do_h);
          task_loss = total_loss =
              cross_entropy(g, log_softmax(g, add_rowvec(g, z, log_prior)), batch.labels);
        } else if (method == Method::PretrainedBias) {
          auto z = model.higher->forward(g, batch.x, true, rng_do_h);
          auto o_bias = g.input(matrix_rows(bias_logits, batch_rows));
          auto scores = add_rowvec(g, add(g, z, o_bias), log_prior);
          task_loss = total_loss = cross_entropy(g, log_softmax(g, scores), batch.labels);
        } else {  // NoCi and WithAdversary share the plain ensemble
          auto o_h = model.higher->forward(g, batch.x, true, rng_do_h);
          auto o_l = model.lower->forward(g, batch.x, true, rng_do_l);
          auto ens = add_rowvec(g, add(g, o_h, o_l), log_prior);
          auto low = add_rowvec(g, o_l, log_prior);
          auto ce_e = cross_entropy(g, log_softmax(g, ens), batch.labels);
          auto ce_l = cross_entropy(g, log_softmax(g, low), batch.labels);
          task_loss = total_loss = add(g, ce_e, scale(g, ce_l, model.w));
          if (method == Method::WithAdversary) {
            const double aw = *cfg.adversary_weight;
            auto labels_oh = g.input(one_hot(batch.labels, C));
            auto pred_l = dense(g, concat_cols(g, grad_scale(g, o_h, -aw), labels_oh),
                                g.param(adv_store, "h2l.weight"), g.param(adv_store, "h2l.bias"));
            auto loss_l = mse(g, pred_l, grad_scale(g, o_l, 0.0));
            auto pred_h = dense(g, concat_cols(g, grad_scale(g, o_l, -aw), labels_oh),
                                g.param(adv_store, "l2h.weight"), g.param(adv_store, "l2h.bias"));
            auto loss_h = mse(g, pred_h, grad_scale(g, o_h, 0.0));
            total_loss = add(g, task_loss, add(g, loss_l, loss_h));
          }
        }
      } catch (const SolverError& e) {
        out.diverged = true;
        out.failure_reason = e.what();
        out.epochs = epoch;
        return out;
      }

      const double task_value = g.value(task_loss)[0];
      const double total_value = g.value(total_loss)[0];
      if (!std::isfinite(total_value)) {
        out.diverged = true;
        out.failure_reason = "non-finite training loss";
        out.epochs = epoch;
        return out;
      }
      g.backward(total_loss);
      sgd_momentum_step(model.higher->params(), recipe.lr, recipe.momentum);
      if (model.lower) sgd_momentum_step(model.lower->params(), recipe.lr, recipe.momentum);
      if (method == Method::WithAdversary) {
        sgd_momentum_step(adv_store, recipe.lr, recipe.momentum);
      }
      epoch_loss += task_value * B;
      epoch_examples += B;
    }
    epoch_loss /= epoch_examples;
    out.epoch_losses.push_back(epoch_loss);
    out.epochs = epoch + 1;
    out.final_loss = epoch_loss;
    if (!std::isfinite(epoch_loss)) {
      out.diverged = true;
      out.failure_reason = "non-finite epoch loss";
      return out;
    }
    if (epoch_loss < best_loss - recipe.early_stop_delta) {
      best_loss = epoch_loss;
      patience = 0;
    } else if (++patience >= recipe.early_stop_patience) {
      break;
    }
  }

  if (uses_argmin(method)) {
    freeze_eval_classifiers(model, bundle.train.images, bundle.train.labels);
  } else {
    // Identity classifiers: zero residual-affine parameters pass the model
    // logits straight through.
    model.frozen_theta_h = ResidualAffineParams::zero(C);
    if (model.lower) model.frozen_theta_l = ResidualAffineParams::zero(C);
  }
  return out;
}

namespace {

double accuracy_of(const std::vector<int>& pred, const std::vector<int>& gold) {
  int correct = 0;
  for (size_t i = 0; i < gold.size(); ++i) {
    if (pred[i] == gold[i]) ++correct;
  }
  return gold.empty() ? 0.0 : static_cast<double>(correct) / gold.size();
}

Eigen::MatrixXd row_softmax(const Eigen::MatrixXd& scores) {
  Eigen::MatrixXd p(scores.rows(), scores.cols());
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    p.row(r) = softmax(scores.row(r).transpose()).transpose();
  }
  return p;
}

}  // namespace

EvalResult evaluate_trial(MceModel& model, const DatasetBundle& bundle, double max_prune_rate) {
  if (!model.frozen()) throw StateError("evaluate_trial: model classifiers are not frozen");
  EvalResult result;

  const Eigen::MatrixXd scores_ood =
      (classifier_logits(*model.frozen_theta_h, eval_logits(*model.higher, bundle.ood_test.images))
           .rowwise() +
       model.prior.log_probs.transpose());
  const Eigen::MatrixXd scores_id =
      (classifier_logits(*model.frozen_theta_h, eval_logits(*model.higher, bundle.id_test.images))
           .rowwise() +
       model.prior.log_probs.transpose());

  auto argmax_rows = [](const Eigen::MatrixXd& s) {
    std::vector<int> pred(static_cast<size_t>(s.rows()));
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      pred[static_cast<size_t>(r)] = argmax_tie_low(s.row(r).transpose());
    }
    return pred;
  };
  result.ood_acc = accuracy_of(argmax_rows(scores_ood), bundle.ood_test.labels);
  result.id_acc = accuracy_of(argmax_rows(scores_id), bundle.id_test.labels);

  if (model.lower && model.frozen_theta_l) {
    const Eigen::MatrixXd lower_ood = row_softmax(
        classifier_logits(*model.frozen_theta_l, eval_logits(*model.lower, bundle.ood_test.images))
            .rowwise() +
        model.prior.log_probs.transpose());
    const Eigen::MatrixXd lower_id = row_softmax(
        classifier_logits(*model.frozen_theta_l, eval_logits(*model.lower, bundle.id_test.images))
            .rowwise() +
        model.prior.log_probs.transpose());

    result.lower_ood_acc = accuracy_of(argmax_rows(lower_ood), bundle.ood_test.labels);
    result.lower_id_acc = accuracy_of(argmax_rows(lower_id), bundle.id_test.labels);

    const double t = calibrate_threshold(lower_id, bundle.id_test.labels, max_prune_rate);
    result.prune_threshold = t;
    int gold_pruned = 0;
    for (Eigen::Index r = 0; r < lower_id.rows(); ++r) {
      if (lower_id(r, bundle.id_test.labels[static_cast<size_t>(r)]) < t) ++gold_pruned;
    }
    result.id_gold_prune_rate = static_cast<double>(gold_pruned) / lower_id.rows();
    std::vector<int> pruned_pred(static_cast<size_t>(scores_ood.rows()));
    for (Eigen::Index r = 0; r < scores_ood.rows(); ++r) {
      pruned_pred[static_cast<size_t>(r)] =
          prune_candidates(lower_ood.row(r).transpose(), scores_ood.row(r).transpose(), t);
    }
    result.ood_acc_pruned = accuracy_of(pruned_pred, bundle.ood_test.labels);
  }
  return result;
}

SameCapacityReport run_same_capacity_check(const DatasetBundle& bundle, const TrainRecipe& recipe,
                                           const MethodConfig& cfg, uint64_t trial_seed) {
  MethodConfig same = cfg;
  same.method = Method::SameCapacity;
  TrainOutcome outcome = train_method(same, bundle, recipe, trial_seed);
  SameCapacityReport report;
  report.capacity_warning = outcome.model.capacity_warning;
  report.diverged = outcome.diverged;
  if (!outcome.diverged) {
    report.eval = evaluate_trial(outcome.model, bundle, 0.001);
    report.lower_reaches_higher_id =
        report.eval.lower_id_acc.value_or(0.0) >= report.eval.id_acc;
  }
  return report;
}

}  // namespace mce
