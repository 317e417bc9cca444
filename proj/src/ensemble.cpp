#include "mce/ensemble.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "mce/errors.hpp"

namespace mce {

ClassPrior compute_prior(const std::vector<int>& labels, int num_classes) {
  if (labels.empty()) throw DataError("compute_prior: empty label set");
  Eigen::VectorXd counts = Eigen::VectorXd::Zero(num_classes);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw DataError("compute_prior: label out of range");
    counts(y) += 1.0;
  }
  for (int c = 0; c < num_classes; ++c) {
    if (counts(c) == 0.0) {
      throw DataError("compute_prior: class " + std::to_string(c) +
                      " has no training examples; smooth the prior or drop the class");
    }
  }
  ClassPrior prior;
  prior.probs = counts / static_cast<double>(labels.size());
  prior.log_probs = prior.probs.array().log();
  return prior;
}

StratifiedBatcher::StratifiedBatcher(const std::vector<int>& labels, int num_classes,
                                     int batch_size)
    : batch_size_(batch_size) {
  if (batch_size < 1) throw ConfigError("batch size must be positive");
  class_pools_.resize(static_cast<size_t>(num_classes));
  for (size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= num_classes) throw DataError("batcher: label out of range");
    class_pools_[static_cast<size_t>(y)].push_back(static_cast<int>(i));
  }
  const int n = static_cast<int>(labels.size());
  batches_per_epoch_ = (n + batch_size - 1) / batch_size;
}

std::vector<std::vector<int>> StratifiedBatcher::epoch_batches(Rng& rng) const {
  const int nb = batches_per_epoch_;
  std::vector<std::vector<int>> pools = class_pools_;
  for (auto& pool : pools) rng.shuffle(pool);
  std::vector<std::vector<int>> batches(static_cast<size_t>(nb));
  for (const auto& pool : pools) {
    const int n = static_cast<int>(pool.size());
    for (int k = 0; k < nb; ++k) {
      const int lo = static_cast<int>(static_cast<int64_t>(k) * n / nb);
      const int hi = static_cast<int>(static_cast<int64_t>(k + 1) * n / nb);
      auto& batch = batches[static_cast<size_t>(k)];
      batch.insert(batch.end(), pool.begin() + lo, pool.begin() + hi);
    }
  }
  for (auto& batch : batches) rng.shuffle(batch);
  return batches;
}

Eigen::VectorXd softmax(const Eigen::VectorXd& scores) {
  Eigen::VectorXd p = (scores.array() - scores.maxCoeff()).exp();
  return p / p.sum();
}

PredictionBundle predict(const Eigen::VectorXd& o_h, const Eigen::VectorXd& o_l,
                         const ClassPrior& prior) {
  PredictionBundle out;
  out.y_e = softmax(o_h + o_l + prior.log_probs);
  out.y_l = softmax(o_l + prior.log_probs);
  out.y_h = softmax(o_h + prior.log_probs);
  return out;
}

Graph::NodeId argmin_classifier_node(Graph& g, Graph::NodeId z, const std::vector<int>& labels,
                                     const ClassPrior& prior, double alpha, bool backprop_implicit,
                                     ResidualAffineParams* warm_io, InnerSolution* sol_out) {
  const Tensor& zv = g.value(z);
  if (zv.rank() != 2) throw ConfigError("argmin_classifier: expected features [B,C]");
  const int B = zv.dim(0), C = zv.dim(1);
  if (C != prior.num_classes()) throw ConfigError("argmin_classifier: class count mismatch");

  auto prob = std::make_shared<InnerProblem>();
  prob->features = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                  Eigen::RowMajor>>(zv.data.data(), B, C);
  prob->labels = labels;
  prob->log_prior = prior.log_probs;
  prob->alpha = alpha;

  auto sol = std::make_shared<InnerSolution>(
      solve(*prob, warm_io != nullptr ? warm_io : nullptr));
  if (warm_io != nullptr) *warm_io = sol->params;
  if (sol_out != nullptr) *sol_out = *sol;

  const Eigen::MatrixXd o = classifier_logits(sol->params, prob->features, true);
  Tensor out({B, C});
  for (int r = 0; r < B; ++r) {
    for (int c = 0; c < C; ++c) out.at(r, c) = o(r, c);
  }

  return g.custom(std::move(out), {z},
                  [z, B, C, prob, sol, backprop_implicit](Graph& gg, Graph::NodeId self) {
                    const Tensor& dyt = gg.grad(self);
                    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic,
                                                   Eigen::RowMajor>>
                        dout(dyt.data.data(), B, C);

                    // o = Z(W+I) + 1 b^T: direct feature gradient plus the
                    // gradient with respect to the classifier parameters.
                    Eigen::MatrixXd wplus = sol->params.W;
                    wplus.diagonal().array() += 1.0;
                    Eigen::MatrixXd dz = dout * wplus.transpose();

                    if (backprop_implicit) {
                      ResidualAffineParams dtheta;
                      dtheta.W = prob->features.transpose() * dout;
                      dtheta.b = dout.colwise().sum().transpose();
                      dz = backward_through_argmin(*sol, *prob, flatten_params(dtheta), dz);
                    }

                    Tensor& dzt = gg.grad(z);
                    for (int r = 0; r < B; ++r) {
                      for (int c = 0; c < C; ++c) dzt.at(r, c) += dz(r, c);
                    }
                  });
}

MceLoss build_mce_loss(Graph& g, MceModel& model, const Tensor& x, const std::vector<int>& labels,
                       bool train_mode, Rng& dropout_rng_h, Rng& dropout_rng_l,
                       bool backprop_argmin, ResidualAffineParams* warm_h,
                       ResidualAffineParams* warm_l) {
  if (!model.lower) throw ConfigError("build_mce_loss: ensemble needs a lower model");
  MceLoss out;
  out.logits_h = model.higher->forward(g, x, train_mode, dropout_rng_h);
  out.logits_l = model.lower->forward(g, x, train_mode, dropout_rng_l);
  auto o_h = argmin_classifier_node(g, out.logits_h, labels, model.prior, model.alpha,
                                    backprop_argmin, warm_h, &out.sol_h);
  auto o_l = argmin_classifier_node(g, out.logits_l, labels, model.prior, model.alpha,
                                    backprop_argmin, warm_l, &out.sol_l);
  const auto log_prior = model.prior.log_row();
  auto ens_scores = add_rowvec(g, add(g, o_h, o_l), log_prior);
  auto low_scores = add_rowvec(g, o_l, log_prior);
  out.ensemble_ce = cross_entropy(g, log_softmax(g, ens_scores), labels);
  out.lower_ce = cross_entropy(g, log_softmax(g, low_scores), labels);
  out.loss = add(g, out.ensemble_ce, scale(g, out.lower_ce, model.w));
  return out;
}

Eigen::MatrixXd eval_logits(Model& model, const Tensor& x, int chunk) {
  const int N = x.dim(0);
  const int C = model.num_classes();
  const int64_t stride = x.numel() / std::max(N, 1);
  Eigen::MatrixXd logits(N, C);
  Rng no_dropout(0);  // eval mode consumes no randomness
  for (int start = 0; start < N; start += chunk) {
    const int n = std::min(chunk, N - start);
    std::vector<int> shape = x.shape;
    shape[0] = n;
    Tensor slice(std::move(shape),
                 std::vector<double>(x.data.begin() + start * stride,
                                     x.data.begin() + (start + n) * stride));
    Graph g;
    const auto node = model.forward(g, slice, /*train_mode=*/false, no_dropout);
    const Tensor& v = g.value(node);
    for (int r = 0; r < n; ++r) {
      for (int c = 0; c < C; ++c) logits(start + r, c) = v.at(r, c);
    }
  }
  return logits;
}

namespace {

InnerSolution solve_on_sample(Model& model, const Tensor& sample_x,
                              const std::vector<int>& labels, const ClassPrior& prior,
                              double alpha) {
  InnerProblem prob;
  prob.features = eval_logits(model, sample_x);
  prob.labels = labels;
  prob.log_prior = prior.log_probs;
  prob.alpha = alpha;
  return solve(prob);
}

}  // namespace

void freeze_eval_classifiers(MceModel& model, const Tensor& sample_x,
                             const std::vector<int>& sample_labels) {
  for (int y : sample_labels) {
    if (y < 0 || y >= model.num_classes()) throw DataError("freeze: label out of range");
  }
  std::vector<int> seen(static_cast<size_t>(model.num_classes()), 0);
  for (int y : sample_labels) seen[static_cast<size_t>(y)] = 1;
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) {
    throw DataError("freeze: sample is missing at least one class");
  }
  model.frozen_theta_h =
      solve_on_sample(*model.higher, sample_x, sample_labels, model.prior, model.alpha).params;
  if (model.lower) {
    model.frozen_theta_l =
        solve_on_sample(*model.lower, sample_x, sample_labels, model.prior, model.alpha).params;
  }
}

int argmax_tie_low(const Eigen::VectorXd& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = i;
  }
  return best;
}

std::vector<int> test_predictions(MceModel& model, const Tensor& x) {
  if (!model.frozen()) {
    throw StateError("test_predictions: classifiers are not frozen; train/freeze first");
  }
  const Eigen::MatrixXd z = eval_logits(*model.higher, x);
  const Eigen::MatrixXd o = classifier_logits(*model.frozen_theta_h, z, true);
  std::vector<int> pred(static_cast<size_t>(o.rows()));
  for (Eigen::Index r = 0; r < o.rows(); ++r) {
    pred[static_cast<size_t>(r)] =
        argmax_tie_low(o.row(r).transpose() + model.prior.log_probs);
  }
  return pred;
}

int prune_candidates(const Eigen::VectorXd& lower_probs, const Eigen::VectorXd& higher_logits,
                     double threshold) {
  if (threshold < 0.0 || threshold >= 1.0) throw ConfigError("prune threshold must be in [0,1)");
  int best = -1;
  for (int c = 0; c < higher_logits.size(); ++c) {
    if (lower_probs(c) < threshold) continue;
    if (best < 0 || higher_logits(c) > higher_logits(best)) best = c;
  }
  if (best < 0) return argmax_tie_low(higher_logits);  // everything masked
  return best;
}

const std::vector<double>& prune_threshold_grid() {
  static const std::vector<double> grid = {0.0,  1e-8, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3,
                                           0.003, 0.01, 0.03, 0.1,  0.15, 0.2,  0.25,
                                           0.3,  0.35, 0.4,  0.45, 0.49};
  return grid;
}

double calibrate_threshold(const Eigen::MatrixXd& lower_probs, const std::vector<int>& gold,
                           double max_prune_rate) {
  if (gold.empty() || lower_probs.rows() != static_cast<Eigen::Index>(gold.size())) {
    throw ConfigError("calibrate_threshold: probability/gold size mismatch");
  }
  const double n = static_cast<double>(gold.size());
  double best = 0.0;
  for (double t : prune_threshold_grid()) {
    int pruned = 0;
    for (size_t i = 0; i < gold.size(); ++i) {
      if (lower_probs(static_cast<Eigen::Index>(i), gold[i]) < t) ++pruned;
    }
    if (pruned / n <= max_prune_rate && t > best) best = t;
  }
  return best;
}

double verify_ci_factorization(const std::vector<double>& table, int nh, int nl, int ny) {
  if (static_cast<int>(table.size()) != nh * nl * ny) {
    throw ConfigError("verify_ci_factorization: table size mismatch");
  }
  const auto p = [&](int a, int b, int c) { return table[(static_cast<size_t>(a) * nl + b) * ny + c]; };

  Eigen::VectorXd py = Eigen::VectorXd::Zero(ny);
  Eigen::MatrixXd pxh_y(nh, ny), pxl_y(nl, ny);  // joint marginals P(x, y)
  pxh_y.setZero();
  pxl_y.setZero();
  for (int a = 0; a < nh; ++a) {
    for (int b = 0; b < nl; ++b) {
      for (int c = 0; c < ny; ++c) {
        py(c) += p(a, b, c);
        pxh_y(a, c) += p(a, b, c);
        pxl_y(b, c) += p(a, b, c);
      }
    }
  }

  double max_dev = 0.0;
  for (int a = 0; a < nh; ++a) {
    const double pa = pxh_y.row(a).sum();
    for (int b = 0; b < nl; ++b) {
      const double pb = pxl_y.row(b).sum();
      double pab = 0.0;
      for (int c = 0; c < ny; ++c) pab += p(a, b, c);
      if (pab <= 0.0) continue;

      Eigen::VectorXd exact(ny), ens(ny);
      for (int c = 0; c < ny; ++c) {
        exact(c) = p(a, b, c) / pab;
        const double py_xh = pxh_y(a, c) / pa;
        const double py_xl = pxl_y(b, c) / pb;
        ens(c) = py_xh / py(c) * (py_xl / py(c)) * py(c);
      }
      ens /= ens.sum();
      max_dev = std::max(max_dev, (exact - ens).cwiseAbs().maxCoeff());
    }
  }
  return max_dev;
}

}  // namespace mce
