#include "mce/inner_solver.hpp"

#include <cmath>
#include <string>

#include "mce/errors.hpp"

namespace mce {

namespace {

// Normalized example weights u (sum 1).
Eigen::VectorXd normalized_weights(const InnerProblem& prob) {
  const int B = prob.batch_size();
  Eigen::VectorXd u(B);
  if (prob.example_weights.empty()) {
    u.setConstant(1.0 / B);
    return u;
  }
  if (static_cast<int>(prob.example_weights.size()) != B) {
    throw ConfigError("inner problem: example weight count mismatch");
  }
  double total = 0.0;
  for (double w : prob.example_weights) {
    if (w < 0.0) throw ConfigError("inner problem: negative example weight");
    total += w;
  }
  if (total <= 0.0) throw ConfigError("inner problem: example weights sum to zero");
  for (int i = 0; i < B; ++i) u(i) = prob.example_weights[static_cast<size_t>(i)] / total;
  return u;
}

void validate(const InnerProblem& prob) {
  const int B = prob.batch_size(), C = prob.num_classes();
  if (B < 1) throw ConfigError("inner problem: empty batch");
  if (prob.alpha <= 0.0) throw ConfigError("inner problem: alpha must be positive");
  if (static_cast<int>(prob.labels.size()) != B) {
    throw ConfigError("inner problem: label count mismatch");
  }
  if (prob.log_prior.size() != C) throw ConfigError("inner problem: prior size mismatch");
  for (int y : prob.labels) {
    if (y < 0 || y >= C) throw DataError("inner problem: label out of range");
  }
}

// [Z, 1]: B x (C+1).
Eigen::MatrixXd with_ones(const Eigen::MatrixXd& Z) {
  Eigen::MatrixXd zh(Z.rows(), Z.cols() + 1);
  zh.leftCols(Z.cols()) = Z;
  zh.col(Z.cols()).setOnes();
  return zh;
}

// Stacked [W; b^T]: (C+1) x C.
Eigen::MatrixXd stack_params(const ResidualAffineParams& p) {
  const int C = p.num_classes();
  Eigen::MatrixXd theta(C + 1, C);
  theta.topRows(C) = p.W;
  theta.row(C) = p.b.transpose();
  return theta;
}

ResidualAffineParams unstack_params(const Eigen::MatrixXd& theta) {
  const int C = static_cast<int>(theta.cols());
  ResidualAffineParams p;
  p.W = theta.topRows(C);
  p.b = theta.row(C).transpose();
  return p;
}

// Row-wise softmax probabilities of o + log_prior.
Eigen::MatrixXd softmax_probs(const Eigen::MatrixXd& o, const Eigen::VectorXd& log_prior) {
  Eigen::MatrixXd p = o.rowwise() + log_prior.transpose();
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

double objective_from_scores(const Eigen::MatrixXd& scores, const std::vector<int>& labels,
                             const Eigen::VectorXd& u) {
  double loss = 0.0;
  for (Eigen::Index r = 0; r < scores.rows(); ++r) {
    const double m = scores.row(r).maxCoeff();
    const double lse = m + std::log((scores.row(r).array() - m).exp().sum());
    loss += u(r) * (lse - scores(r, labels[static_cast<size_t>(r)]));
  }
  return loss;
}

double objective_at(const Eigen::MatrixXd& theta, const InnerProblem& prob,
                    const Eigen::MatrixXd& zhat, const Eigen::VectorXd& u) {
  Eigen::MatrixXd o = zhat * theta;
  if (prob.residual) o += prob.features;
  o.rowwise() += prob.log_prior.transpose();
  return objective_from_scores(o, prob.labels, u) + prob.alpha * theta.squaredNorm();
}

// H = blockdiag_j(Zhat^T diag(u .* P_{:,j}) Zhat) - M^T M + 2*alpha*I with
// M rows sqrt(u_b) * (p_b kron zhat_b), in the column-major parameter layout.
Eigen::MatrixXd assemble_hessian(const InnerProblem& prob, const Eigen::MatrixXd& zhat,
                                 const Eigen::MatrixXd& P, const Eigen::VectorXd& u) {
  const int B = prob.batch_size(), C = prob.num_classes();
  const int R = C + 1, D = R * C;
  Eigen::MatrixXd H = Eigen::MatrixXd::Zero(D, D);
  for (int j = 0; j < C; ++j) {
    const Eigen::VectorXd w = u.array() * P.col(j).array();
    H.block(j * R, j * R, R, R).noalias() = zhat.transpose() * w.asDiagonal() * zhat;
  }
  Eigen::MatrixXd M(B, D);
  for (int b = 0; b < B; ++b) {
    const double s = std::sqrt(u(b));
    for (int j = 0; j < C; ++j) {
      M.row(b).segment(j * R, R) = (s * P(b, j)) * zhat.row(b);
    }
  }
  H.noalias() -= M.transpose() * M;
  H.diagonal().array() += 2.0 * prob.alpha;
  return H;
}

}  // namespace

Eigen::VectorXd flatten_params(const ResidualAffineParams& p) {
  const int C = p.num_classes(), R = C + 1;
  Eigen::VectorXd theta(R * C);
  for (int j = 0; j < C; ++j) {
    theta.segment(j * R, C) = p.W.col(j);
    theta(j * R + C) = p.b(j);
  }
  return theta;
}

ResidualAffineParams unflatten_params(const Eigen::VectorXd& theta, int num_classes) {
  const int C = num_classes, R = C + 1;
  if (theta.size() != R * C) throw ConfigError("unflatten_params: size mismatch");
  ResidualAffineParams p = ResidualAffineParams::zero(C);
  for (int j = 0; j < C; ++j) {
    p.W.col(j) = theta.segment(j * R, C);
    p.b(j) = theta(j * R + C);
  }
  return p;
}

double inner_objective(const ResidualAffineParams& theta, const InnerProblem& prob) {
  validate(prob);
  if (theta.num_classes() != prob.num_classes()) {
    throw ConfigError("inner_objective: parameter/feature dimension mismatch");
  }
  return objective_at(stack_params(theta), prob, with_ones(prob.features),
                      normalized_weights(prob));
}

Eigen::MatrixXd classifier_logits(const ResidualAffineParams& theta, const Eigen::MatrixXd& Z,
                                  bool residual) {
  Eigen::MatrixXd o = Z * theta.W;
  o.rowwise() += theta.b.transpose();
  if (residual) o += Z;
  return o;
}

InnerSolution solve(const InnerProblem& prob, const ResidualAffineParams* warm_start, double tol,
                    int max_iterations) {
  validate(prob);
  const int C = prob.num_classes();
  const Eigen::MatrixXd zhat = with_ones(prob.features);
  const Eigen::VectorXd u = normalized_weights(prob);

  Eigen::MatrixXd theta = warm_start != nullptr && warm_start->num_classes() == C
                              ? stack_params(*warm_start)
                              : Eigen::MatrixXd::Zero(C + 1, C);

  double grad_norm = std::numeric_limits<double>::infinity();
  for (int iter = 0; iter <= max_iterations; ++iter) {
    Eigen::MatrixXd o = zhat * theta;
    if (prob.residual) o += prob.features;
    const Eigen::MatrixXd P = softmax_probs(o, prob.log_prior);

    // G rows: u_b * (p_b - e_{y_b}).
    Eigen::MatrixXd G = P;
    for (int b = 0; b < prob.batch_size(); ++b) G(b, prob.labels[static_cast<size_t>(b)]) -= 1.0;
    G.array().colwise() *= u.array();
    Eigen::MatrixXd grad_mat = zhat.transpose() * G + 2.0 * prob.alpha * theta;

    grad_norm = grad_mat.cwiseAbs().maxCoeff();
    Eigen::MatrixXd H = assemble_hessian(prob, zhat, P, u);
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success) {
      throw SolverError("inner solve: Hessian factorization failed", grad_norm);
    }
    if (grad_norm <= tol) {
      InnerSolution sol;
      sol.params = unstack_params(theta);
      sol.hessian_factor = std::move(llt);
      sol.converged = true;
      sol.grad_norm = grad_norm;
      sol.newton_iterations = iter;
      sol.probs = P;
      sol.mean_weights = u;
      return sol;
    }
    if (iter == max_iterations) break;

    const int R = C + 1;
    Eigen::VectorXd grad(R * C), step_flat;
    for (int j = 0; j < C; ++j) grad.segment(j * R, R) = grad_mat.col(j);
    step_flat = -llt.solve(grad);
    Eigen::MatrixXd step(R, C);
    for (int j = 0; j < C; ++j) step.col(j) = step_flat.segment(j * R, R);

    const double j0 = objective_from_scores(
        (o.rowwise() + prob.log_prior.transpose()), prob.labels, u) +
        prob.alpha * theta.squaredNorm();
    const double slope = grad.dot(step_flat);
    double t = 1.0;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      if (objective_at(theta + t * step, prob, zhat, u) <= j0 + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      throw SolverError("inner solve: line search failed", grad_norm);
    }
    theta += t * step;
  }
  throw SolverError("inner solve: no convergence in " + std::to_string(max_iterations) +
                        " Newton iterations (||grad||_inf = " + std::to_string(grad_norm) + ")",
                    grad_norm);
}

Eigen::MatrixXd backward_through_argmin(const InnerSolution& sol, const InnerProblem& prob,
                                        const Eigen::VectorXd& dloss_dtheta,
                                        const Eigen::MatrixXd& dloss_dz_direct) {
  if (!sol.converged) throw StateError("backward_through_argmin: solution not converged");
  const int B = prob.batch_size(), C = prob.num_classes(), R = C + 1;
  if (dloss_dtheta.size() != R * C) {
    throw ConfigError("backward_through_argmin: dloss_dtheta size mismatch");
  }
  if (dloss_dtheta.isZero(0.0)) return dloss_dz_direct;

  const Eigen::VectorXd v = sol.hessian_factor.solve(dloss_dtheta);
  Eigen::MatrixXd V(R, C);
  for (int j = 0; j < C; ++j) V.col(j) = v.segment(j * R, R);

  // Mixed second derivative contracted with v, derived from
  // grad_theta J = Zhat^T diag(u) (P - Y) + 2 alpha Theta:
  //   term1: the Zhat factor's dependence on z_b  ->  (p_b - e_y) V_Z^T
  //   term2: the softmax's dependence on z_b      ->  (A_b q_b) (W + I)^T
  // with q_b = zhat_b V and A_b = diag(p_b) - p_b p_b^T.
  const Eigen::MatrixXd zhat = with_ones(prob.features);
  const Eigen::MatrixXd Q = zhat * V;  // B x C

  Eigen::MatrixXd Graw = sol.probs;
  for (int b = 0; b < B; ++b) Graw(b, prob.labels[static_cast<size_t>(b)]) -= 1.0;

  Eigen::MatrixXd Rmat(B, C);
  for (int b = 0; b < B; ++b) {
    const double dot = sol.probs.row(b).dot(Q.row(b));
    Rmat.row(b) = sol.probs.row(b).cwiseProduct(Q.row(b)) - dot * sol.probs.row(b);
  }

  Eigen::MatrixXd wtil = sol.params.W;
  if (prob.residual) wtil.diagonal().array() += 1.0;

  Eigen::MatrixXd implicit = Graw * V.topRows(C).transpose() + Rmat * wtil.transpose();
  implicit.array().colwise() *= sol.mean_weights.array();
  return dloss_dz_direct - implicit;
}

}  // namespace mce
