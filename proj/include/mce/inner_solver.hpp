#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <vector>

namespace mce {

// Residual affine classifier parameters: c(z) = zW + b + z, so the
// zero-parameter classifier passes its input through unchanged.
struct ResidualAffineParams {
  Eigen::MatrixXd W;  // C x C
  Eigen::VectorXd b;  // C

  static ResidualAffineParams zero(int num_classes) {
    ResidualAffineParams p;
    p.W = Eigen::MatrixXd::Zero(num_classes, num_classes);
    p.b = Eigen::VectorXd::Zero(num_classes);
    return p;
  }
  int num_classes() const { return static_cast<int>(b.size()); }
};

// One per-batch classifier fit: features are pre-softmax logits from a
// feature extractor (so the feature dimension equals the class count),
// labels supervise the fit, the class prior enters every prediction in log
// space, and alpha > 0 is the L2 strength that makes the minimizer unique.
struct InnerProblem {
  Eigen::MatrixXd features;             // B x C
  std::vector<int> labels;              // B, values in [0, C)
  Eigen::VectorXd log_prior;            // C
  double alpha = 0.002;
  std::vector<double> example_weights;  // optional; empty = uniform
  // Residual pass-through (c(z) = zW + b + z). The bias-only baseline reuses
  // this solver with a plain affine map (c(z) = zW + b) by clearing it.
  bool residual = true;

  int num_classes() const { return static_cast<int>(features.cols()); }
  int batch_size() const { return static_cast<int>(features.rows()); }
};

// The optimum of one inner problem together with the curvature factorization
// the implicit backward pass needs.
struct InnerSolution {
  ResidualAffineParams params;
  Eigen::LLT<Eigen::MatrixXd> hessian_factor;  // (C^2+C) x (C^2+C), at the optimum
  bool converged = false;
  double grad_norm = 0.0;  // ||grad J(params)||_inf at return
  int newton_iterations = 0;
  Eigen::MatrixXd probs;        // B x C softmax probabilities at the optimum
  Eigen::VectorXd mean_weights; // normalized example weights (sum 1)
};

// Parameters are flattened column-by-column over the stacked matrix
// [W; b^T] (C+1 rows, C columns): index j*(C+1)+i holds W(i,j) for i < C and
// b(j) for i = C. The Hessian, its factorization, and the mixed second
// derivatives in backward_through_argmin all use this layout.
Eigen::VectorXd flatten_params(const ResidualAffineParams& p);
ResidualAffineParams unflatten_params(const Eigen::VectorXd& theta, int num_classes);

// J(theta) = weighted mean of CE(softmax(o_b + log_prior), y_b)
//            + alpha * (||W||_F^2 + ||b||^2),   o_b = z_b W + b (+ z_b).
double inner_objective(const ResidualAffineParams& theta, const InnerProblem& prob);

// Log-space classifier output o = ZW + b (+ Z when residual).
Eigen::MatrixXd classifier_logits(const ResidualAffineParams& theta, const Eigen::MatrixXd& Z,
                                  bool residual = true);

// Damped Newton with backtracking line search on the flattened parameter
// vector. Solves to ||grad||_inf <= tol and caches the Cholesky factor of the
// Hessian at the optimum. Throws SolverError (carrying the last gradient
// norm) if the iteration cap is hit.
InnerSolution solve(const InnerProblem& prob, const ResidualAffineParams* warm_start = nullptr,
                    double tol = 1e-8, int max_iterations = 100);

// Total gradient of an outer loss with respect to the features, combining the
// direct path with the implicit dependence of the argmin parameters on the
// features (implicit function theorem at the stationary point):
//   dLoss/dZ = dloss_dz_direct - (d2J/dZdtheta)^T H^{-1} dloss_dtheta.
Eigen::MatrixXd backward_through_argmin(const InnerSolution& sol, const InnerProblem& prob,
                                        const Eigen::VectorXd& dloss_dtheta,
                                        const Eigen::MatrixXd& dloss_dz_direct);

}  // namespace mce
