#pragma once

#include <Eigen/Core>
#include <vector>

// Straight-line reimplementation of the per-batch training loss used as an
// independent oracle. The inner fit runs plain gradient descent rather than
// the library's Newton solver, and the softmax/cross-entropy arithmetic is
// written out from scratch.
namespace mce::testref {

struct RefTheta {
  Eigen::MatrixXd W;
  Eigen::VectorXd b;
};

RefTheta solve_gd(const Eigen::MatrixXd& Z, const std::vector<int>& labels,
                  const Eigen::VectorXd& log_prior, double alpha, long steps, double lr);

double objective(const RefTheta& theta, const Eigen::MatrixXd& Z, const std::vector<int>& labels,
                 const Eigen::VectorXd& log_prior, double alpha);

// Loss(batch) = CE(softmax(o_h + o_l + log p), y) + w * CE(softmax(o_l + log p), y)
// with o = Z W* + b* + Z from the gradient-descent inner fits.
double mce_loss(const Eigen::MatrixXd& Zh, const Eigen::MatrixXd& Zl,
                const std::vector<int>& labels, const Eigen::VectorXd& log_prior, double alpha,
                double w, long steps, double lr);

}  // namespace mce::testref
