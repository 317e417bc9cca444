#include "support/reference_mce.hpp"

#include <cmath>

namespace mce::testref {

namespace {

Eigen::MatrixXd scores_of(const RefTheta& theta, const Eigen::MatrixXd& Z,
                          const Eigen::VectorXd& log_prior) {
  Eigen::MatrixXd s = Z * theta.W + Z;
  s.rowwise() += theta.b.transpose();
  s.rowwise() += log_prior.transpose();
  return s;
}

Eigen::MatrixXd softmax_rows(const Eigen::MatrixXd& s) {
  Eigen::MatrixXd p(s.rows(), s.cols());
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    Eigen::RowVectorXd e = (s.row(r).array() - m).exp();
    p.row(r) = e / e.sum();
  }
  return p;
}

double mean_ce(const Eigen::MatrixXd& s, const std::vector<int>& labels) {
  double total = 0.0;
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double m = s.row(r).maxCoeff();
    const double lse = m + std::log((s.row(r).array() - m).exp().sum());
    total += lse - s(r, labels[static_cast<size_t>(r)]);
  }
  return total / static_cast<double>(s.rows());
}

}  // namespace

double objective(const RefTheta& theta, const Eigen::MatrixXd& Z, const std::vector<int>& labels,
                 const Eigen::VectorXd& log_prior, double alpha) {
  return mean_ce(scores_of(theta, Z, log_prior), labels) +
         alpha * (theta.W.squaredNorm() + theta.b.squaredNorm());
}

RefTheta solve_gd(const Eigen::MatrixXd& Z, const std::vector<int>& labels,
                  const Eigen::VectorXd& log_prior, double alpha, long steps, double lr) {
  const int B = static_cast<int>(Z.rows()), C = static_cast<int>(Z.cols());
  RefTheta theta{Eigen::MatrixXd::Zero(C, C), Eigen::VectorXd::Zero(C)};
  for (long step = 0; step < steps; ++step) {
    const Eigen::MatrixXd p = softmax_rows(scores_of(theta, Z, log_prior));
    Eigen::MatrixXd g = p;
    for (int b = 0; b < B; ++b) g(b, labels[static_cast<size_t>(b)]) -= 1.0;
    g /= static_cast<double>(B);
    const Eigen::MatrixXd grad_w = Z.transpose() * g + 2.0 * alpha * theta.W;
    const Eigen::VectorXd grad_b = g.colwise().sum().transpose() + 2.0 * alpha * theta.b;
    theta.W -= lr * grad_w;
    theta.b -= lr * grad_b;
  }
  return theta;
}

double mce_loss(const Eigen::MatrixXd& Zh, const Eigen::MatrixXd& Zl,
                const std::vector<int>& labels, const Eigen::VectorXd& log_prior, double alpha,
                double w, long steps, double lr) {
  const RefTheta th = solve_gd(Zh, labels, log_prior, alpha, steps, lr);
  const RefTheta tl = solve_gd(Zl, labels, log_prior, alpha, steps, lr);
  Eigen::MatrixXd oh = Zh * th.W + Zh;
  oh.rowwise() += th.b.transpose();
  Eigen::MatrixXd ol = Zl * tl.W + Zl;
  ol.rowwise() += tl.b.transpose();
  Eigen::MatrixXd ens = oh + ol;
  ens.rowwise() += log_prior.transpose();
  Eigen::MatrixXd low = ol;
  low.rowwise() += log_prior.transpose();
  return mean_ce(ens, labels) + w * mean_ce(low, labels);
}

}  // namespace mce::testref
