#pragma once

// Random small feasible QPs for solver-vs-oracle comparisons.

#include <Eigen/Dense>

#include <random>

#include "lpvmpc/qp_solver.hpp"

namespace testsupport {

/// Strictly convex QP with n <= max_n variables. Even draws use a pure variable
/// box (A = I); odd draws use up to max_m general two-sided rows. Bounds are
/// built around a random interior point so the problem is always feasible, and
/// roughly one bound in six is infinite.
inline lpvmpc::DenseQp random_box_qp(std::mt19937& rng, int index, int max_n = 4, int max_m = 6) {
  std::uniform_int_distribution<int> n_dist(1, max_n);
  std::uniform_real_distribution<double> u(-1.0, 1.0), width(0.0, 2.0);
  std::uniform_int_distribution<int> inf_draw(0, 5);
  const int n = n_dist(rng);
  const int m = index % 2 == 0 ? n : std::uniform_int_distribution<int>(1, max_m)(rng);

  Eigen::MatrixXd r(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) r(i, j) = u(rng);
  lpvmpc::DenseQp qp;
  qp.h = r.transpose() * r + 0.1 * Eigen::MatrixXd::Identity(n, n);
  qp.g.resize(n);
  for (int i = 0; i < n; ++i) qp.g(i) = 3.0 * u(rng);
  if (index % 2 == 0) {
    qp.a_ineq = Eigen::MatrixXd::Identity(n, n);
  } else {
    qp.a_ineq.resize(m, n);
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) qp.a_ineq(i, j) = u(rng);
  }
  Eigen::VectorXd center(n);
  for (int i = 0; i < n; ++i) center(i) = 0.5 * u(rng);
  const Eigen::VectorXd ac = qp.a_ineq * center;
  qp.lo.resize(m);
  qp.hi.resize(m);
  for (int i = 0; i < m; ++i) {
    qp.lo(i) = inf_draw(rng) == 0 ? -lpvmpc::kQpInfinity : ac(i) - width(rng);
    qp.hi(i) = inf_draw(rng) == 0 ? lpvmpc::kQpInfinity : ac(i) + width(rng);
  }
  return qp;
}

}  // namespace testsupport
