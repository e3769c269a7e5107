#pragma once

// Exhaustive active-set reference solver for small dense QPs
//   min 1/2 z'Hz + g'z  s.t.  lo <= A z <= hi.
// Every row is tried inactive, at its lower bound and at its upper bound; each
// guess is solved as an equality-constrained KKT system and the primal feasible
// candidate with the smallest objective wins. Only usable for m of about 8 or less.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

namespace testsupport {

struct OracleResult {
  Eigen::VectorXd z;
  double objective = std::numeric_limits<double>::infinity();
};

inline std::optional<OracleResult> brute_force_qp(const Eigen::MatrixXd& h, const Eigen::VectorXd& g,
                                                  const Eigen::MatrixXd& a, const Eigen::VectorXd& lo,
                                                  const Eigen::VectorXd& hi, double big = 1e19, double feas_tol = 1e-9) {
  const Eigen::Index n = h.rows();
  const Eigen::Index m = a.rows();
  long long combos = 1;
  for (Eigen::Index i = 0; i < m; ++i) combos *= 3;

  std::optional<OracleResult> best;
  for (long long code = 0; code < combos; ++code) {
    std::vector<Eigen::Index> rows;
    std::vector<double> targets;
    long long c = code;
    bool usable = true;
    for (Eigen::Index i = 0; i < m; ++i, c /= 3) {
      const int choice = static_cast<int>(c % 3);
      if (choice == 1) {
        if (lo(i) <= -big) usable = false;
        rows.push_back(i);
        targets.push_back(lo(i));
      } else if (choice == 2) {
        if (hi(i) >= big || hi(i) == lo(i)) usable = false;  // equality rows are covered by choice 1
        rows.push_back(i);
        targets.push_back(hi(i));
      }
    }
    const auto k = static_cast<Eigen::Index>(rows.size());
    if (!usable || k > n) continue;

    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + k, n + k);
    Eigen::VectorXd rhs(n + k);
    kkt.topLeftCorner(n, n) = h;
    rhs.head(n) = -g;
    for (Eigen::Index r = 0; r < k; ++r) {
      kkt.block(n + r, 0, 1, n) = a.row(rows[static_cast<std::size_t>(r)]);
      kkt.block(0, n + r, n, 1) = a.row(rows[static_cast<std::size_t>(r)]).transpose();
      rhs(n + r) = targets[static_cast<std::size_t>(r)];
    }
    const Eigen::FullPivLU<Eigen::MatrixXd> lu(kkt);
    if (!lu.isInvertible()) continue;
    const Eigen::VectorXd sol = lu.solve(rhs);
    const Eigen::VectorXd z = sol.head(n);
    const Eigen::VectorXd az = a * z;
    bool feasible = true;
    for (Eigen::Index i = 0; i < m && feasible; ++i) {
      const double scale = 1.0 + std::abs(az(i));
      if (az(i) < lo(i) - feas_tol * scale || az(i) > hi(i) + feas_tol * scale) feasible = false;
    }
    if (!feasible) continue;
    const double obj = 0.5 * z.dot(h * z) + g.dot(z);
    if (!best || obj < best->objective) best = OracleResult{z, obj};
  }
  return best;
}

}  // namespace testsupport
