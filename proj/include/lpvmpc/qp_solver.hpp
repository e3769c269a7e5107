#pragma once

// Dense convex QP solver for problems of the form
//
//   minimize    1/2 z'Hz + g'z
//   subject to  lo <= A z <= hi
//
// by ADMM operator splitting: a regularized linear solve for z, projection of
// the constraint copy onto [lo, hi] and a scaled dual update. The problem is
// Ruiz-equilibrated before iterating; residuals and tolerances are always
// evaluated on the unscaled data. Once the iterates meet the tolerances the
// guessed active set is solved exactly ("polishing").
//
// Dual sign convention: the Lagrangian is 1/2 z'Hz + g'z + lambda'(Az), so
// lambda_i > 0 on an active upper bound and lambda_i < 0 on an active lower one.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <cmath>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <string>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/text_io.hpp"

namespace lpvmpc {

/// Bounds at or beyond this magnitude are treated as infinite.
inline constexpr double kQpInfinity = 1e20;

struct DenseQp {
  Eigen::MatrixXd h;
  Eigen::VectorXd g;
  Eigen::MatrixXd a_ineq;
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;

  Eigen::Index variables() const { return h.rows(); }
  Eigen::Index constraints() const { return a_ineq.rows(); }

  double objective(const Eigen::VectorXd& z) const { return 0.5 * z.dot(h * z) + g.dot(z); }

  void validate() const {
    const auto n = h.rows();
    if (h.cols() != n || g.size() != n) throw ValidationError("QP: Hessian/gradient dimension mismatch");
    if (a_ineq.cols() != n && a_ineq.rows() > 0) throw ValidationError("QP: constraint matrix has wrong column count");
    if (lo.size() != a_ineq.rows() || hi.size() != a_ineq.rows()) throw ValidationError("QP: bound dimension mismatch");
    if (!h.allFinite() || !g.allFinite() || !a_ineq.allFinite()) throw ValidationError("QP: non-finite data");
    if (n > 0 && (h - h.transpose()).cwiseAbs().maxCoeff() > 1e-10) throw ValidationError("QP: Hessian not symmetric");
    for (Eigen::Index i = 0; i < lo.size(); ++i) {
      if (std::isnan(lo(i)) || std::isnan(hi(i)) || lo(i) > hi(i)) throw ValidationError("QP: lo > hi");
    }
  }
};

enum class QpStatus { solved, max_iter, infeasible };

inline const char* to_string(QpStatus s) {
  switch (s) {
    case QpStatus::solved: return "solved";
    case QpStatus::max_iter: return "max_iter";
    case QpStatus::infeasible: return "infeasible";
  }
  return "unknown";
}

struct QpSolution {
  Eigen::VectorXd z;
  Eigen::VectorXd lambda;
  QpStatus status = QpStatus::max_iter;
  int iterations = 0;
  double primal_res = std::numeric_limits<double>::infinity();
  double dual_res = std::numeric_limits<double>::infinity();
  bool polished = false;
};

struct QpSettings {
  double rho = 0.1;
  double sigma = 1e-6;
  double alpha = 1.6;  ///< over-relaxation
  double eps_abs = 1e-6;
  double eps_rel = 1e-6;
  double eps_infeasible = 1e-6;
  int max_iter = 4000;
  int rho_update_interval = 50;
  double regularization = 1e-8;
  int scaling_iterations = 10;
  bool polish = true;
};

struct KktResiduals {
  double stationarity = 0.0;
  double primal_feasibility = 0.0;
  double complementarity = 0.0;
};

inline KktResiduals kkt_residuals(const DenseQp& qp, const QpSolution& sol) {
  KktResiduals r;
  Eigen::VectorXd grad = qp.h * sol.z + qp.g;
  if (qp.constraints() > 0) grad += qp.a_ineq.transpose() * sol.lambda;
  r.stationarity = grad.size() ? grad.cwiseAbs().maxCoeff() : 0.0;
  const Eigen::VectorXd az = qp.constraints() > 0 ? Eigen::VectorXd(qp.a_ineq * sol.z) : Eigen::VectorXd();
  for (Eigen::Index i = 0; i < qp.constraints(); ++i) {
    r.primal_feasibility = std::max({r.primal_feasibility, qp.lo(i) - az(i), az(i) - qp.hi(i)});
    const double l = sol.lambda(i);
    if (l > 0.0) r.complementarity = std::max(r.complementarity, l * std::abs(qp.hi(i) - az(i)));
    if (l < 0.0) r.complementarity = std::max(r.complementarity, -l * std::abs(az(i) - qp.lo(i)));
  }
  return r;
}

class QpSolver {
 public:
  explicit QpSolver(QpSettings settings = {}) : settings_(settings) {}

  const QpSettings& settings() const { return settings_; }
  QpSettings& settings() { return settings_; }

  /// Number of matrix factorizations performed so far (cache diagnostics).
  int factorizations() const { return factorizations_; }

  QpSolution solve(const DenseQp& qp, const QpSolution* warm = nullptr) {
    qp.validate();
    const Eigen::Index n = qp.variables();
    const Eigen::Index m = qp.constraints();
    prepare(qp);

    const Eigen::VectorXd& d = scale_d_;
    const Eigen::VectorXd& e = scale_e_;
    const double c = cost_scale_;
    Eigen::VectorXd gs = c * d.cwiseProduct(qp.g);
    Eigen::VectorXd los(m), his(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      los(i) = qp.lo(i) <= -kQpInfinity ? -std::numeric_limits<double>::infinity() : e(i) * qp.lo(i);
      his(i) = qp.hi(i) >= kQpInfinity ? std::numeric_limits<double>::infinity() : e(i) * qp.hi(i);
    }
    set_rho_vector(qp, rho_);
    refactor_if_needed();

    Eigen::VectorXd x = Eigen::VectorXd::Zero(n);
    Eigen::VectorXd y = Eigen::VectorXd::Zero(m);
    if (warm && warm->z.size() == n) x = warm->z.cwiseQuotient(d);
    if (warm && warm->lambda.size() == m) y = c * warm->lambda.cwiseQuotient(e);
    Eigen::VectorXd z = as_ * x;

    QpSolution best;
    best.z = Eigen::VectorXd::Zero(n);
    best.lambda = Eigen::VectorXd::Zero(m);
    double best_score = std::numeric_limits<double>::infinity();

    Eigen::VectorXd x_tilde(n), z_tilde(m), z_relax(m), z_next(m), y_next(m), rhs(n);
    for (int iter = 1; iter <= settings_.max_iter; ++iter) {
      rhs = settings_.sigma * x - gs;
      if (m > 0) rhs += as_.transpose() * (rho_vec_.cwiseProduct(z) - y);
      x_tilde = kkt_.solve(rhs);
      z_tilde = as_ * x_tilde;
      x = settings_.alpha * x_tilde + (1.0 - settings_.alpha) * x;
      z_relax = settings_.alpha * z_tilde + (1.0 - settings_.alpha) * z;
      z_next = (z_relax + y.cwiseQuotient(rho_vec_)).cwiseMax(los).cwiseMin(his);
      y_next = y + rho_vec_.cwiseProduct(z_relax - z_next);
      const Eigen::VectorXd delta_y = y_next - y;
      z = z_next;
      y = y_next;

      const bool check = iter <= 10 || iter % 5 == 0 || iter == settings_.max_iter;
      if (!check) continue;

      // Unscaled iterates.
      const Eigen::VectorXd xu = d.cwiseProduct(x);
      const Eigen::VectorXd zu = z.cwiseQuotient(e);
      const Eigen::VectorXd yu = e.cwiseProduct(y) / c;
      const Residuals res = residuals(qp, xu, zu, yu);
      const double score = std::max(res.primal / res.primal_tol, res.dual / res.dual_tol);
      if (score < best_score) {
        best_score = score;
        best.z = xu;
        best.lambda = yu;
        best.primal_res = res.primal;
        best.dual_res = res.dual;
        best.iterations = iter;
      }
      if (res.primal <= res.primal_tol && res.dual <= res.dual_tol) {
        QpSolution out;
        out.z = xu;
        out.lambda = yu;
        out.status = QpStatus::solved;
        out.iterations = iter;
        out.primal_res = res.primal;
        out.dual_res = res.dual;
        if (settings_.polish && m > 0) polish(qp, out);
        return out;
      }
      if (m > 0 && primal_infeasible(qp, e.cwiseProduct(delta_y) / c)) {
        QpSolution out;
        out.z = xu;
        out.lambda = yu;
        out.status = QpStatus::infeasible;
        out.iterations = iter;
        out.primal_res = res.primal;
        out.dual_res = res.dual;
        return out;
      }
      if (settings_.rho_update_interval > 0 && iter % settings_.rho_update_interval == 0 && m > 0) {
        adapt_rho(qp, x, z, y, gs);
      }
    }
    best.status = QpStatus::max_iter;
    best.iterations = settings_.max_iter;
    return best;
  }

 private:
  struct Residuals {
    double primal = 0.0;
    double dual = 0.0;
    double primal_tol = 0.0;
    double dual_tol = 0.0;
  };

  Residuals residuals(const DenseQp& qp, const Eigen::VectorXd& x, const Eigen::VectorXd& z,
                      const Eigen::VectorXd& y) const {
    auto inf_norm = [](const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; };
    Residuals r;
    const Eigen::VectorXd hx = qp.h * x;
    Eigen::VectorXd ax = Eigen::VectorXd::Zero(qp.constraints());
    Eigen::VectorXd aty = Eigen::VectorXd::Zero(qp.variables());
    if (qp.constraints() > 0) {
      ax = qp.a_ineq * x;
      aty = qp.a_ineq.transpose() * y;
    }
    r.primal = inf_norm(ax - z);
    r.dual = inf_norm(hx + qp.g + aty);
    r.primal_tol = settings_.eps_abs + settings_.eps_rel * std::max(inf_norm(ax), inf_norm(z));
    r.dual_tol = settings_.eps_abs + settings_.eps_rel * std::max({inf_norm(hx), inf_norm(aty), inf_norm(qp.g)});
    return r;
  }

  bool primal_infeasible(const DenseQp& qp, const Eigen::VectorXd& dy) const {
    const double norm = dy.cwiseAbs().maxCoeff();
    if (norm < 1e-12) return false;
    const double eps = settings_.eps_infeasible * norm;
    if ((qp.a_ineq.transpose() * dy).cwiseAbs().maxCoeff() > eps) return false;
    double support = 0.0;
    for (Eigen::Index i = 0; i < dy.size(); ++i) {
      if (dy(i) > 0.0) {
        if (qp.hi(i) >= kQpInfinity) return false;
        support += qp.hi(i) * dy(i);
      } else if (dy(i) < 0.0) {
        if (qp.lo(i) <= -kQpInfinity) return false;
        support += qp.lo(i) * dy(i);
      }
    }
    return support < -eps;
  }

  // Scaling and factorization are reused while H and A stay bit-identical.
  void prepare(const DenseQp& qp) {
    const bool same = cached_ && cached_h_.rows() == qp.h.rows() && cached_a_.rows() == qp.a_ineq.rows() &&
                      cached_a_.cols() == qp.a_ineq.cols() && cached_h_ == qp.h && cached_a_ == qp.a_ineq;
    if (same) return;
    cached_ = true;
    cached_h_ = qp.h;
    cached_a_ = qp.a_ineq;
    rho_ = settings_.rho;
    factored_rho_.resize(0);
    equilibrate(qp);
  }

  void equilibrate(const DenseQp& qp) {
    const Eigen::Index n = qp.variables();
    const Eigen::Index m = qp.constraints();
    constexpr double kMin = 1e-4, kMax = 1e4;
    auto limit = [&](double v) { return v < kMin ? 1.0 : std::min(v, kMax); };
    scale_d_ = Eigen::VectorXd::Ones(n);
    scale_e_ = Eigen::VectorXd::Ones(m);
    cost_scale_ = 1.0;
    hs_ = qp.h;
    as_ = qp.a_ineq.rows() > 0 ? qp.a_ineq : Eigen::MatrixXd::Zero(0, n);
    Eigen::VectorXd gs = qp.g;
    for (int it = 0; it < settings_.scaling_iterations; ++it) {
      Eigen::VectorXd dd(n), ee(m);
      for (Eigen::Index j = 0; j < n; ++j) {
        double norm = hs_.col(j).cwiseAbs().maxCoeff();
        if (m > 0) norm = std::max(norm, as_.col(j).cwiseAbs().maxCoeff());
        dd(j) = 1.0 / std::sqrt(limit(norm));
      }
      for (Eigen::Index i = 0; i < m; ++i) ee(i) = 1.0 / std::sqrt(limit(as_.row(i).cwiseAbs().maxCoeff()));
      hs_ = dd.asDiagonal() * hs_ * dd.asDiagonal();
      if (m > 0) as_ = ee.asDiagonal() * as_ * dd.asDiagonal();
      gs = dd.cwiseProduct(gs);
      scale_d_ = scale_d_.cwiseProduct(dd);
      scale_e_ = scale_e_.cwiseProduct(ee);
      double mean_col = 0.0;
      for (Eigen::Index j = 0; j < n; ++j) mean_col += hs_.col(j).cwiseAbs().maxCoeff();
      mean_col = n > 0 ? mean_col / static_cast<double>(n) : 1.0;
      const double gamma = 1.0 / limit(std::max(mean_col, gs.size() ? gs.cwiseAbs().maxCoeff() : 0.0));
      hs_ *= gamma;
      gs *= gamma;
      cost_scale_ *= gamma;
    }
  }

  void set_rho_vector(const DenseQp& qp, double rho) {
    const Eigen::Index m = qp.constraints();
    Eigen::VectorXd v(m);
    for (Eigen::Index i = 0; i < m; ++i) {
      const bool lower_inf = qp.lo(i) <= -kQpInfinity;
      const bool upper_inf = qp.hi(i) >= kQpInfinity;
      if (lower_inf && upper_inf) v(i) = 1e-6;
      else if (qp.hi(i) - qp.lo(i) < 1e-12) v(i) = 1e3 * rho;
      else v(i) = rho;
    }
    rho_vec_ = v;
  }

  void refactor_if_needed() {
    if (factored_rho_.size() == rho_vec_.size() && factored_rho_ == rho_vec_ && factored_) return;
    Eigen::MatrixXd k = hs_;
    k.diagonal().array() += settings_.sigma + settings_.regularization;
    if (as_.rows() > 0) k.noalias() += as_.transpose() * rho_vec_.asDiagonal() * as_;
    kkt_.compute(k);
    if (kkt_.info() != Eigen::Success) {
      k.diagonal().array() += 1e-6 * std::max(1.0, k.diagonal().cwiseAbs().maxCoeff());
      kkt_.compute(k);
    }
    factored_rho_ = rho_vec_;
    factored_ = true;
    ++factorizations_;
  }

  void adapt_rho(const DenseQp& qp, const Eigen::VectorXd& x, const Eigen::VectorXd& z, const Eigen::VectorXd& y,
                 const Eigen::VectorXd& gs) {
    auto inf_norm = [](const Eigen::VectorXd& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; };
    const Eigen::VectorXd ax = as_ * x;
    const Eigen::VectorXd hx = hs_ * x;
    const Eigen::VectorXd aty = as_.transpose() * y;
    const double prim = inf_norm(ax - z) / (std::max(inf_norm(ax), inf_norm(z)) + 1e-30);
    const double dual = inf_norm(hx + gs + aty) / (std::max({inf_norm(hx), inf_norm(aty), inf_norm(gs)}) + 1e-30);
    double rho_new = rho_ * std::sqrt(prim / (dual + 1e-30));
    rho_new = std::clamp(rho_new, 1e-6, 1e6);
    if (rho_new > 5.0 * rho_ || rho_new < 0.2 * rho_) {
      rho_ = rho_new;
      set_rho_vector(qp, rho_);
      refactor_if_needed();
    }
  }

  // Exact solve of the equality-constrained problem on the guessed active set.
  void polish(const DenseQp& qp, QpSolution& sol) const {
    const Eigen::Index n = qp.variables();
    const Eigen::Index m = qp.constraints();
    const Eigen::VectorXd az = qp.a_ineq * sol.z;
    std::vector<Eigen::Index> rows;
    std::vector<double> targets;
    std::vector<int> side;  // -1 lower, +1 upper
    for (Eigen::Index i = 0; i < m; ++i) {
      const bool lower = qp.lo(i) > -kQpInfinity && az(i) - qp.lo(i) < -sol.lambda(i);
      const bool upper = qp.hi(i) < kQpInfinity && qp.hi(i) - az(i) < sol.lambda(i);
      if (upper) {
        rows.push_back(i);
        targets.push_back(qp.hi(i));
        side.push_back(+1);
      } else if (lower) {
        rows.push_back(i);
        targets.push_back(qp.lo(i));
        side.push_back(-1);
      }
    }
    const auto k = static_cast<Eigen::Index>(rows.size());
    if (k > n) return;
    Eigen::MatrixXd kkt = Eigen::MatrixXd::Zero(n + k, n + k);
    Eigen::VectorXd rhs(n + k);
    kkt.topLeftCorner(n, n) = qp.h;
    rhs.head(n) = -qp.g;
    for (Eigen::Index r = 0; r < k; ++r) {
      kkt.block(n + r, 0, 1, n) = qp.a_ineq.row(rows[static_cast<std::size_t>(r)]);
      kkt.block(0, n + r, n, 1) = qp.a_ineq.row(rows[static_cast<std::size_t>(r)]).transpose();
      rhs(n + r) = targets[static_cast<std::size_t>(r)];
    }
    Eigen::MatrixXd reg = kkt;
    constexpr double kDelta = 1e-9;
    reg.diagonal().head(n).array() += kDelta;
    reg.diagonal().tail(k).array() -= kDelta;
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(reg);
    Eigen::VectorXd sol_vec = lu.solve(rhs);
    for (int refine = 0; refine < 3; ++refine) sol_vec += lu.solve(rhs - kkt * sol_vec);
    if (!sol_vec.allFinite()) return;

    QpSolution cand = sol;
    cand.z = sol_vec.head(n);
    cand.lambda = Eigen::VectorXd::Zero(m);
    for (Eigen::Index r = 0; r < k; ++r) {
      const double l = sol_vec(n + r);
      if (side[static_cast<std::size_t>(r)] * l < -settings_.eps_abs) return;  // wrong multiplier sign
      cand.lambda(rows[static_cast<std::size_t>(r)]) = l;
    }
    const Eigen::VectorXd az_c = qp.a_ineq * cand.z;
    double prim = 0.0;
    for (Eigen::Index i = 0; i < m; ++i) prim = std::max({prim, qp.lo(i) - az_c(i), az_c(i) - qp.hi(i)});
    const double dual = (qp.h * cand.z + qp.g + qp.a_ineq.transpose() * cand.lambda).cwiseAbs().maxCoeff();
    if (prim <= sol.primal_res + settings_.eps_abs && dual <= sol.dual_res + settings_.eps_abs) {
      cand.primal_res = prim;
      cand.dual_res = dual;
      cand.polished = true;
      sol = cand;
    }
  }

  QpSettings settings_;
  bool cached_ = false;
  Eigen::MatrixXd cached_h_, cached_a_;
  Eigen::MatrixXd hs_, as_;
  Eigen::VectorXd scale_d_, scale_e_;
  double cost_scale_ = 1.0;
  double rho_ = 0.1;
  Eigen::VectorXd rho_vec_, factored_rho_;
  bool factored_ = false;
  Eigen::LLT<Eigen::MatrixXd> kkt_;
  int factorizations_ = 0;
};

/// Plain-text dump of a QP: dimensions, then H, g, A, lo, hi row by row.
inline void write_qp_text(const DenseQp& qp, std::ostream& os) {
  auto row = [&](const auto& v) {
    for (Eigen::Index j = 0; j < v.size(); ++j) {
      if (j) os << ' ';
      text::write_double(os, v(j));
    }
    os << '\n';
  };
  os << "n " << qp.variables() << " m " << qp.constraints() << '\n';
  os << "H\n";
  for (Eigen::Index i = 0; i < qp.h.rows(); ++i) row(Eigen::VectorXd(qp.h.row(i).transpose()));
  os << "g\n";
  row(qp.g);
  os << "A\n";
  for (Eigen::Index i = 0; i < qp.a_ineq.rows(); ++i) row(Eigen::VectorXd(qp.a_ineq.row(i).transpose()));
  os << "lo\n";
  row(qp.lo);
  os << "hi\n";
  row(qp.hi);
}

inline DenseQp read_qp_text(std::istream& in) {
  std::string tag;
  Eigen::Index n = 0, m = 0;
  std::string tn, tm;
  if (!(in >> tn >> n >> tm >> m) || tn != "n" || tm != "m") throw ParseError("QP dump: bad header");
  auto expect = [&](const char* name) {
    if (!(in >> tag) || tag != name) throw ParseError(std::string("QP dump: expected section ") + name);
  };
  auto value = [&]() {
    std::string tok;
    if (!(in >> tok)) throw ParseError("QP dump: truncated");
    return text::parse_double(tok, "QP dump entry");
  };
  DenseQp qp;
  qp.h.resize(n, n);
  qp.g.resize(n);
  qp.a_ineq.resize(m, n);
  qp.lo.resize(m);
  qp.hi.resize(m);
  expect("H");
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) qp.h(i, j) = value();
  expect("g");
  for (Eigen::Index i = 0; i < n; ++i) qp.g(i) = value();
  expect("A");
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < n; ++j) qp.a_ineq(i, j) = value();
  expect("lo");
  for (Eigen::Index i = 0; i < m; ++i) qp.lo(i) = value();
  expect("hi");
  for (Eigen::Index i = 0; i < m; ++i) qp.hi(i) = value();
  return qp;
}

}  // namespace lpvmpc
