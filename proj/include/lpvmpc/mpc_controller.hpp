#pragma once

// LPV-MPC lateral controller: condensed horizon, Gauss-Newton RTI subproblem
// with a linearized side-slip penalty, one QP per control step.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/lpv_model.hpp"
#include "lpvmpc/qp_solver.hpp"

namespace lpvmpc {

struct MpcWeights {
  std::array<double, kErrorStates> q{20.0, 1.0, 40.0, 1.0, 0.5};
  double r = 5.0;
  double q_beta = 10.0;

  void validate() const {
    for (double v : q) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ValidationError("MPC state weights must be finite and >= 0");
    }
    if (!(r > 0.0) || !std::isfinite(r)) throw ValidationError("MPC input weight must be positive");
    if (!(q_beta >= 0.0) || !std::isfinite(q_beta)) throw ValidationError("MPC side-slip weight must be >= 0");
  }
};

struct MpcConfig {
  double horizon_t = 1.6;
  int n_steps = 45;
  double delta_max = 0.35;
  double rate_max = 1.0;
  double control_period = 0.02;
  double terminal_scale = 0.0;  ///< x_N is weighted by terminal_scale * Q; 0 disables

  double ts() const { return horizon_t / n_steps; }

  void validate() const {
    if (n_steps < 5) throw ValidationError("MPC horizon needs at least 5 steps");
    if (!(horizon_t > 0.0)) throw ValidationError("MPC horizon length must be positive");
    if (!(ts() <= 0.1)) throw ValidationError("MPC prediction step must not exceed 0.1 s");
    if (!(delta_max > 0.0)) throw ValidationError("MPC steering bound must be positive");
    if (!(rate_max >= 0.0)) throw ValidationError("MPC steering-rate bound must be >= 0");
    if (!(control_period > 0.0)) throw ValidationError("control period must be positive");
    if (!(terminal_scale >= 0.0)) throw ValidationError("terminal scale must be >= 0");
  }
};

/// Stacked affine map x_k = phi_k x0 + gamma_k U + d_k for k = 0..N (5-row blocks).
struct Condensed {
  int n = 0;
  Eigen::MatrixXd phi;
  Eigen::MatrixXd gamma;
  Eigen::VectorXd d;

  auto phi_block(int k) const { return phi.middleRows(kErrorStates * k, kErrorStates); }
  auto gamma_block(int k) const { return gamma.middleRows(kErrorStates * k, kErrorStates); }
  auto d_block(int k) const { return d.segment(kErrorStates * k, kErrorStates); }

  Vector5 state(int k, const Vector5& x0, const Eigen::VectorXd& u) const {
    return phi_block(k) * x0 + gamma_block(k) * u + d_block(k);
  }
};

inline Condensed condense(std::span<const DiscreteLpv> models) {
  if (models.empty()) throw PreconditionError("condense needs at least one model");
  const int n = static_cast<int>(models.size());
  constexpr int nx = kErrorStates;
  Condensed c;
  c.n = n;
  c.phi = Eigen::MatrixXd::Zero(nx * (n + 1), nx);
  c.gamma = Eigen::MatrixXd::Zero(nx * (n + 1), n);
  c.d = Eigen::VectorXd::Zero(nx * (n + 1));
  c.phi.topRows(nx).setIdentity();
  for (int k = 0; k < n; ++k) {
    const auto& m = models[static_cast<std::size_t>(k)];
    c.phi.middleRows(nx * (k + 1), nx) = m.a_d * c.phi.middleRows(nx * k, nx);
    c.gamma.middleRows(nx * (k + 1), nx) = m.a_d * c.gamma.middleRows(nx * k, nx);
    c.gamma.block(nx * (k + 1), k, nx, 1) += m.b_d;
    c.d.segment(nx * (k + 1), nx) = m.a_d * c.d.segment(nx * k, nx) + m.e_d;
  }
  return c;
}

/// Exact step-by-step rollout of the discrete models.
inline std::vector<Vector5> rollout(std::span<const DiscreteLpv> models, const Vector5& x0, const Eigen::VectorXd& u) {
  std::vector<Vector5> xs;
  xs.reserve(models.size() + 1);
  xs.push_back(x0);
  for (std::size_t k = 0; k < models.size(); ++k) xs.push_back(models[k].step(xs.back(), u(static_cast<Eigen::Index>(k))));
  return xs;
}

/// Stage Hessian and linear term of 1/2 J_k in the state, with the side-slip
/// residual beta = atan(e_y_dot / v) linearized at lin_ey_dot.
struct StageWeight {
  Matrix5 w = Matrix5::Zero();
  Vector5 lin = Vector5::Zero();
};

inline StageWeight stage_weight(const MpcWeights& weights, double lin_ey_dot, double v_x) {
  StageWeight s;
  for (int i = 0; i < kErrorStates; ++i) s.w(i, i) = weights.q[static_cast<std::size_t>(i)];
  if (weights.q_beta > 0.0) {
    const double ratio = lin_ey_dot / v_x;
    const double jac = 1.0 / (v_x * (1.0 + ratio * ratio));
    const double offset = std::atan(ratio) - jac * lin_ey_dot;
    s.w(1, 1) += weights.q_beta * jac * jac;
    s.lin(1) = weights.q_beta * jac * offset;
  }
  return s;
}

/// Condensed QP over U = [u_0 .. u_{N-1}]. lin_states holds the linearization
/// trajectory x_0..x_N; only its e_y_dot entries matter, and only when q_beta > 0.
inline DenseQp build_subproblem(const Condensed& cond, const Vector5& x0, std::span<const Vector5> lin_states,
                                const MpcWeights& weights, const MpcConfig& cfg,
                                std::span<const SchedulingParams> schedule) {
  const int n = cond.n;
  if (static_cast<int>(lin_states.size()) != n + 1 || static_cast<int>(schedule.size()) != n + 1) {
    throw PreconditionError("linearization point and schedule must have N+1 entries");
  }
  DenseQp qp;
  qp.h = weights.r * Eigen::MatrixXd::Identity(n, n);
  qp.g = Eigen::VectorXd::Zero(n);

  auto add_stage = [&](int k, const Matrix5& w, const Vector5& lin) {
    const auto gk = cond.gamma_block(k);
    const Vector5 fk = cond.phi_block(k) * x0 + cond.d_block(k);
    const Eigen::MatrixXd wg = w * gk;
    qp.h.noalias() += gk.transpose() * wg;
    qp.g.noalias() += gk.transpose() * (w * fk + lin);
  };
  // Stage 0 is fixed by x0 and only adds a constant.
  for (int k = 1; k < n; ++k) {
    const double v = std::max(schedule[static_cast<std::size_t>(k)].v_x, kMinSpeed);
    const auto sw = stage_weight(weights, lin_states[static_cast<std::size_t>(k)](1), v);
    add_stage(k, sw.w, sw.lin);
  }
  if (cfg.terminal_scale > 0.0) {
    Matrix5 wn = Matrix5::Zero();
    for (int i = 0; i < kErrorStates; ++i) wn(i, i) = cfg.terminal_scale * weights.q[static_cast<std::size_t>(i)];
    add_stage(n, wn, Vector5::Zero());
  }
  qp.h = (0.5 * (qp.h + qp.h.transpose())).eval();

  qp.a_ineq = Eigen::MatrixXd::Zero(2 * n, n);
  qp.lo.resize(2 * n);
  qp.hi.resize(2 * n);
  qp.a_ineq.topRows(n).setIdentity();
  qp.lo.head(n).setConstant(-cfg.rate_max);
  qp.hi.head(n).setConstant(cfg.rate_max);
  for (int k = 1; k <= n; ++k) {
    const double free = (cond.phi_block(k).row(4) * x0)(0) + cond.d_block(k)(4);
    qp.a_ineq.row(n + k - 1) = cond.gamma_block(k).row(4);
    qp.lo(n + k - 1) = -cfg.delta_max - free;
    qp.hi(n + k - 1) = cfg.delta_max - free;
  }
  return qp;
}

struct MpcSolution {
  double u0 = 0.0;
  std::vector<Vector5> predicted_states;  ///< N+1 states, x_0 first
  Eigen::VectorXd predicted_inputs;
  QpStatus qp_status = QpStatus::max_iter;
  int qp_iterations = 0;
  double solve_time = 0.0;  ///< wall time of the whole step [s]
  QpSolution qp;

  bool solved() const { return qp_status == QpStatus::solved; }
};

enum class WarmStart { shifted, unshifted, cold };

class MpcController {
 public:
  MpcController(VehicleParams vp, MpcWeights weights, MpcConfig cfg, QpSettings qp_settings = {})
      : vp_(vp), weights_(weights), cfg_(cfg), solver_(qp_settings) {
    vp_.validate();
    weights_.validate();
    cfg_.validate();
  }

  const MpcConfig& config() const { return cfg_; }
  const MpcWeights& weights() const { return weights_; }
  const VehicleParams& vehicle() const { return vp_; }
  QpSolver& solver() { return solver_; }
  const DenseQp& last_qp() const { return last_qp_; }
  const std::optional<MpcSolution>& previous() const { return prev_; }

  void reset() { prev_.reset(); }

  MpcSolution solve_step(const ErrorState& x0_in, std::span<const SchedulingParams> schedule_in,
                         WarmStart mode = WarmStart::shifted) {
    const auto t0 = std::chrono::steady_clock::now();
    const int n = cfg_.n_steps;
    if (static_cast<int>(schedule_in.size()) != n + 1) throw PreconditionError("schedule must have N+1 entries");
    Vector5 x0 = x0_in.vector();
    if (!x0.allFinite()) throw PreconditionError("MPC initial state must be finite");
    x0(4) = std::clamp(x0(4), -cfg_.delta_max, cfg_.delta_max);

    std::vector<SchedulingParams> schedule(schedule_in.begin(), schedule_in.end());
    for (auto& p : schedule) p.v_x = std::max(p.v_x, kMinSpeed);
    const auto models = build_horizon_models(schedule, vp_, cfg_.ts());
    const Condensed cond = condense(models);

    // Linearization input sequence and QP warm start.
    Eigen::VectorXd u_lin = Eigen::VectorXd::Zero(n);
    QpSolution warm;
    const QpSolution* warm_ptr = nullptr;
    if (prev_ && mode != WarmStart::cold) {
      const Eigen::VectorXd& pu = prev_->predicted_inputs;
      if (mode == WarmStart::shifted) {
        u_lin.head(n - 1) = pu.tail(n - 1);
        u_lin(n - 1) = pu(n - 1);
        warm.z = u_lin;
        warm.lambda = shift_duals(prev_->qp.lambda, n);
      } else {
        u_lin = pu;
        warm.z = pu;
        warm.lambda = prev_->qp.lambda;
      }
      warm_ptr = &warm;
    }
    const auto lin_states = rollout(models, x0, u_lin);

    last_qp_ = build_subproblem(cond, x0, lin_states, weights_, cfg_, schedule);
    MpcSolution out;
    out.qp = solver_.solve(last_qp_, warm_ptr);
    out.qp_status = out.qp.status;
    out.qp_iterations = out.qp.iterations;
    out.predicted_inputs = out.qp.z.cwiseMax(-cfg_.rate_max).cwiseMin(cfg_.rate_max);
    out.predicted_states = rollout(models, x0, out.predicted_inputs);
    out.u0 = out.predicted_inputs(0);
    if (out.solved()) {
      prev_ = out;
    } else {
      prev_.reset();
    }
    out.solve_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return out;
  }

 private:
  // Both constraint blocks (rate box, then steering rows) shift by one step.
  static Eigen::VectorXd shift_duals(const Eigen::VectorXd& lambda, int n) {
    Eigen::VectorXd out = Eigen::VectorXd::Zero(2 * n);
    if (lambda.size() != 2 * n) return out;
    for (int b = 0; b < 2; ++b) {
      out.segment(b * n, n - 1) = lambda.segment(b * n + 1, n - 1);
      out(b * n + n - 1) = lambda(b * n + n - 1);
    }
    return out;
  }

  VehicleParams vp_;
  MpcWeights weights_;
  MpcConfig cfg_;
  QpSolver solver_;
  DenseQp last_qp_;
  std::optional<MpcSolution> prev_;
};

/// Predicted e_y one control period ahead minus the measured e_y, with linear
/// interpolation between prediction nodes when the step differs from the period.
inline double one_step_model_error(const MpcSolution& predicted, double actual_e_y, double control_period,
                                   double ts) {
  const auto& xs = predicted.predicted_states;
  if (xs.size() < 2) throw PreconditionError("prediction needs at least two states");
  const double pos = control_period / ts;
  const auto k = std::min(static_cast<std::size_t>(std::floor(pos)), xs.size() - 2);
  const double frac = pos - static_cast<double>(k);
  const double e_hat = (1.0 - frac) * xs[k](0) + frac * xs[k + 1](0);
  return e_hat - actual_e_y;
}

}  // namespace lpvmpc
