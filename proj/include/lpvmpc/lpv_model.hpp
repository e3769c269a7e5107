#pragma once

// Error-state lateral model: the linear single-track model in tracking-error
// coordinates, augmented with the steering angle as a state and the road
// banking as an affine disturbance, then discretized exactly under ZOH.

#include <Eigen/Core>
#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <span>
#include <vector>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/scheduling.hpp"
#include "lpvmpc/tire_models.hpp"

namespace lpvmpc {

inline constexpr int kErrorStates = 5;

using Matrix4 = Eigen::Matrix<double, 4, 4>;
using Vector4 = Eigen::Matrix<double, 4, 1>;
using Matrix5 = Eigen::Matrix<double, 5, 5>;
using Vector5 = Eigen::Matrix<double, 5, 1>;

/// Augmented error state [e_y, e_y_dot, e_psi, e_psi_dot, delta].
struct ErrorState {
  double e_y = 0.0;
  double e_y_dot = 0.0;
  double e_psi = 0.0;
  double e_psi_dot = 0.0;
  double delta = 0.0;

  Vector5 vector() const { return Vector5(e_y, e_y_dot, e_psi, e_psi_dot, delta); }
  static ErrorState from(const Vector5& v) { return {v(0), v(1), v(2), v(3), v(4)}; }
};

/// x_dot = A x + B delta + C psi_dot_ref over x = [e_y, e_y_dot, e_psi, e_psi_dot].
struct ContinuousModel {
  Matrix4 a = Matrix4::Zero();
  Vector4 b = Vector4::Zero();
  Vector4 c = Vector4::Zero();
};

/// x_dot = A x + B u + e with u the steering rate.
struct AugmentedModel {
  Matrix5 a = Matrix5::Zero();
  Vector5 b = Vector5::Zero();
  Vector5 e = Vector5::Zero();
};

/// x_{k+1} = a_d x_k + b_d u_k + e_d.
struct DiscreteLpv {
  Matrix5 a_d = Matrix5::Identity();
  Vector5 b_d = Vector5::Zero();
  Vector5 e_d = Vector5::Zero();

  Vector5 step(const Vector5& x, double u) const { return a_d * x + b_d * u + e_d; }
};

inline ContinuousModel continuous_matrices(const SchedulingParams& p, const VehicleParams& vp) {
  if (!(p.v_x >= kMinSpeed) || !std::isfinite(p.v_x)) {
    throw PreconditionError("continuous_matrices requires v_x >= 1 m/s");
  }
  const double vx = p.v_x;
  const double cf = vp.c_f, cr = vp.c_r, lf = vp.l_f, lr = vp.l_r, m = vp.m, iz = vp.i_z;

  const double a22 = -2.0 * (cf + cr) / (m * vx);
  const double a23 = -vx * a22;
  const double a24 = (-2.0 * cf * lf + 2.0 * cr * lr) / (m * vx);
  const double a42 = -2.0 * (cf * lf - cr * lr) / (iz * vx);
  const double a43 = -vx * a42;
  const double a44 = -2.0 * (cf * lf * lf + cr * lr * lr) / (iz * vx);

  ContinuousModel cm;
  cm.a << 0, 1, 0, 0,
          0, a22, a23, a24,
          0, 0, 0, 1,
          0, a42, a43, a44;
  cm.b << 0, 2.0 * cf / m, 0, 2.0 * cf * lf / iz;
  cm.c << 0, a24 - vx, 0, a44;
  return cm;
}

inline AugmentedModel augment(const ContinuousModel& cm, const SchedulingParams& p) {
  AugmentedModel am;
  am.a.topLeftCorner<4, 4>() = cm.a;
  am.a.block<4, 1>(0, 4) = cm.b;
  am.b(4) = 1.0;
  const double psi_dot_ref = p.v_x * p.kappa;
  am.e.head<4>() = cm.c * psi_dot_ref;
  am.e(1) += kGravity * std::sin(p.phi);
  return am;
}

/// Exact ZOH of x_dot = A x + B u + e over one step, via the exponential of
/// the embedded matrix [[A, B, e], [0, 0, 0], [0, 0, 0]].
template <int N>
void zoh_discretize(const Eigen::Matrix<double, N, N>& a, const Eigen::Matrix<double, N, 1>& b,
                    const Eigen::Matrix<double, N, 1>& e, double ts, Eigen::Matrix<double, N, N>& a_d,
                    Eigen::Matrix<double, N, 1>& b_d, Eigen::Matrix<double, N, 1>& e_d) {
  using Embedded = Eigen::Matrix<double, N + 2, N + 2>;
  Embedded m = Embedded::Zero();
  m.template topLeftCorner<N, N>() = a * ts;
  m.template block<N, 1>(0, N) = b * ts;
  m.template block<N, 1>(0, N + 1) = e * ts;
  const Embedded phi = m.exp();
  a_d = phi.template topLeftCorner<N, N>();
  b_d = phi.template block<N, 1>(0, N);
  e_d = phi.template block<N, 1>(0, N + 1);
}

inline DiscreteLpv discretize(const AugmentedModel& am, double ts) {
  if (!(ts > 0.0 && ts <= 0.1)) throw PreconditionError("discretize requires Ts in (0, 0.1]");
  DiscreteLpv d;
  zoh_discretize<kErrorStates>(am.a, am.b, am.e, ts, d.a_d, d.b_d, d.e_d);
  return d;
}

inline DiscreteLpv discrete_model(const SchedulingParams& p, const VehicleParams& vp, double ts) {
  return discretize(augment(continuous_matrices(p, vp), p), ts);
}

/// One discrete model per horizon interval: element k is built at schedule[k].
inline std::vector<DiscreteLpv> build_horizon_models(std::span<const SchedulingParams> schedule,
                                                     const VehicleParams& vp, double ts) {
  if (schedule.size() < 2) throw PreconditionError("schedule needs at least two nodes");
  std::vector<DiscreteLpv> models;
  models.reserve(schedule.size() - 1);
  for (std::size_t k = 0; k + 1 < schedule.size(); ++k) models.push_back(discrete_model(schedule[k], vp, ts));
  return models;
}

}  // namespace lpvmpc
