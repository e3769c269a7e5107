#pragma once

// Lateral tire force models and slip kinematics.
//
// Stiffness bookkeeping: PacejkaAxleParams and c_linear() describe a whole
// axle. VehicleParams::c_f / c_r hold per-tire stiffness, so the factor 2 of
// the two-tire axle appears once, in linear_force() and the LPV matrices.

#include <cmath>
#include <numbers>
#include <string>
#include <utility>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/scheduling.hpp"

namespace lpvmpc {

struct PacejkaAxleParams {
  double b_p = 1.0;  ///< stiffness factor
  double c_p = 1.0;  ///< shape factor
  double d_p = 1.0;  ///< peak factor [N]
  double e_p = 0.0;  ///< curvature factor

  void validate() const {
    if (!(b_p > 0.0)) throw ValidationError("Pacejka B must be positive");
    if (!(c_p > 0.0 && c_p <= 3.0)) throw ValidationError("Pacejka C must lie in (0, 3]");
    if (!(d_p > 0.0)) throw ValidationError("Pacejka D must be positive");
    if (!(e_p <= 1.0)) throw ValidationError("Pacejka E must be <= 1");
  }
};

/// Axle cornering stiffness at zero slip.
constexpr double c_linear(const PacejkaAxleParams& p) { return p.b_p * p.c_p * p.d_p; }

/// Identified axle fits for the open-wheel oval car.
namespace presets {
/// Fit from the 56 m/s practice lap.
inline constexpr PacejkaAxleParams kPracticeFront{34.59, 1.81, 2100.0, -1.0};
inline constexpr PacejkaAxleParams kPracticeRear{35.04, 1.96, 3036.0, -0.26};
/// Fit from the 72 m/s final run.
inline constexpr PacejkaAxleParams kFinalRunFront{22.30, 2.00, 3885.85, -1.00};
inline constexpr PacejkaAxleParams kFinalRunRear{26.08, 2.00, 5342.89, -1.00};
}  // namespace presets

struct VehicleParams {
  double m = 787.0;        ///< mass [kg]
  double i_z = 1000.0;     ///< yaw inertia [kg m^2]
  double l_f = 1.7;        ///< CoG to front axle [m]
  double l_r = 1.25;       ///< CoG to rear axle [m]
  double c_f = 0.5 * c_linear(presets::kPracticeFront);  ///< front cornering stiffness per tire [N/rad]
  double c_r = 0.5 * c_linear(presets::kPracticeRear);   ///< rear cornering stiffness per tire [N/rad]
  double delta_max = 0.35;       ///< steering bound [rad]
  double delta_rate_max = 1.0;   ///< steering rate bound [rad/s]

  double wheelbase() const { return l_f + l_r; }

  void validate() const {
    for (double v : {m, i_z, l_f, l_r, c_f, c_r, delta_max, delta_rate_max}) {
      if (!(v > 0.0) || !std::isfinite(v)) throw ValidationError("vehicle parameters must be finite and positive");
    }
    if (!(l_f + l_r > 1.0)) throw ValidationError("wheelbase must exceed 1 m");
  }
};

/// Magic Formula lateral force, without shift terms; odd in alpha.
inline double pacejka_force(const PacejkaAxleParams& p, double alpha) {
  const double x = p.b_p * alpha;
  return p.d_p * std::sin(p.c_p * std::atan(x - p.e_p * (x - std::atan(x))));
}

/// Linear axle force from a per-tire stiffness.
inline double linear_force(double c_tire, double alpha) { return 2.0 * c_tire * alpha; }

enum class SlipMode { exact, small_angle };

struct SlipAngles {
  double front = 0.0;
  double rear = 0.0;
};

inline SlipAngles slip_angles(double v_x, double v_y, double psi_dot, double delta, const VehicleParams& vp,
                              SlipMode mode = SlipMode::exact) {
  if (!(v_x >= kMinSpeed)) throw PreconditionError("slip angles need v_x >= 1 m/s");
  const double zf = (v_y + vp.l_f * psi_dot) / v_x;
  const double zr = (v_y - vp.l_r * psi_dot) / v_x;
  if (mode == SlipMode::small_angle) return {delta - zf, -zr};
  return {delta - std::atan(zf), -std::atan(zr)};
}

struct AxleForces {
  double front = 0.0;
  double rear = 0.0;
};

/// Axle forces reconstructed from the IMU lateral acceleration (steady yaw moment).
inline AxleForces axle_forces_from_imu(double a_y_imu, double delta, const VehicleParams& vp) {
  if (!(std::abs(delta) < std::numbers::pi / 2.0)) throw PreconditionError("|delta| must be below pi/2");
  const double wb = vp.l_f + vp.l_r;
  return {vp.m * vp.l_r * a_y_imu / (wb * std::cos(delta)), vp.m * vp.l_f * a_y_imu / wb};
}

}  // namespace lpvmpc
