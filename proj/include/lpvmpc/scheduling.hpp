#pragma once

namespace lpvmpc {

/// Exogenous quantities the LPV prediction model is built from.
struct SchedulingParams {
  double v_x = 0.0;    ///< longitudinal speed [m/s]
  double kappa = 0.0;  ///< path curvature [1/m]
  double phi = 0.0;    ///< road banking [rad]
};

inline constexpr double kGravity = 9.80665;
/// Lowest speed for which slip angles and the velocity-scheduled matrices are formed.
inline constexpr double kMinSpeed = 1.0;

}  // namespace lpvmpc
