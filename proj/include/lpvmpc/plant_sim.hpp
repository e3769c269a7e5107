#pragma once

// Nonlinear single-track plant with Pacejka axle forces, banking and
// steering-rate actuation, integrated with classical RK4.

#include <algorithm>
#include <cmath>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/scheduling.hpp"
#include "lpvmpc/tire_models.hpp"

namespace lpvmpc {

struct PlantState {
  double x = 0.0;
  double y = 0.0;
  double psi = 0.0;
  double v_x = 0.0;
  double v_y = 0.0;
  double psi_dot = 0.0;
  double delta = 0.0;

  bool finite() const {
    return std::isfinite(x) && std::isfinite(y) && std::isfinite(psi) && std::isfinite(v_x) && std::isfinite(v_y) &&
           std::isfinite(psi_dot) && std::isfinite(delta);
  }
};

struct PlantInput {
  double delta_rate = 0.0;  ///< [rad/s]
  double a_x = 0.0;         ///< [m/s^2]
};

struct TireSet {
  PacejkaAxleParams front = presets::kFinalRunFront;
  PacejkaAxleParams rear = presets::kFinalRunRear;
};

/// Mismatch hook: positive longitudinal acceleration scales the rear peak
/// force by 1 - gain * a_x / a_ref, floored. Off by default.
struct PlantOptions {
  bool rear_slip_coupling = false;
  double rear_slip_gain = 0.3;
  double rear_slip_a_ref = 6.0;  ///< [m/s^2]
  double rear_slip_floor = 0.1;
};

inline PacejkaAxleParams effective_rear(const TireSet& tires, double a_x, const PlantOptions& opts) {
  PacejkaAxleParams rear = tires.rear;
  if (opts.rear_slip_coupling) {
    const double factor = 1.0 - opts.rear_slip_gain * std::max(a_x, 0.0) / opts.rear_slip_a_ref;
    rear.d_p *= std::max(factor, opts.rear_slip_floor);
  }
  return rear;
}

struct PlantForces {
  double front = 0.0;
  double rear = 0.0;
};

/// Axle lateral forces; zero below the minimum speed where slip is undefined.
inline PlantForces plant_forces(const PlantState& s, double a_x, const VehicleParams& vp, const TireSet& tires,
                                const PlantOptions& opts = {}) {
  if (s.v_x < kMinSpeed) return {};
  const SlipAngles a = slip_angles(s.v_x, s.v_y, s.psi_dot, s.delta, vp, SlipMode::exact);
  return {pacejka_force(tires.front, a.front), pacejka_force(effective_rear(tires, a_x, opts), a.rear)};
}

/// Lateral acceleration an IMU would report: lateral tire force over mass.
inline double lateral_acceleration(const PlantState& s, double a_x, const VehicleParams& vp, const TireSet& tires,
                                   const PlantOptions& opts = {}) {
  const PlantForces f = plant_forces(s, a_x, vp, tires, opts);
  return (f.front * std::cos(s.delta) + f.rear) / vp.m;
}

inline PlantState derivatives(const PlantState& s, const PlantInput& u, const VehicleParams& vp, const TireSet& tires,
                              double phi, const PlantOptions& opts = {}) {
  PlantState d;
  const double c = std::cos(s.psi), sn = std::sin(s.psi);
  d.x = s.v_x * c - s.v_y * sn;
  d.y = s.v_x * sn + s.v_y * c;
  d.psi = s.psi_dot;
  d.v_x = u.a_x + s.v_y * s.psi_dot;
  if (s.v_x >= kMinSpeed) {
    const PlantForces f = plant_forces(s, u.a_x, vp, tires, opts);
    const double cd = std::cos(s.delta);
    d.psi_dot = (vp.l_f * f.front * cd - vp.l_r * f.rear) / vp.i_z;
    d.v_y = (f.front * cd + f.rear) / vp.m - s.v_x * s.psi_dot + kGravity * std::sin(phi);
  }
  const double rate = std::clamp(u.delta_rate, -vp.delta_rate_max, vp.delta_rate_max);
  const bool at_upper = s.delta >= vp.delta_max && rate > 0.0;
  const bool at_lower = s.delta <= -vp.delta_max && rate < 0.0;
  d.delta = (at_upper || at_lower) ? 0.0 : rate;
  return d;
}

inline PlantState plant_step(const PlantState& s, const PlantInput& u, double dt, const VehicleParams& vp,
                             const TireSet& tires, double phi, const PlantOptions& opts = {}) {
  if (!(dt > 0.0 && dt <= 0.02)) throw PreconditionError("plant step requires dt in (0, 0.02]");
  auto axpy = [](const PlantState& a, double h, const PlantState& k) {
    return PlantState{a.x + h * k.x,     a.y + h * k.y,         a.psi + h * k.psi,   a.v_x + h * k.v_x,
                      a.v_y + h * k.v_y, a.psi_dot + h * k.psi_dot, a.delta + h * k.delta};
  };
  const PlantState k1 = derivatives(s, u, vp, tires, phi, opts);
  const PlantState k2 = derivatives(axpy(s, 0.5 * dt, k1), u, vp, tires, phi, opts);
  const PlantState k3 = derivatives(axpy(s, 0.5 * dt, k2), u, vp, tires, phi, opts);
  const PlantState k4 = derivatives(axpy(s, dt, k3), u, vp, tires, phi, opts);
  PlantState n = s;
  auto comb = [&](double a, double b1, double b2, double b3, double b4) {
    return a + dt / 6.0 * (b1 + 2.0 * b2 + 2.0 * b3 + b4);
  };
  n.x = comb(s.x, k1.x, k2.x, k3.x, k4.x);
  n.y = comb(s.y, k1.y, k2.y, k3.y, k4.y);
  n.psi = comb(s.psi, k1.psi, k2.psi, k3.psi, k4.psi);
  n.v_x = std::max(0.0, comb(s.v_x, k1.v_x, k2.v_x, k3.v_x, k4.v_x));
  n.v_y = comb(s.v_y, k1.v_y, k2.v_y, k3.v_y, k4.v_y);
  n.psi_dot = comb(s.psi_dot, k1.psi_dot, k2.psi_dot, k3.psi_dot, k4.psi_dot);
  n.delta = std::clamp(comb(s.delta, k1.delta, k2.delta, k3.delta, k4.delta), -vp.delta_max, vp.delta_max);
  return n;
}

}  // namespace lpvmpc
