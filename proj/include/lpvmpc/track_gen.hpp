#pragma once

// Synthetic raceline generators: straight, circle and banked oval. All run
// counterclockwise so turns are left turns with positive curvature and banking.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/track.hpp"

namespace lpvmpc {

struct OvalSpec {
  double straight = 300.0;      ///< straight length [m]
  double radius = 300.0;        ///< turn radius [m]
  double bank = 0.0;            ///< turn banking [rad]
  double v_ref = 70.0;          ///< [m/s]
  double spacing = 1.0;         ///< nominal waypoint spacing [m]
  double bank_transition = 30.0;  ///< banking blend length, centred on each straight/turn boundary [m]
};

/// Straight along +x from the origin. v_ref ramps linearly to v_ref_end when given.
inline Raceline make_straight(double length, double v_ref, double spacing = 1.0, double v_ref_end = -1.0) {
  if (!(length > 0.0) || !(spacing > 0.0)) throw ValidationError("straight: length and spacing must be positive");
  const int n = std::max(2, static_cast<int>(std::round(length / spacing)));
  const double ds = length / n;
  const double v_end = v_ref_end > 0.0 ? v_ref_end : v_ref;
  std::vector<Waypoint> wps;
  for (int i = 0; i <= n; ++i) {
    const double s = i * ds;
    wps.push_back({s, s, 0.0, 0.0, 0.0, v_ref + (v_end - v_ref) * s / length, 0.0});
  }
  return Raceline(std::move(wps), false);
}

/// Closed circle of radius R centred at (0, R), starting at the origin heading +x.
inline Raceline make_circle(double radius, double v_ref, double bank = 0.0, double spacing = 1.0) {
  if (!(radius > 0.0) || !(spacing > 0.0)) throw ValidationError("circle: radius and spacing must be positive");
  const double length = 2.0 * std::numbers::pi * radius;
  const int n = std::max(3, static_cast<int>(std::round(length / spacing)));
  const double ds = length / n;
  std::vector<Waypoint> wps;
  for (int i = 0; i < n; ++i) {
    const double s = i * ds;
    const double th = s / radius;
    wps.push_back({s, radius * std::sin(th), radius - radius * std::cos(th), wrap_angle(th), 1.0 / radius, v_ref, bank});
  }
  return Raceline(std::move(wps), true);
}

/// Pose and curvature of the oval centreline at arc length s in [0, length).
inline Waypoint oval_point(const OvalSpec& o, double s) {
  const double ls = o.straight;
  const double r = o.radius;
  const double half = std::numbers::pi * r;
  Waypoint w;
  w.s = s;
  w.v_ref = o.v_ref;
  if (s < ls) {
    w.x = s;
    w.y = 0.0;
    w.psi_ref = 0.0;
  } else if (s < ls + half) {
    const double th = (s - ls) / r;
    w.x = ls + r * std::sin(th);
    w.y = r - r * std::cos(th);
    w.psi_ref = wrap_angle(th);
    w.kappa = 1.0 / r;
  } else if (s < 2.0 * ls + half) {
    const double u = s - (ls + half);
    w.x = ls - u;
    w.y = 2.0 * r;
    w.psi_ref = std::numbers::pi;
  } else {
    const double th = (s - (2.0 * ls + half)) / r;
    w.x = -r * std::sin(th);
    w.y = r + r * std::cos(th);
    w.psi_ref = wrap_angle(std::numbers::pi + th);
    w.kappa = 1.0 / r;
  }
  // Banking: full value inside turns, linear blend across each boundary.
  const double length = 2.0 * ls + 2.0 * half;
  const double turns[2][2] = {{ls, ls + half}, {2.0 * ls + half, length}};
  double weight = 0.0;
  for (const auto& turn : turns) {
    auto circ = [&](double a, double b) {
      const double d = std::fmod(std::abs(a - b), length);
      return std::min(d, length - d);
    };
    const bool inside = s >= turn[0] && s < turn[1];
    const double edge = std::min(circ(s, turn[0]), circ(s, turn[1]));
    const double signed_depth = inside ? edge : -edge;
    const double wgt = o.bank_transition > 0.0
                           ? std::clamp((signed_depth + 0.5 * o.bank_transition) / o.bank_transition, 0.0, 1.0)
                           : (inside ? 1.0 : 0.0);
    weight = std::max(weight, wgt);
  }
  w.phi = o.bank * weight;
  return w;
}

inline Raceline make_oval(const OvalSpec& o) {
  if (!(o.straight > 0.0) || !(o.radius > 0.0) || !(o.spacing > 0.0)) {
    throw ValidationError("oval: straight, radius and spacing must be positive");
  }
  const double length = 2.0 * o.straight + 2.0 * std::numbers::pi * o.radius;
  const int n = static_cast<int>(std::round(length / o.spacing));
  const double ds = length / n;
  std::vector<Waypoint> wps;
  wps.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) wps.push_back(oval_point(o, i * ds));
  return Raceline(std::move(wps), true);
}

}  // namespace lpvmpc
