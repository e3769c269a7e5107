#pragma once

// Fallback steering (pure pursuit), longitudinal PID and the MPC/fallback arbiter.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string_view>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/qp_solver.hpp"
#include "lpvmpc/track.hpp"

namespace lpvmpc {

struct PurePursuitConfig {
  double lookahead_gain = 0.5;  ///< [s]
  double lookahead_min = 5.0;   ///< [m]
  double lookahead_max = 40.0;  ///< [m]

  void validate() const {
    if (!(lookahead_gain > 0.0)) throw ValidationError("pure pursuit gain must be positive");
    if (!(lookahead_min > 0.0 && lookahead_min <= lookahead_max)) {
      throw ValidationError("pure pursuit needs 0 < lookahead_min <= lookahead_max");
    }
  }
};

inline double lookahead_distance(double v_x, const PurePursuitConfig& cfg) {
  return std::clamp(cfg.lookahead_gain * v_x, cfg.lookahead_min, cfg.lookahead_max);
}

inline double pure_pursuit_steer(const Raceline& line, const Pose& pose, double v_x, const PurePursuitConfig& cfg,
                                 double wheelbase, double delta_max, std::optional<std::size_t> hint = std::nullopt) {
  if (!(v_x >= 0.0)) throw PreconditionError("pure pursuit requires v_x >= 0");
  const double ld = lookahead_distance(v_x, cfg);
  const TrackingErrors e = project(line, pose, hint);
  double s_target = e.s_proj + ld;
  if (!line.closed()) s_target = std::min(s_target, line.waypoints().back().s);
  const Waypoint target = line.sample(s_target);
  const double dx = target.x - pose.x;
  const double dy = target.y - pose.y;
  const double c = std::cos(pose.psi), s = std::sin(pose.psi);
  const double alpha = std::atan2(-s * dx + c * dy, c * dx + s * dy);
  const double delta = std::atan(2.0 * wheelbase * std::sin(alpha) / ld);
  return std::clamp(delta, -delta_max, delta_max);
}

struct PidConfig {
  double kp = 0.8;
  double ki = 0.1;
  double kd = 0.0;
  double a_min = -6.0;
  double a_max = 6.0;
  double integrator_limit = 30.0;  ///< bound on the error integral [m]

  void validate() const {
    if (!(kp >= 0.0 && ki >= 0.0 && kd >= 0.0)) throw ValidationError("PID gains must be >= 0");
    if (!(a_min < 0.0 && 0.0 < a_max)) throw ValidationError("PID clamp needs a_min < 0 < a_max");
    if (!(integrator_limit > 0.0)) throw ValidationError("PID integrator limit must be positive");
  }
};

struct PidState {
  double integral = 0.0;
  double prev_error = 0.0;
  bool has_prev = false;
};

/// Clamped PID on speed error. The integrator is frozen whenever the output is
/// saturated and the error would drive it further into saturation.
inline double pid_accel(double v_ref, double v_x, double dt, PidState& state, const PidConfig& cfg) {
  if (!(dt > 0.0)) throw PreconditionError("PID requires dt > 0");
  const double err = v_ref - v_x;
  const double deriv = state.has_prev ? (err - state.prev_error) / dt : 0.0;
  const double candidate = std::clamp(state.integral + err * dt, -cfg.integrator_limit, cfg.integrator_limit);
  const double raw = cfg.kp * err + cfg.ki * candidate + cfg.kd * deriv;
  const bool high = raw > cfg.a_max && err > 0.0;
  const bool low = raw < cfg.a_min && err < 0.0;
  if (!high && !low) state.integral = candidate;
  state.prev_error = err;
  state.has_prev = true;
  const double out = cfg.kp * err + cfg.ki * state.integral + cfg.kd * deriv;
  return std::clamp(out, cfg.a_min, cfg.a_max);
}

enum class ControlSource { mpc, pure_pursuit };

inline std::string_view to_string(ControlSource s) { return s == ControlSource::mpc ? "mpc" : "pp"; }

struct ArbitrationConfig {
  double v_min = 20.0;      ///< MPC drops out below this speed [m/s]
  double v_reentry = 21.0;  ///< speed needed to hand back to the MPC [m/s]
  int reentry_ticks = 5;    ///< consecutive good MPC ticks needed for hand-back
  double deadline = 0.010;  ///< [s]
  bool enforce_deadline = true;

  void validate() const {
    if (!(v_min > 0.0 && v_reentry >= v_min)) throw ValidationError("arbitration needs 0 < v_min <= v_reentry");
    if (reentry_ticks < 1) throw ValidationError("arbitration re-entry needs at least one tick");
    if (!(deadline > 0.0)) throw ValidationError("arbitration deadline must be positive");
  }
};

struct ArbiterState {
  bool mpc_active = false;
  int good_streak = 0;
};

struct ArbitrationInput {
  bool mpc_ran = false;  ///< false when no MPC step was attempted this tick
  QpStatus status = QpStatus::max_iter;
  double v_x = 0.0;
  double solve_time = 0.0;
};

struct ArbitrationDecision {
  ControlSource source = ControlSource::pure_pursuit;
  ArbiterState next;
};

/// Pure decision: the same (state, input) always yields the same decision.
inline ArbitrationDecision arbitrate(const ArbiterState& state, const ArbitrationInput& in,
                                     const ArbitrationConfig& cfg) {
  const bool good = in.mpc_ran && in.status == QpStatus::solved &&
                    (!cfg.enforce_deadline || in.solve_time <= cfg.deadline);
  ArbitrationDecision d;
  if (state.mpc_active) {
    if (good && in.v_x >= cfg.v_min) {
      d.source = ControlSource::mpc;
      d.next = {true, state.good_streak + 1};
    } else {
      d.next = {false, 0};
    }
    return d;
  }
  const int streak = (good && in.v_x >= cfg.v_reentry) ? state.good_streak + 1 : 0;
  if (streak >= cfg.reentry_ticks) {
    d.source = ControlSource::mpc;
    d.next = {true, streak};
  } else {
    d.next = {false, streak};
  }
  return d;
}

}  // namespace lpvmpc
