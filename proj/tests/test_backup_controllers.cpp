#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lpvmpc/backup_controllers.hpp"
#include "lpvmpc/plant_sim.hpp"
#include "lpvmpc/track_gen.hpp"

using namespace lpvmpc;

TEST(PurePursuit, TargetDeadAheadGivesZeroSteer) {
  const Raceline line = make_straight(200.0, 40.0);
  EXPECT_DOUBLE_EQ(pure_pursuit_steer(line, {20.0, 0.0, 0.0}, 30.0, {}, 2.95, 0.35), 0.0);
}

TEST(PurePursuit, CircleLimitIsKinematicSteer) {
  constexpr double kR = 300.0;
  const Raceline line = make_circle(kR, 30.0, 0.0, 0.5);
  PurePursuitConfig cfg;
  const double v = 30.0;  // L_d = 15 m = 0.05 R
  ASSERT_DOUBLE_EQ(lookahead_distance(v, cfg), 0.05 * kR);
  const auto& w = line[100];
  const double delta = pure_pursuit_steer(line, {w.x, w.y, w.psi_ref}, v, cfg, 2.95, 0.35);
  EXPECT_NEAR(delta, std::atan(2.95 / kR), 1e-4 * std::atan(2.95 / kR) + 1e-6);
}

TEST(PurePursuit, StandstillUsesMinimumLookahead) {
  PurePursuitConfig cfg;
  EXPECT_DOUBLE_EQ(lookahead_distance(0.0, cfg), cfg.lookahead_min);
  EXPECT_DOUBLE_EQ(lookahead_distance(200.0, cfg), cfg.lookahead_max);
  EXPECT_THROW(pure_pursuit_steer(make_straight(100.0, 10.0), {}, -1.0, cfg, 2.95, 0.35), PreconditionError);
}

TEST(PurePursuit, SaturatesAtSteeringBound) {
  const Raceline line = make_straight(200.0, 40.0);
  // Pointing sideways: the target is far off the nose.
  EXPECT_DOUBLE_EQ(pure_pursuit_steer(line, {20.0, -3.0, -1.2}, 10.0, {}, 2.95, 0.35), 0.35);
}

TEST(Pid, MatchedSpeedGivesZero) {
  PidState st;
  EXPECT_DOUBLE_EQ(pid_accel(30.0, 30.0, 0.02, st, PidConfig{}), 0.0);
}

TEST(Pid, ProportionalOnly) {
  PidConfig cfg;
  cfg.kp = 1.0;
  cfg.ki = cfg.kd = 0.0;
  PidState st;
  EXPECT_DOUBLE_EQ(pid_accel(34.0, 30.0, 0.02, st, cfg), 4.0);
}

TEST(Pid, StepResponseOnPlantSettles) {
  // 1 m/s step, closed through the plant's longitudinal channel.
  const VehicleParams vp;
  const TireSet tires;
  PlantState s;
  s.v_x = 30.0;
  PidState st;
  const PidConfig cfg;
  double a = 0.0;
  for (int ms = 0; ms < 10000; ++ms) {
    if (ms % 20 == 0) a = pid_accel(31.0, s.v_x, 0.02, st, cfg);
    s = plant_step(s, {0.0, a}, 0.001, vp, tires, 0.0);
  }
  EXPECT_LT(std::abs(31.0 - s.v_x), 0.1);
}

TEST(Arbitrate, BelowThresholdFallsBack) {
  const ArbiterState active{true, 10};
  const auto d = arbitrate(active, {true, QpStatus::solved, 19.9, 0.002}, ArbitrationConfig{});
  EXPECT_EQ(d.source, ControlSource::pure_pursuit);
  EXPECT_FALSE(d.next.mpc_active);
}

TEST(Arbitrate, FastSolvedStepKeepsMpc) {
  const ArbiterState active{true, 10};
  const auto d = arbitrate(active, {true, QpStatus::solved, 70.0, 0.0058}, ArbitrationConfig{});
  EXPECT_EQ(d.source, ControlSource::mpc);
}

TEST(Arbitrate, SolverFailureFallsBack) {
  const ArbiterState active{true, 10};
  EXPECT_EQ(arbitrate(active, {true, QpStatus::max_iter, 70.0, 0.001}, {}).source, ControlSource::pure_pursuit);
  EXPECT_EQ(arbitrate(active, {true, QpStatus::infeasible, 70.0, 0.001}, {}).source, ControlSource::pure_pursuit);
  EXPECT_EQ(arbitrate(active, {true, QpStatus::solved, 70.0, 0.011}, {}).source, ControlSource::pure_pursuit);
  ArbitrationConfig relaxed;
  relaxed.enforce_deadline = false;
  EXPECT_EQ(arbitrate(active, {true, QpStatus::solved, 70.0, 0.011}, relaxed).source, ControlSource::mpc);
}

TEST(Arbitrate, ReentryNeedsSpeedMarginAndStreak) {
  const ArbitrationConfig cfg;
  ArbiterState st;
  const ArbitrationInput at_20_5{true, QpStatus::solved, 20.5, 0.001};
  for (int i = 0; i < 10; ++i) {
    const auto d = arbitrate(st, at_20_5, cfg);
    EXPECT_EQ(d.source, ControlSource::pure_pursuit);
    st = d.next;
  }
  const ArbitrationInput at_22{true, QpStatus::solved, 22.0, 0.001};
  for (int i = 1; i <= 5; ++i) {
    const auto d = arbitrate(st, at_22, cfg);
    EXPECT_EQ(d.source, i < 5 ? ControlSource::pure_pursuit : ControlSource::mpc) << i;
    st = d.next;
  }
}

TEST(Arbitrate, TagStrings) {
  EXPECT_EQ(to_string(ControlSource::mpc), "mpc");
  EXPECT_EQ(to_string(ControlSource::pure_pursuit), "pp");
}

// --- properties -------------------------------------------------------------

TEST(BackupProperty, ArbitrationIsPure) {
  std::mt19937 rng(30);
  std::uniform_real_distribution<double> v(0.0, 80.0), t(0.0, 0.02);
  std::uniform_int_distribution<int> st(0, 2), streak(0, 8), b(0, 1);
  for (int i = 0; i < 2000; ++i) {
    const ArbiterState s{b(rng) == 1, streak(rng)};
    const ArbitrationInput in{b(rng) == 1, static_cast<QpStatus>(st(rng)), v(rng), t(rng)};
    const auto a = arbitrate(s, in, {});
    const auto c = arbitrate(s, in, {});
    EXPECT_EQ(a.source, c.source);
    EXPECT_EQ(a.next.mpc_active, c.next.mpc_active);
    EXPECT_EQ(a.next.good_streak, c.next.good_streak);
    if (a.source == ControlSource::mpc) {
      EXPECT_EQ(in.status, QpStatus::solved);
      EXPECT_GE(in.v_x, 20.0);
    }
  }
}

TEST(BackupProperty, PurePursuitIsOddInLateralOffset) {
  std::mt19937 rng(31);
  std::uniform_real_distribution<double> x(10.0, 150.0), y(-4.0, 4.0), psi(-0.2, 0.2), v(0.0, 80.0);
  const Raceline line = make_straight(300.0, 40.0);
  for (int i = 0; i < 500; ++i) {
    const double px = x(rng), py = y(rng), ps = psi(rng), vv = v(rng);
    const double a = pure_pursuit_steer(line, {px, py, ps}, vv, {}, 2.95, 0.35);
    const double b = pure_pursuit_steer(line, {px, -py, -ps}, vv, {}, 2.95, 0.35);
    EXPECT_NEAR(a, -b, 1e-12);
  }
}

TEST(BackupProperty, PidOutputAndIntegratorStayBounded) {
  std::mt19937 rng(32);
  std::uniform_real_distribution<double> vref(0.0, 90.0), vx(0.0, 90.0), dt(0.001, 0.1);
  PidConfig cfg;
  cfg.kd = 0.2;
  PidState st;
  for (int i = 0; i < 20000; ++i) {
    const double a = pid_accel(vref(rng), vx(rng), dt(rng), st, cfg);
    ASSERT_GE(a, cfg.a_min);
    ASSERT_LE(a, cfg.a_max);
    ASSERT_LE(std::abs(st.integral), cfg.integrator_limit);
  }
}
