#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "lpvmpc/harness.hpp"

using namespace lpvmpc;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigDir = LPVMPC_CONFIG_DIR;

fs::path scratch_dir(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("lpvmpc_harness_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

ScenarioConfig parse_scenario(const std::string& body, const fs::path& base = ".") {
  std::istringstream in(body);
  return read_scenario(KeyValueFile::parse(in), base);
}

std::string telemetry_text(const std::vector<TelemetryRow>& rows) {
  std::ostringstream os;
  write_telemetry(os, rows);
  return os.str();
}

TelemetryRow synthetic_row(double t, double v, double e_y, int lap = 0) {
  TelemetryRow r;
  r.t = t;
  r.state.v_x = v;
  r.e_y = e_y;
  r.lap = lap;
  r.source = "mpc";
  r.qp_status = "solved";
  return r;
}

}  // namespace

// --- configuration ----------------------------------------------------------

TEST(HarnessConfig, ShippedOvalScenarioLoads) {
  const auto c = load_scenario(kConfigDir / "oval_70.toml");
  EXPECT_EQ(c.name, "oval_70");
  EXPECT_EQ(c.track.kind, "oval");
  EXPECT_NEAR(c.track.bank, 20.0 * std::numbers::pi / 180.0, 1e-15);
  EXPECT_DOUBLE_EQ(c.vehicle.vp.m, 393.5);
  EXPECT_DOUBLE_EQ(c.vehicle.vp.c_f, 0.5 * c_linear(presets::kFinalRunFront));
  EXPECT_DOUBLE_EQ(c.vehicle.vp.c_r, 0.5 * c_linear(presets::kFinalRunRear));
  EXPECT_EQ(c.weights.q[2], 40.0);
  EXPECT_EQ(c.mpc.n_steps, 45);
}

TEST(HarnessConfig, NameDefaultsToFileStem) {
  const auto dir = scratch_dir("stem");
  std::ofstream(dir / "my_run.toml") << "[run]\nduration = 1.0\n";
  EXPECT_EQ(load_scenario(dir / "my_run.toml").name, "my_run");
}

TEST(HarnessConfig, InlineVehicleAndPresetTires) {
  const auto c = parse_scenario(
      "[vehicle]\nm = 500\nc_f = 40000\n[tires.front]\npreset = \"practice\"\n[tires.rear]\nd_p = 4000\n");
  EXPECT_DOUBLE_EQ(c.vehicle.vp.m, 500.0);
  EXPECT_DOUBLE_EQ(c.vehicle.vp.c_f, 40000.0);
  EXPECT_DOUBLE_EQ(c.vehicle.tires.front.b_p, presets::kPracticeFront.b_p);
  EXPECT_DOUBLE_EQ(c.vehicle.tires.rear.d_p, 4000.0);
  EXPECT_DOUBLE_EQ(c.vehicle.tires.rear.b_p, presets::kFinalRunRear.b_p);
}

TEST(HarnessConfig, RejectsInvalidInputs) {
  EXPECT_THROW(load_scenario("/nonexistent/missing.toml"), ValidationError);
  EXPECT_THROW(parse_scenario("[vehicle]\nfile = \"/nonexistent/vehicle.toml\"\n"), ValidationError);
  EXPECT_THROW(parse_scenario("[track]\nfile = \"/nonexistent/line.csv\"\n"), ValidationError);
  EXPECT_THROW(parse_scenario("[run]\nduration = 0\n"), ValidationError);
  EXPECT_THROW(parse_scenario("[run]\ncontrol_period = 0.0205\n"), ValidationError);
  EXPECT_THROW(parse_scenario("[track]\nkind = \"figure8\"\n").validate(), ValidationError);
  EXPECT_THROW(build_track(parse_scenario("[track]\nkind = \"figure8\"\n").track), ValidationError);
  EXPECT_THROW(parse_scenario("[controller]\nq = [1, 2, 3]\n"), ValidationError);
  EXPECT_THROW(parse_scenario("[tires.front]\npreset = \"wet\"\n"), ValidationError);
  EXPECT_THROW(parse_scenario("[vehicle]\nm = -1\n"), ValidationError);
}

TEST(HarnessConfig, RelativeFilesResolveAgainstConfigDir) {
  const auto dir = scratch_dir("relative");
  std::ofstream(dir / "veh.toml") << "[vehicle]\nm = 600\n";
  {
    std::ofstream line(dir / "line.csv");
    write_raceline(make_circle(200.0, 30.0, 0.0, 1.0), line);
  }
  std::ofstream(dir / "s.toml") << "[vehicle]\nfile = \"veh.toml\"\n[track]\nfile = \"line.csv\"\n";
  const auto c = load_scenario(dir / "s.toml");
  EXPECT_DOUBLE_EQ(c.vehicle.vp.m, 600.0);
  EXPECT_EQ(c.track.kind, "file");
  EXPECT_NEAR(build_track(c.track).length(), 2.0 * std::numbers::pi * 200.0, 0.1);
}

TEST(HarnessConfig, OutputDirFallsBackToEnvironment) {
  ::setenv(kOutputDirEnv, "/tmp/from_env", 1);
  EXPECT_EQ(default_output_dir(), fs::path("/tmp/from_env"));
  ::unsetenv(kOutputDirEnv);
  EXPECT_EQ(default_output_dir(), fs::path("lpvmpc_out"));
}

// --- closed loop ------------------------------------------------------------

TEST(HarnessRun, StraightMatchedStartHoldsTheLine) {
  auto c = parse_scenario("[track]\nkind = \"straight\"\nstraight = 1000\nv_ref = 30\n[run]\nduration = 10\nstart_speed = 30\n");
  const auto r = run_scenario(c);
  ASSERT_EQ(r.rows.size(), 500u);
  double worst = 0.0;
  for (const auto& row : r.rows) worst = std::max(worst, std::abs(row.e_y));
  EXPECT_LT(worst, 1e-3);
}

TEST(HarnessRun, OvalProducesLapsWithoutFallback) {
  auto c = load_scenario(kConfigDir / "oval_70.toml");
  c.run.duration = 45.0;
  c.run.deterministic_timing = true;
  const auto r = run_scenario(c);
  ASSERT_EQ(r.laps.size(), 2u);
  EXPECT_TRUE(r.laps[0].complete);
  EXPECT_FALSE(r.laps[1].complete);
  // a lap from 25 m/s takes longer than the 70 m/s ideal
  const double ideal = build_track(c.track).length() / 70.0;
  EXPECT_GT(r.laps[0].lap_time, ideal);
  EXPECT_LT(r.laps[0].lap_time, ideal + 5.0);
  EXPECT_EQ(r.post_launch.fallback_tick_count, 0u);
  EXPECT_EQ(r.constraint_violations, 0u);
  EXPECT_LT(r.post_launch.max_abs_e_y, 0.5);
  for (const auto& m : r.laps) EXPECT_GE(m.max_abs_e_y, std::abs(m.mean_e_y));
}

TEST(HarnessRun, RampHandsOverToMpcExactlyOnce) {
  const auto c = load_scenario(kConfigDir / "ramp_15_30.toml");
  const auto r = run_scenario(c);
  EXPECT_EQ(r.handovers_to_mpc, 1);
  EXPECT_EQ(r.handovers_to_pp, 0);
  std::size_t first_mpc = r.rows.size();
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    if (r.rows[i].source == "mpc") {
      first_mpc = i;
      break;
    }
  }
  ASSERT_LT(first_mpc, r.rows.size());
  ASSERT_GE(first_mpc, 4u);
  // hysteresis: the hand-back tick closes a streak of 5 good ticks above 21 m/s
  for (std::size_t k = first_mpc - 4; k <= first_mpc; ++k) {
    EXPECT_GE(r.rows[k].state.v_x, c.arbitration.v_reentry);
    EXPECT_EQ(r.rows[k].qp_status, "solved");
  }
  EXPECT_LT(r.rows[first_mpc - 5].state.v_x, c.arbitration.v_reentry);
  EXPECT_GT(r.rows.back().state.v_x, 29.0);
}

TEST(HarnessRun, ForcedMaxIterTicksAreTaggedPurePursuit) {
  const auto c = load_scenario(kConfigDir / "oval_70_max_iter.toml");
  const auto r = run_scenario(c);
  std::size_t max_iter_ticks = 0;
  for (const auto& row : r.rows) {
    if (row.qp_status == "max_iter") {
      ++max_iter_ticks;
      EXPECT_EQ(row.source, "pp");
      EXPECT_EQ(row.delta_applied,
                std::clamp(row.state.delta +
                               std::clamp((row.delta_cmd_pp - row.state.delta) / 0.02, -1.0, 1.0) * 0.02,
                           -0.35, 0.35));
    }
  }
  EXPECT_EQ(max_iter_ticks, r.rows.size());
}

TEST(HarnessRun, OpenLineStopsAtItsEnd) {
  auto c = parse_scenario("[track]\nkind = \"straight\"\nstraight = 200\nv_ref = 25\n[run]\nduration = 60\n");
  const auto r = run_scenario(c);
  EXPECT_LT(r.rows.size(), 1000u);
  EXPECT_GE(r.rows.back().s_proj, 199.0 - 1e-9);
}

TEST(HarnessRun, LapLimitStopsTheRun) {
  auto c = parse_scenario("[track]\nkind = \"circle\"\nradius = 100\nv_ref = 25\n[run]\nlaps = 1\nduration = 120\n");
  const auto r = run_scenario(c);
  EXPECT_EQ(r.rows.back().lap, 1);
  EXPECT_TRUE(r.laps.front().complete);
  EXPECT_NEAR(r.laps.front().lap_time, 2.0 * std::numbers::pi * 100.0 / 25.0, 0.5);
}

TEST(HarnessRun, DivergingPlantReportsRowIndex) {
  // An unbounded longitudinal command overflows the first RK4 stage.
  auto c = parse_scenario("[pid]\nkp = 1e308\na_max = 1e308\n[run]\nduration = 2\n");
  try {
    run_scenario(c);
    FAIL() << "expected divergence";
  } catch (const SimulationError& e) {
    EXPECT_NE(std::string(e.what()).find("row 0"), std::string::npos) << e.what();
  }
}

TEST(HarnessRun, QpDumpWritesRequestedTick) {
  auto c = load_scenario(kConfigDir / "oval_70.toml");
  c.run.duration = 0.1;
  const auto dir = scratch_dir("dump");
  run_scenario(c, {{3}, dir});
  EXPECT_TRUE(fs::exists(dir / "qp_tick3.txt"));
  EXPECT_FALSE(fs::exists(dir / "qp_tick2.txt"));
}

TEST(HarnessRun, WritesAllOutputFiles) {
  auto c = load_scenario(kConfigDir / "oval_70.toml");
  c.run.duration = 1.0;
  const auto dir = scratch_dir("outputs");
  const auto r = run_scenario(c);
  write_run(c, r, dir);
  for (const char* f : {"telemetry.csv", "laps.csv", "summary.toml", "sysid_log.csv"}) EXPECT_TRUE(fs::exists(dir / f)) << f;
  EXPECT_EQ(load_telemetry(dir / "telemetry.csv").size(), 50u);
  EXPECT_EQ(load_log(dir / "sysid_log.csv").size(), 50u);
  const auto summary = KeyValueFile::load(dir / "summary.toml");
  EXPECT_EQ(summary.get_int("run", "ticks", -1), 50);
}

TEST(HarnessRun, BatchRunsScenariosInParallelAndIsolatesFailures) {
  auto good = load_scenario(kConfigDir / "oval_70.toml");
  good.run.duration = 0.5;
  auto other = good;
  other.name = "second";
  auto bad = parse_scenario("[pid]\nkp = 1e308\na_max = 1e308\n[run]\nduration = 2\n");
  bad.name = "bad";
  const auto root = scratch_dir("batch");
  const auto out = run_batch({good, other, bad}, 3, root);
  ASSERT_EQ(out.size(), 3u);
  EXPECT_TRUE(out[0].ok);
  EXPECT_TRUE(out[1].ok);
  EXPECT_FALSE(out[2].ok);
  EXPECT_TRUE(fs::exists(root / "oval_70" / "telemetry.csv"));
  EXPECT_TRUE(fs::exists(root / "second" / "telemetry.csv"));
}

// --- telemetry and metrics --------------------------------------------------

TEST(HarnessTelemetry, RoundTripIsExact) {
  auto c = load_scenario(kConfigDir / "oval_70.toml");
  c.run.duration = 0.5;
  const auto rows = run_scenario(c).rows;
  std::istringstream in(telemetry_text(rows));
  const auto back = read_telemetry(in);
  ASSERT_EQ(back.size(), rows.size());
  EXPECT_EQ(telemetry_text(back), telemetry_text(rows));
  EXPECT_TRUE(std::isnan(back[0].model_error_1step));
}

TEST(HarnessTelemetry, MissingColumnIsAParseError) {
  std::istringstream in("t,x\n0,1\n");
  EXPECT_THROW(read_telemetry(in), ParseError);
  std::istringstream empty("");
  EXPECT_TRUE(read_telemetry(empty).empty());
}

TEST(HarnessMetrics, HandComputedLap) {
  std::vector<TelemetryRow> rows{synthetic_row(0.0, 30, 9.0), synthetic_row(1.0, 30, 1.0),
                                 synthetic_row(2.0, 30, -1.0), synthetic_row(3.0, 30, 3.0, 1)};
  rows[1].e_psi = -0.2;
  rows[1].solve_time = 0.004;
  rows[2].solve_time = 0.002;
  rows[2].source = "pp";
  rows[2].a_y = -12.0;
  const auto laps = lap_metrics(rows, 1.0);
  ASSERT_EQ(laps.size(), 2u);
  const auto& m = laps[0];
  EXPECT_TRUE(m.complete);
  EXPECT_DOUBLE_EQ(m.lap_time, 3.0);
  EXPECT_EQ(m.ticks, 2u);
  EXPECT_DOUBLE_EQ(m.mean_e_y, 0.0);
  EXPECT_DOUBLE_EQ(m.std_e_y, 1.0);
  EXPECT_DOUBLE_EQ(m.max_abs_e_y, 1.0);
  EXPECT_DOUBLE_EQ(m.max_abs_e_psi, 0.2);
  EXPECT_DOUBLE_EQ(m.mean_solve_time, 0.003);
  EXPECT_DOUBLE_EQ(m.max_solve_time, 0.004);
  EXPECT_DOUBLE_EQ(m.max_a_y, 12.0);
  EXPECT_EQ(m.fallback_tick_count, 1u);
  EXPECT_FALSE(laps[1].complete);
  EXPECT_TRUE(std::isnan(laps[1].lap_time));
}

TEST(HarnessMetrics, Percentile) {
  EXPECT_DOUBLE_EQ(percentile({3.0, 1.0, 2.0}, 0.5), 2.0);
  EXPECT_DOUBLE_EQ(percentile({0.0, 10.0}, 0.99), 9.9);
  EXPECT_DOUBLE_EQ(percentile({}, 0.99), 0.0);
}

// --- analysis ---------------------------------------------------------------

TEST(HarnessAnalyze, ConstantSpeedGivesOneBin) {
  std::vector<TelemetryRow> rows;
  for (int i = 0; i < 100; ++i) rows.push_back(synthetic_row(i * 0.02, 31.0, 0.01 * i));
  const auto b = analyze(rows);
  ASSERT_EQ(b.bins.size(), 1u);
  EXPECT_DOUBLE_EQ(b.bins[0].v_lo, 30.0);
  EXPECT_EQ(b.bins[0].e_y.count, 100u);
}

TEST(HarnessAnalyze, LinearTrendSlopeRecovered) {
  std::vector<TelemetryRow> rows;
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> v(20.0, 70.0);
  for (int i = 0; i < 5000; ++i) {
    const double vx = v(rng);
    rows.push_back(synthetic_row(i * 0.02, vx, 0.01 * vx));
  }
  const auto b = analyze(rows);
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (const auto& bin : b.bins) {
    const double x = 0.5 * (bin.v_lo + bin.v_hi);
    sx += x;
    sy += bin.e_y.mean;
    sxx += x * x;
    sxy += x * bin.e_y.mean;
  }
  const double n = static_cast<double>(b.bins.size());
  const double slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  EXPECT_NEAR(slope, 0.01, 0.05 * 0.01);
}

TEST(HarnessAnalyze, GgExtremeIsReported) {
  std::vector<TelemetryRow> rows;
  for (int i = 0; i < 50; ++i) {
    auto r = synthetic_row(i * 0.02, 40.0 + 0.5 * i, 0.0);
    r.a_y = 20.0 * std::sin(0.1 * i);
    r.a_x_cmd = -3.0;
    rows.push_back(r);
  }
  rows[17].a_y = 27.0;
  const auto b = analyze(rows);
  EXPECT_DOUBLE_EQ(b.max_abs_a_y, 27.0);
  EXPECT_DOUBLE_EQ(b.v_at_max_a_y, rows[17].state.v_x);
  EXPECT_DOUBLE_EQ(b.max_abs_a_x, 3.0);
  ASSERT_EQ(b.gg.size(), rows.size());
  EXPECT_DOUBLE_EQ(b.gg[17].a_y, 27.0);
}

TEST(HarnessAnalyze, EmptyTelemetryGivesEmptyBundle) {
  const auto b = analyze({});
  EXPECT_TRUE(b.bins.empty());
  EXPECT_TRUE(b.gg.empty());
}

TEST(HarnessAnalyze, ModelErrorBinsSkipMissingEntries) {
  std::vector<TelemetryRow> rows{synthetic_row(0, 30, 0), synthetic_row(0.02, 30, 0)};
  rows[0].model_error_1step = std::numeric_limits<double>::quiet_NaN();
  rows[1].model_error_1step = 0.25;
  const auto b = analyze(rows);
  ASSERT_EQ(b.bins.size(), 1u);
  EXPECT_EQ(b.bins[0].model_error.count, 1u);
  EXPECT_DOUBLE_EQ(b.bins[0].model_error.mean, 0.25);
}

TEST(HarnessAnalyze, WritesCsvFiles) {
  const auto dir = scratch_dir("analyze");
  std::vector<TelemetryRow> rows{synthetic_row(0, 30, 0.1), synthetic_row(0.02, 33, 0.2)};
  write_analysis(analyze(rows), dir);
  for (const char* f : {"error_vs_velocity.csv", "model_error_vs_velocity.csv", "gg.csv", "analysis.toml"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
  std::ifstream in(dir / "error_vs_velocity.csv");
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  EXPECT_EQ(n, 3);
}

// --- properties -------------------------------------------------------------

TEST(HarnessProperty, DeterministicTimingGivesByteIdenticalTelemetry) {
  auto c = load_scenario(kConfigDir / "oval_70.toml");
  c.run.duration = 4.0;
  c.run.deterministic_timing = true;
  c.run.imu_noise_std = 0.2;
  const auto a = run_scenario(c);
  const auto b = run_scenario(c);
  EXPECT_EQ(telemetry_text(a.rows), telemetry_text(b.rows));
  std::ostringstream la, lb;
  write_log(la, a.sysid_log);
  write_log(lb, b.sysid_log);
  EXPECT_EQ(la.str(), lb.str());
}

TEST(HarnessProperty, OneSourceTagPerTickAndFallbackCountMatches) {
  for (const char* name : {"oval_70.toml", "ramp_15_30.toml"}) {
    auto c = load_scenario(kConfigDir / name);
    c.run.duration = std::min(c.run.duration, 30.0);
    c.run.launch_window = 0.0;
    const auto r = run_scenario(c);
    std::size_t pp = 0;
    for (const auto& row : r.rows) {
      EXPECT_TRUE(row.source == "mpc" || row.source == "pp");
      pp += row.source != "mpc";
    }
    EXPECT_EQ(r.post_launch.fallback_tick_count, pp) << name;
    EXPECT_EQ(r.post_launch.ticks, r.rows.size());
  }
}

TEST(HarnessProperty, ModelErrorRecomputesFromLoggedPredictions) {
  auto c = load_scenario(kConfigDir / "oval_70.toml");
  c.run.duration = 15.0;
  const auto r = run_scenario(c);
  std::istringstream in(telemetry_text(r.rows));
  const auto rows = read_telemetry(in);
  const double frac = r.prediction_fraction;
  std::size_t checked = 0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    if (std::isnan(rows[i - 1].ey_pred0)) {
      EXPECT_TRUE(std::isnan(rows[i].model_error_1step));
      continue;
    }
    const double recomputed = (1.0 - frac) * rows[i - 1].ey_pred0 + frac * rows[i - 1].ey_pred1 - rows[i].e_y;
    EXPECT_NEAR(recomputed, rows[i].model_error_1step, 1e-9);
    ++checked;
  }
  EXPECT_GT(checked, 700u);
}

TEST(HarnessProperty, LapMetricsAreConsistent) {
  auto c = load_scenario(kConfigDir / "oval_70.toml");
  c.run.duration = 45.0;
  const auto r = run_scenario(c);
  std::size_t ticks = 0, fallback = 0;
  for (const auto& m : r.laps) {
    EXPECT_GE(m.max_abs_e_y, std::abs(m.mean_e_y));
    EXPECT_GE(m.std_e_y, 0.0);
    EXPECT_GE(m.max_solve_time, m.mean_solve_time);
    ticks += m.ticks;
    fallback += m.fallback_tick_count;
  }
  EXPECT_EQ(ticks, r.post_launch.ticks);
  EXPECT_EQ(fallback, r.post_launch.fallback_tick_count);
}
