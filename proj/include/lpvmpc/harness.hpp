#pragma once

// Closed-loop lap simulation: plant at 1 ms, controller at 50 Hz, telemetry
// and lap metrics on disk, plus the offline velocity-binned analysis.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "lpvmpc/backup_controllers.hpp"
#include "lpvmpc/config.hpp"
#include "lpvmpc/mpc_controller.hpp"
#include "lpvmpc/plant_sim.hpp"
#include "lpvmpc/sysid.hpp"
#include "lpvmpc/track.hpp"
#include "lpvmpc/track_gen.hpp"

namespace lpvmpc {

/// The simulation itself failed (diverged plant, unwritable output).
class SimulationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kOutputDirEnv = "LPVMPC_OUTPUT_DIR";

inline std::filesystem::path default_output_dir() {
  const char* env = std::getenv(kOutputDirEnv);
  return (env && *env) ? std::filesystem::path(env) : std::filesystem::path("lpvmpc_out");
}

// --- parameter files --------------------------------------------------------

inline PacejkaAxleParams read_axle(const KeyValueFile& kv, const std::string& section, PacejkaAxleParams p) {
  const std::string preset = kv.get_string(section, "preset", "");
  if (preset == "final_run") {
    p = section.ends_with("front") ? presets::kFinalRunFront : presets::kFinalRunRear;
  } else if (preset == "practice") {
    p = section.ends_with("front") ? presets::kPracticeFront : presets::kPracticeRear;
  } else if (!preset.empty()) {
    throw ValidationError(section + ".preset must be \"final_run\" or \"practice\"");
  }
  p.b_p = kv.get_double(section, "b_p", p.b_p);
  p.c_p = kv.get_double(section, "c_p", p.c_p);
  p.d_p = kv.get_double(section, "d_p", p.d_p);
  p.e_p = kv.get_double(section, "e_p", p.e_p);
  p.validate();
  return p;
}

inline TireSet read_tires(const KeyValueFile& kv, const TireSet& fallback) {
  return {read_axle(kv, "tires.front", fallback.front), read_axle(kv, "tires.rear", fallback.rear)};
}

struct VehicleSetup {
  VehicleParams vp;
  TireSet tires;  ///< plant truth
};

/// [vehicle] geometry and controller stiffness, [tires.front] / [tires.rear]
/// plant tires. Controller stiffness defaults to half the plant's axle value.
inline VehicleSetup read_vehicle(const KeyValueFile& kv) {
  VehicleSetup s;
  s.tires = read_tires(kv, TireSet{});
  VehicleParams& vp = s.vp;
  vp.m = kv.get_double("vehicle", "m", vp.m);
  vp.i_z = kv.get_double("vehicle", "i_z", vp.i_z);
  vp.l_f = kv.get_double("vehicle", "l_f", vp.l_f);
  vp.l_r = kv.get_double("vehicle", "l_r", vp.l_r);
  vp.c_f = kv.get_double("vehicle", "c_f", 0.5 * c_linear(s.tires.front));
  vp.c_r = kv.get_double("vehicle", "c_r", 0.5 * c_linear(s.tires.rear));
  vp.delta_max = kv.get_double("vehicle", "delta_max", vp.delta_max);
  vp.delta_rate_max = kv.get_double("vehicle", "delta_rate_max", vp.delta_rate_max);
  vp.validate();
  return s;
}

inline VehicleSetup load_vehicle(const std::filesystem::path& path) { return read_vehicle(KeyValueFile::load(path)); }

// --- scenario ---------------------------------------------------------------

struct TrackSpec {
  std::string kind = "oval";  ///< oval | straight | circle | file
  std::filesystem::path file;
  double straight = 300.0;  ///< oval straights, or straight length [m]
  double radius = 300.0;    ///< [m]
  double bank = 0.0;        ///< [rad]
  double v_ref = 70.0;      ///< [m/s]
  double v_ref_end = -1.0;  ///< straight only: linear ramp target
  double spacing = 1.0;     ///< [m]
  double bank_transition = 30.0;  ///< [m]
};

inline Raceline build_track(const TrackSpec& t) {
  if (t.kind == "oval") {
    OvalSpec o;
    o.straight = t.straight;
    o.radius = t.radius;
    o.bank = t.bank;
    o.v_ref = t.v_ref;
    o.spacing = t.spacing;
    o.bank_transition = t.bank_transition;
    return make_oval(o);
  }
  if (t.kind == "straight") return make_straight(t.straight, t.v_ref, t.spacing, t.v_ref_end);
  if (t.kind == "circle") return make_circle(t.radius, t.v_ref, t.bank, t.spacing);
  if (t.kind == "file") return load_raceline(t.file);
  throw ValidationError("track.kind must be oval, straight, circle or file");
}

struct RunSpec {
  double duration = 60.0;  ///< [s]
  int laps = 0;            ///< stop after this many completed laps; 0 = duration only
  double start_speed = 25.0;
  double start_s = 0.0;
  double launch_window = 10.0;  ///< excluded from metrics [s]
  double plant_dt = 0.001;
  double control_period = 0.02;
  unsigned seed = 1;
  /// Log solve_time as qp_iterations * time_per_iteration instead of wall time.
  bool deterministic_timing = false;
  double time_per_iteration = 2e-5;  ///< [s]
  double imu_noise_std = 0.0;        ///< added to the sysid log's a_y [m/s^2]
};

struct ScenarioConfig {
  std::string name = "scenario";
  TrackSpec track;
  VehicleSetup vehicle;
  MpcWeights weights;
  MpcConfig mpc;
  QpSettings qp;
  PurePursuitConfig pure_pursuit;
  PidConfig pid;
  ArbitrationConfig arbitration;
  PlantOptions plant;
  RunSpec run;
  std::filesystem::path output_dir;  ///< empty: decided by the caller

  void validate() const {
    if (track.kind != "oval" && track.kind != "straight" && track.kind != "circle" && track.kind != "file") {
      throw ValidationError("track.kind must be oval, straight, circle or file");
    }
    if (!(run.duration > 0.0)) throw ValidationError("run.duration must be positive");
    if (run.laps < 0) throw ValidationError("run.laps must be >= 0");
    if (!(run.plant_dt > 0.0 && run.plant_dt <= 0.02)) throw ValidationError("run.plant_dt must lie in (0, 0.02]");
    const double ratio = run.control_period / run.plant_dt;
    if (!(run.control_period > 0.0) || std::abs(ratio - std::round(ratio)) > 1e-9 || std::round(ratio) < 1.0) {
      throw ValidationError("run.control_period must be a positive multiple of run.plant_dt");
    }
    if (!(run.start_speed >= 0.0)) throw ValidationError("run.start_speed must be >= 0");
    if (!(run.launch_window >= 0.0)) throw ValidationError("run.launch_window must be >= 0");
    if (!(run.time_per_iteration > 0.0)) throw ValidationError("run.time_per_iteration must be positive");
    if (!(run.imu_noise_std >= 0.0)) throw ValidationError("run.imu_noise_std must be >= 0");
    if (track.kind == "file" && !std::filesystem::exists(track.file)) {
      throw ValidationError("raceline file not found: " + track.file.string());
    }
    vehicle.vp.validate();
    weights.validate();
    mpc.validate();
    pure_pursuit.validate();
    pid.validate();
    arbitration.validate();
  }
};

inline ScenarioConfig read_scenario(const KeyValueFile& kv, const std::filesystem::path& base_dir) {
  auto resolve = [&](const std::string& p) {
    const std::filesystem::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  };
  ScenarioConfig c;
  c.name = kv.get_string("run", "name", c.name);

  TrackSpec& t = c.track;
  t.kind = kv.get_string("track", "kind", t.kind);
  if (kv.has("track", "file")) {
    t.kind = "file";
    t.file = resolve(kv.get_string("track", "file", ""));
  }
  t.straight = kv.get_double("track", "straight", t.straight);
  t.radius = kv.get_double("track", "radius", t.radius);
  t.bank = kv.get_double("track", "bank_deg", 0.0) * std::numbers::pi / 180.0;
  t.v_ref = kv.get_double("track", "v_ref", t.v_ref);
  t.v_ref_end = kv.get_double("track", "v_ref_end", t.v_ref_end);
  t.spacing = kv.get_double("track", "spacing", t.spacing);
  t.bank_transition = kv.get_double("track", "bank_transition", t.bank_transition);

  if (kv.has("vehicle", "file")) {
    const auto path = resolve(kv.get_string("vehicle", "file", ""));
    if (!std::filesystem::exists(path)) throw ValidationError("vehicle file not found: " + path.string());
    c.vehicle = load_vehicle(path);
  } else {
    c.vehicle = read_vehicle(kv);
  }

  const auto q = kv.get_doubles("controller", "q", {c.weights.q.begin(), c.weights.q.end()});
  if (q.size() != c.weights.q.size()) throw ValidationError("controller.q needs 5 entries");
  std::copy(q.begin(), q.end(), c.weights.q.begin());
  c.weights.r = kv.get_double("controller", "r", c.weights.r);
  c.weights.q_beta = kv.get_double("controller", "q_beta", c.weights.q_beta);
  c.mpc.horizon_t = kv.get_double("controller", "horizon_t", c.mpc.horizon_t);
  c.mpc.n_steps = kv.get_int("controller", "n_steps", c.mpc.n_steps);
  c.mpc.terminal_scale = kv.get_double("controller", "terminal_scale", c.mpc.terminal_scale);
  c.mpc.delta_max = c.vehicle.vp.delta_max;
  c.mpc.rate_max = c.vehicle.vp.delta_rate_max;

  c.qp.max_iter = kv.get_int("qp", "max_iter", c.qp.max_iter);
  c.qp.eps_abs = kv.get_double("qp", "eps_abs", c.qp.eps_abs);
  c.qp.eps_rel = kv.get_double("qp", "eps_rel", c.qp.eps_rel);
  c.qp.rho = kv.get_double("qp", "rho", c.qp.rho);
  c.qp.polish = kv.get_bool("qp", "polish", c.qp.polish);

  c.pure_pursuit.lookahead_gain = kv.get_double("pure_pursuit", "lookahead_gain", c.pure_pursuit.lookahead_gain);
  c.pure_pursuit.lookahead_min = kv.get_double("pure_pursuit", "lookahead_min", c.pure_pursuit.lookahead_min);
  c.pure_pursuit.lookahead_max = kv.get_double("pure_pursuit", "lookahead_max", c.pure_pursuit.lookahead_max);

  c.pid.kp = kv.get_double("pid", "kp", c.pid.kp);
  c.pid.ki = kv.get_double("pid", "ki", c.pid.ki);
  c.pid.kd = kv.get_double("pid", "kd", c.pid.kd);
  c.pid.a_min = kv.get_double("pid", "a_min", c.pid.a_min);
  c.pid.a_max = kv.get_double("pid", "a_max", c.pid.a_max);
  c.pid.integrator_limit = kv.get_double("pid", "integrator_limit", c.pid.integrator_limit);

  c.arbitration.v_min = kv.get_double("arbitration", "v_min", c.arbitration.v_min);
  c.arbitration.v_reentry = kv.get_double("arbitration", "v_reentry", c.arbitration.v_reentry);
  c.arbitration.reentry_ticks = kv.get_int("arbitration", "reentry_ticks", c.arbitration.reentry_ticks);
  c.arbitration.deadline = kv.get_double("arbitration", "deadline", c.arbitration.deadline);
  c.arbitration.enforce_deadline = kv.get_bool("arbitration", "enforce_deadline", c.arbitration.enforce_deadline);

  c.plant.rear_slip_coupling = kv.get_bool("plant", "rear_slip_coupling", c.plant.rear_slip_coupling);
  c.plant.rear_slip_gain = kv.get_double("plant", "rear_slip_gain", c.plant.rear_slip_gain);
  c.plant.rear_slip_a_ref = kv.get_double("plant", "rear_slip_a_ref", c.plant.rear_slip_a_ref);
  c.plant.rear_slip_floor = kv.get_double("plant", "rear_slip_floor", c.plant.rear_slip_floor);

  RunSpec& r = c.run;
  r.duration = kv.get_double("run", "duration", r.duration);
  r.laps = kv.get_int("run", "laps", r.laps);
  r.start_speed = kv.get_double("run", "start_speed", r.start_speed);
  r.start_s = kv.get_double("run", "start_s", r.start_s);
  r.launch_window = kv.get_double("run", "launch_window", r.launch_window);
  r.plant_dt = kv.get_double("run", "plant_dt", r.plant_dt);
  r.control_period = kv.get_double("run", "control_period", r.control_period);
  const int seed = kv.get_int("run", "seed", static_cast<int>(r.seed));
  if (seed < 0) throw ValidationError("run.seed must be >= 0");
  r.seed = static_cast<unsigned>(seed);
  r.deterministic_timing = kv.get_bool("run", "deterministic_timing", r.deterministic_timing);
  r.time_per_iteration = kv.get_double("run", "time_per_iteration", r.time_per_iteration);
  r.imu_noise_std = kv.get_double("run", "imu_noise_std", r.imu_noise_std);
  c.mpc.control_period = r.control_period;
  if (kv.has("run", "output_dir")) c.output_dir = resolve(kv.get_string("run", "output_dir", ""));

  c.validate();
  return c;
}

inline ScenarioConfig load_scenario(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ValidationError("config file not found: " + path.string());
  const KeyValueFile kv = KeyValueFile::load(path);
  ScenarioConfig c = read_scenario(kv, path.parent_path());
  if (!kv.has("run", "name")) c.name = path.stem().string();
  return c;
}

// --- telemetry --------------------------------------------------------------

struct TelemetryRow {
  double t = 0.0;
  PlantState state;
  double e_y = 0.0;
  double e_psi = 0.0;
  double delta_cmd_mpc = 0.0;
  double delta_cmd_pp = 0.0;
  double delta_applied = 0.0;
  double u0 = 0.0;
  double v_ref = 0.0;
  double a_x_cmd = 0.0;
  double a_y = 0.0;
  std::string qp_status = "skipped";
  std::string source = "pp";
  double solve_time = 0.0;
  double model_error_1step = 0.0;
  double s_proj = 0.0;
  int lap = 0;
  double ey_pred0 = 0.0;  ///< predicted e_y at the node before one control period
  double ey_pred1 = 0.0;  ///< and at the node after it
  int qp_iterations = 0;
};

inline const std::vector<std::string>& telemetry_columns() {
  static const std::vector<std::string> cols{
      "t",          "x",         "y",         "psi",           "v_x",          "v_y",
      "psi_dot",    "delta",     "e_y",       "e_psi",         "delta_cmd_mpc", "delta_cmd_pp",
      "delta_applied", "u0",     "v_ref",     "a_x_cmd",       "a_y",          "qp_status",
      "source",     "solve_time", "model_error_1step", "s_proj", "lap",        "ey_pred0",
      "ey_pred1",   "qp_iterations"};
  return cols;
}

inline void write_telemetry(std::ostream& os, const std::vector<TelemetryRow>& rows) {
  const auto& cols = telemetry_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  auto num = [&](double v) {
    text::write_double(os, v);
    os << ',';
  };
  for (const auto& r : rows) {
    for (double v : {r.t, r.state.x, r.state.y, r.state.psi, r.state.v_x, r.state.v_y, r.state.psi_dot, r.state.delta,
                     r.e_y, r.e_psi, r.delta_cmd_mpc, r.delta_cmd_pp, r.delta_applied, r.u0, r.v_ref, r.a_x_cmd,
                     r.a_y}) {
      num(v);
    }
    os << r.qp_status << ',' << r.source << ',';
    num(r.solve_time);
    num(r.model_error_1step);
    num(r.s_proj);
    os << r.lap << ',';
    num(r.ey_pred0);
    num(r.ey_pred1);
    os << r.qp_iterations << '\n';
  }
}

inline std::vector<TelemetryRow> read_telemetry(std::istream& in, const std::string& origin = "<telemetry>") {
  std::vector<TelemetryRow> rows;
  std::string line;
  if (!std::getline(in, line) || text::trim(line).empty()) return rows;
  const auto header = text::split(text::trim(line), ',');
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const auto& name : telemetry_columns()) {
    if (!col.count(name)) throw ParseError(origin + ": missing column '" + name + "'");
  }
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    const auto f = text::split(text::trim(line), ',');
    const auto where = origin + ":" + std::to_string(line_no);
    if (f.size() != header.size()) throw ParseError(where + ": expected " + std::to_string(header.size()) + " fields");
    auto d = [&](const char* name) {
      const std::string& tok = f[col.at(name)];
      if (tok == "nan") return std::numeric_limits<double>::quiet_NaN();
      return text::parse_double(tok, where + " " + name);
    };
    auto i = [&](const char* name) { return static_cast<int>(d(name)); };
    TelemetryRow r;
    r.t = d("t");
    r.state = {d("x"), d("y"), d("psi"), d("v_x"), d("v_y"), d("psi_dot"), d("delta")};
    r.e_y = d("e_y");
    r.e_psi = d("e_psi");
    r.delta_cmd_mpc = d("delta_cmd_mpc");
    r.delta_cmd_pp = d("delta_cmd_pp");
    r.delta_applied = d("delta_applied");
    r.u0 = d("u0");
    r.v_ref = d("v_ref");
    r.a_x_cmd = d("a_x_cmd");
    r.a_y = d("a_y");
    r.qp_status = f[col.at("qp_status")];
    r.source = f[col.at("source")];
    r.solve_time = d("solve_time");
    r.model_error_1step = d("model_error_1step");
    r.s_proj = d("s_proj");
    r.lap = i("lap");
    r.ey_pred0 = d("ey_pred0");
    r.ey_pred1 = d("ey_pred1");
    r.qp_iterations = i("qp_iterations");
    rows.push_back(std::move(r));
  }
  return rows;
}

inline std::vector<TelemetryRow> load_telemetry(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open telemetry file: " + path.string());
  return read_telemetry(in, path.string());
}

// --- lap metrics ------------------------------------------------------------

struct LapMetrics {
  int lap = -1;  ///< -1 for the whole post-launch window
  bool complete = false;
  double lap_time = std::numeric_limits<double>::quiet_NaN();
  std::size_t ticks = 0;  ///< ticks inside the metrics window
  double mean_e_y = 0.0;
  double std_e_y = 0.0;  ///< population standard deviation
  double max_abs_e_y = 0.0;
  double max_abs_e_psi = 0.0;
  double mean_solve_time = 0.0;  ///< over ticks where the MPC ran
  double max_solve_time = 0.0;
  double max_a_y = 0.0;  ///< largest |a_y|
  std::size_t fallback_tick_count = 0;
};

/// Metrics over rows with t >= t_from; lap = -1 takes every lap.
inline LapMetrics window_metrics(const std::vector<TelemetryRow>& rows, double t_from, int lap) {
  LapMetrics m;
  m.lap = lap;
  double sum = 0.0, sum_solve = 0.0;
  std::size_t solves = 0;
  for (const auto& r : rows) {
    if (r.t < t_from || (lap >= 0 && r.lap != lap)) continue;
    ++m.ticks;
    sum += r.e_y;
    m.max_abs_e_y = std::max(m.max_abs_e_y, std::abs(r.e_y));
    m.max_abs_e_psi = std::max(m.max_abs_e_psi, std::abs(r.e_psi));
    m.max_a_y = std::max(m.max_a_y, std::abs(r.a_y));
    if (r.source != "mpc") ++m.fallback_tick_count;
    if (r.qp_status != "skipped") {
      ++solves;
      sum_solve += r.solve_time;
      m.max_solve_time = std::max(m.max_solve_time, r.solve_time);
    }
  }
  if (m.ticks == 0) return m;
  m.mean_e_y = sum / static_cast<double>(m.ticks);
  double ss = 0.0;
  for (const auto& r : rows) {
    if (r.t < t_from || (lap >= 0 && r.lap != lap)) continue;
    ss += (r.e_y - m.mean_e_y) * (r.e_y - m.mean_e_y);
  }
  m.std_e_y = std::sqrt(ss / static_cast<double>(m.ticks));
  if (solves) m.mean_solve_time = sum_solve / static_cast<double>(solves);
  return m;
}

/// One entry per lap index present; a lap is complete once a later lap starts,
/// and its time runs from its first tick to the first tick of the next lap.
inline std::vector<LapMetrics> lap_metrics(const std::vector<TelemetryRow>& rows, double launch_window) {
  std::map<int, double> first_t;
  for (const auto& r : rows) first_t.emplace(r.lap, r.t);
  std::vector<LapMetrics> out;
  for (auto it = first_t.begin(); it != first_t.end(); ++it) {
    LapMetrics m = window_metrics(rows, launch_window, it->first);
    const auto next = std::next(it);
    if (next != first_t.end()) {
      m.complete = true;
      m.lap_time = next->second - it->second;
    }
    out.push_back(m);
  }
  return out;
}

inline void write_lap_metrics(std::ostream& os, const std::vector<LapMetrics>& laps) {
  os << "lap,complete,lap_time,ticks,mean_e_y,std_e_y,max_abs_e_y,max_abs_e_psi,mean_solve_time,max_solve_time,max_a_y,"
        "fallback_tick_count\n";
  for (const auto& m : laps) {
    os << m.lap << ',' << (m.complete ? 1 : 0) << ',';
    for (double v : {m.lap_time}) {
      text::write_double(os, v);
      os << ',';
    }
    os << m.ticks;
    for (double v : {m.mean_e_y, m.std_e_y, m.max_abs_e_y, m.max_abs_e_psi, m.mean_solve_time, m.max_solve_time,
                     m.max_a_y}) {
      os << ',';
      text::write_double(os, v);
    }
    os << ',' << m.fallback_tick_count << '\n';
  }
}

// --- simulation -------------------------------------------------------------

struct RunOptions {
  std::set<int> dump_qp_ticks;       ///< ticks whose QP is written as text
  std::filesystem::path dump_dir;    ///< where dumps go; required when dumping
};

struct RunResult {
  std::vector<TelemetryRow> rows;
  std::vector<LogRecord> sysid_log;
  std::vector<LapMetrics> laps;
  LapMetrics post_launch;
  std::size_t constraint_violations = 0;  ///< post-launch MPC ticks outside the bounds
  int handovers_to_mpc = 0;
  int handovers_to_pp = 0;
  double mean_solve_time = 0.0;  ///< post-launch ticks where the MPC ran
  double p99_solve_time = 0.0;
  double prediction_fraction = 0.0;  ///< interpolation weight between ey_pred0 and ey_pred1
};

inline double percentile(std::vector<double> v, double q) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

inline RunResult run_scenario(const ScenarioConfig& cfg, const RunOptions& opts = {}) {
  cfg.validate();
  const Raceline line = build_track(cfg.track);
  const VehicleParams& vp = cfg.vehicle.vp;
  const TireSet& tires = cfg.vehicle.tires;
  const double cp = cfg.run.control_period;
  const int substeps = static_cast<int>(std::lround(cp / cfg.run.plant_dt));
  const double plant_dt = cp / substeps;
  const auto ticks = static_cast<long>(std::floor(cfg.run.duration / cp + 1e-9));
  MpcController mpc(vp, cfg.weights, cfg.mpc, cfg.qp);
  const double ts = cfg.mpc.ts();
  const double pos = cp / ts;
  const auto pred_k = static_cast<std::size_t>(std::min(std::floor(pos), static_cast<double>(cfg.mpc.n_steps - 1)));

  RunResult res;
  res.prediction_fraction = pos - static_cast<double>(pred_k);
  res.rows.reserve(static_cast<std::size_t>(ticks));
  std::mt19937_64 rng(cfg.run.seed);
  std::normal_distribution<double> imu_noise(0.0, 1.0);

  const Waypoint w0 = line.sample(cfg.run.start_s);
  PlantState s;
  s.x = w0.x;
  s.y = w0.y;
  s.psi = w0.psi_ref;
  s.v_x = cfg.run.start_speed;
  PidState pid;
  ArbiterState arbiter;
  std::optional<std::size_t> hint;
  std::optional<MpcSolution> last_prediction;
  int lap = 0;
  double prev_s = std::numeric_limits<double>::quiet_NaN();
  ControlSource prev_source = ControlSource::pure_pursuit;
  const double nan = std::numeric_limits<double>::quiet_NaN();
  std::vector<double> solve_times;

  for (long i = 0; i < ticks; ++i) {
    try {
      TelemetryRow row;
      row.t = static_cast<double>(i) * cp;
      row.state = s;
      TrackingErrors e = project(line, {s.x, s.y, s.psi}, hint);
      hint = e.nearest_index;
      const Waypoint wp = line.sample(e.s_proj);
      if (s.v_x >= kMinSpeed) e = error_rates(e, s.v_x, s.v_y, s.psi_dot, wp.kappa);
      if (line.closed() && !std::isnan(prev_s) && e.s_proj < prev_s - 0.5 * line.length()) ++lap;
      prev_s = e.s_proj;
      row.e_y = e.e_y;
      row.e_psi = e.e_psi;
      row.s_proj = e.s_proj;
      row.lap = lap;
      row.model_error_1step = last_prediction ? one_step_model_error(*last_prediction, e.e_y, cp, ts) : nan;

      ArbitrationInput arb_in;
      arb_in.v_x = s.v_x;
      row.delta_cmd_mpc = row.u0 = row.ey_pred0 = row.ey_pred1 = nan;
      std::optional<MpcSolution> sol;
      if (s.v_x >= kMinSpeed) {
        const auto schedule = horizon_schedule(line, e.s_proj, s.v_x, wp.phi, ts, cfg.mpc.n_steps);
        sol = mpc.solve_step({e.e_y, e.e_y_dot, e.e_psi, e.e_psi_dot, s.delta}, schedule);
        if (opts.dump_qp_ticks.count(static_cast<int>(i))) {
          std::filesystem::create_directories(opts.dump_dir);
          std::ofstream qf(opts.dump_dir / ("qp_tick" + std::to_string(i) + ".txt"));
          if (!qf) throw SimulationError("cannot write QP dump into " + opts.dump_dir.string());
          write_qp_text(mpc.last_qp(), qf);
        }
        row.qp_status = to_string(sol->qp_status);
        row.qp_iterations = sol->qp_iterations;
        row.solve_time = cfg.run.deterministic_timing ? sol->qp_iterations * cfg.run.time_per_iteration : sol->solve_time;
        row.u0 = sol->u0;
        row.delta_cmd_mpc = std::clamp(s.delta + sol->u0 * cp, -vp.delta_max, vp.delta_max);
        row.ey_pred0 = sol->predicted_states[pred_k](0);
        row.ey_pred1 = sol->predicted_states[pred_k + 1](0);
        arb_in.mpc_ran = true;
        arb_in.status = sol->qp_status;
        arb_in.solve_time = row.solve_time;
        last_prediction = sol;
      } else {
        row.solve_time = nan;
        last_prediction.reset();
      }

      row.delta_cmd_pp =
          pure_pursuit_steer(line, {s.x, s.y, s.psi}, s.v_x, cfg.pure_pursuit, vp.wheelbase(), vp.delta_max, hint);
      const ArbitrationDecision decision = arbitrate(arbiter, arb_in, cfg.arbitration);
      arbiter = decision.next;
      double rate = 0.0;
      if (decision.source == ControlSource::mpc) {
        rate = sol->u0;
        bool violated = std::abs(rate) > cfg.mpc.rate_max + 1e-9;
        for (const auto& x : sol->predicted_states) violated = violated || std::abs(x(4)) > cfg.mpc.delta_max + 1e-5;
        if (violated && row.t >= cfg.run.launch_window) ++res.constraint_violations;
      } else {
        rate = std::clamp((row.delta_cmd_pp - s.delta) / cp, -vp.delta_rate_max, vp.delta_rate_max);
      }
      if (i > 0 && decision.source != prev_source) {
        (decision.source == ControlSource::mpc ? res.handovers_to_mpc : res.handovers_to_pp)++;
      }
      prev_source = decision.source;
      row.source = std::string(to_string(decision.source));
      row.delta_applied = std::clamp(s.delta + rate * cp, -vp.delta_max, vp.delta_max);
      row.v_ref = wp.v_ref;
      row.a_x_cmd = pid_accel(wp.v_ref, s.v_x, cp, pid, cfg.pid);
      row.a_y = lateral_acceleration(s, row.a_x_cmd, vp, tires, cfg.plant);
      if (std::abs(s.delta) > vp.delta_max + 1e-12 && row.t >= cfg.run.launch_window) ++res.constraint_violations;
      if (row.t >= cfg.run.launch_window && sol) solve_times.push_back(row.solve_time);
      res.sysid_log.push_back(
          {row.t, s.v_x, s.v_y, s.psi_dot, s.delta, row.a_y + cfg.run.imu_noise_std * imu_noise(rng)});

      const bool end_of_line = !line.closed() && e.s_proj >= line.waypoints().back().s - 1.0;
      const bool laps_done = cfg.run.laps > 0 && lap >= cfg.run.laps;
      res.rows.push_back(std::move(row));
      if (end_of_line || laps_done) break;

      const PlantInput u{rate, res.rows.back().a_x_cmd};
      std::optional<std::size_t> sub_hint = hint;
      for (int k = 0; k < substeps; ++k) {
        const TrackingErrors pe = project(line, {s.x, s.y, s.psi}, sub_hint);
        sub_hint = pe.nearest_index;
        s = plant_step(s, u, plant_dt, vp, tires, line.sample(pe.s_proj).phi, cfg.plant);
        if (!s.finite()) {
          throw SimulationError("plant state diverged after telemetry row " + std::to_string(i) + " (t = " +
                                text::format_double(res.rows.back().t) + " s)");
        }
      }
    } catch (const SimulationError&) {
      throw;
    } catch (const std::exception& ex) {
      throw SimulationError("run aborted at telemetry row " + std::to_string(i) + ": " + ex.what());
    }
  }
  res.laps = lap_metrics(res.rows, cfg.run.launch_window);
  res.post_launch = window_metrics(res.rows, cfg.run.launch_window, -1);
  if (!solve_times.empty()) {
    double sum = 0.0;
    for (double v : solve_times) sum += v;
    res.mean_solve_time = sum / static_cast<double>(solve_times.size());
    res.p99_solve_time = percentile(solve_times, 0.99);
  }
  return res;
}

inline void write_summary(std::ostream& os, const ScenarioConfig& cfg, const RunResult& res) {
  auto kv = [&](const char* key, double v) {
    os << key << " = ";
    text::write_double(os, v);
    os << '\n';
  };
  os << "[run]\n";
  os << "name = \"" << cfg.name << "\"\n";
  os << "ticks = " << res.rows.size() << '\n';
  kv("control_period", cfg.run.control_period);
  kv("ts", cfg.mpc.ts());
  kv("prediction_fraction", res.prediction_fraction);
  kv("launch_window", cfg.run.launch_window);
  os << "deterministic_timing = " << (cfg.run.deterministic_timing ? "true" : "false") << '\n';
  os << "completed_laps = " << std::count_if(res.laps.begin(), res.laps.end(), [](const LapMetrics& m) { return m.complete; })
     << '\n';
  os << "handovers_to_mpc = " << res.handovers_to_mpc << '\n';
  os << "handovers_to_pp = " << res.handovers_to_pp << '\n';
  os << "constraint_violations = " << res.constraint_violations << '\n';
  kv("mean_solve_time", res.mean_solve_time);
  kv("p99_solve_time", res.p99_solve_time);
  const LapMetrics& m = res.post_launch;
  os << "\n[post_launch]\n";
  os << "ticks = " << m.ticks << '\n';
  kv("mean_e_y", m.mean_e_y);
  kv("std_e_y", m.std_e_y);
  kv("max_abs_e_y", m.max_abs_e_y);
  kv("max_abs_e_psi", m.max_abs_e_psi);
  kv("mean_solve_time", m.mean_solve_time);
  kv("max_solve_time", m.max_solve_time);
  kv("max_a_y", m.max_a_y);
  os << "fallback_tick_count = " << m.fallback_tick_count << '\n';
}

/// telemetry.csv, laps.csv, summary.toml and sysid_log.csv in `dir`.
inline void write_run(const ScenarioConfig& cfg, const RunResult& res, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw SimulationError("cannot create output directory " + dir.string() + ": " + ec.message());
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw SimulationError("cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("telemetry.csv");
    write_telemetry(f, res.rows);
  }
  {
    auto f = open("laps.csv");
    write_lap_metrics(f, res.laps);
  }
  {
    auto f = open("summary.toml");
    write_summary(f, cfg, res);
  }
  {
    auto f = open("sysid_log.csv");
    write_log(f, res.sysid_log);
  }
}

struct BatchOutcome {
  std::string name;
  std::filesystem::path dir;
  bool ok = false;
  std::string error;
};

/// Runs independent scenarios on up to `jobs` threads, each into root/name
/// unless the scenario names its own output directory.
inline std::vector<BatchOutcome> run_batch(const std::vector<ScenarioConfig>& configs, int jobs,
                                           const std::filesystem::path& root, const std::set<int>& dump_qp = {}) {
  std::vector<BatchOutcome> out(configs.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      const auto& cfg = configs[i];
      BatchOutcome& o = out[i];
      o.name = cfg.name;
      o.dir = cfg.output_dir.empty() ? root / cfg.name : cfg.output_dir;
      try {
        RunOptions opts{dump_qp, o.dir};
        const RunResult res = run_scenario(cfg, opts);
        write_run(cfg, res, o.dir);
        o.ok = true;
      } catch (const std::exception& ex) {
        o.error = ex.what();
      }
    }
  };
  const int n = std::max(1, std::min<int>(jobs, static_cast<int>(configs.size())));
  std::vector<std::thread> pool;
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& th : pool) th.join();
  return out;
}

// --- offline analysis -------------------------------------------------------

struct BinStats {
  std::size_t count = 0;
  double mean = 0.0;
  double std = 0.0;
  double max_abs = 0.0;
};

inline BinStats bin_stats(const std::vector<double>& v) {
  BinStats b;
  b.count = v.size();
  if (v.empty()) return b;
  double sum = 0.0;
  for (double x : v) {
    sum += x;
    b.max_abs = std::max(b.max_abs, std::abs(x));
  }
  b.mean = sum / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - b.mean) * (x - b.mean);
  b.std = std::sqrt(ss / static_cast<double>(v.size()));
  return b;
}

struct VelocityBin {
  double v_lo = 0.0;
  double v_hi = 0.0;
  BinStats e_y;
  BinStats e_psi;
  BinStats model_error;  ///< finite entries only
};

struct GgPoint {
  double a_x = 0.0;
  double a_y = 0.0;
  double v_x = 0.0;
};

struct AnalysisBundle {
  std::vector<VelocityBin> bins;
  std::vector<GgPoint> gg;
  double max_abs_a_y = 0.0;
  double v_at_max_a_y = 0.0;
  double max_abs_a_x = 0.0;
};

inline AnalysisBundle analyze(const std::vector<TelemetryRow>& rows, double bin_width = 2.0) {
  if (!(bin_width > 0.0)) throw PreconditionError("bin width must be positive");
  AnalysisBundle out;
  struct Acc {
    std::vector<double> e_y, e_psi, model;
  };
  std::map<long, Acc> acc;
  for (const auto& r : rows) {
    const auto idx = static_cast<long>(std::floor(r.state.v_x / bin_width));
    Acc& a = acc[idx];
    a.e_y.push_back(r.e_y);
    a.e_psi.push_back(r.e_psi);
    if (std::isfinite(r.model_error_1step)) a.model.push_back(r.model_error_1step);
    out.gg.push_back({r.a_x_cmd, r.a_y, r.state.v_x});
    if (std::abs(r.a_y) > out.max_abs_a_y) {
      out.max_abs_a_y = std::abs(r.a_y);
      out.v_at_max_a_y = r.state.v_x;
    }
    out.max_abs_a_x = std::max(out.max_abs_a_x, std::abs(r.a_x_cmd));
  }
  for (const auto& [idx, a] : acc) {
    VelocityBin b;
    b.v_lo = static_cast<double>(idx) * bin_width;
    b.v_hi = b.v_lo + bin_width;
    b.e_y = bin_stats(a.e_y);
    b.e_psi = bin_stats(a.e_psi);
    b.model_error = bin_stats(a.model);
    out.bins.push_back(b);
  }
  return out;
}

/// error_vs_velocity.csv, model_error_vs_velocity.csv, gg.csv, analysis.toml.
inline void write_analysis(const AnalysisBundle& b, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw SimulationError("cannot create output directory " + dir.string());
  auto open = [&](const char* name) {
    std::ofstream f(dir / name);
    if (!f) throw SimulationError("cannot write " + (dir / name).string());
    return f;
  };
  auto row = [](std::ostream& os, std::initializer_list<double> vals) {
    bool first = true;
    for (double v : vals) {
      if (!first) os << ',';
      first = false;
      text::write_double(os, v);
    }
    os << '\n';
  };
  {
    auto f = open("error_vs_velocity.csv");
    f << "v_lo,v_hi,count,mean_e_y,std_e_y,max_abs_e_y,mean_e_psi,std_e_psi,max_abs_e_psi\n";
    for (const auto& bin : b.bins) {
      row(f, {bin.v_lo, bin.v_hi, static_cast<double>(bin.e_y.count), bin.e_y.mean, bin.e_y.std, bin.e_y.max_abs,
              bin.e_psi.mean, bin.e_psi.std, bin.e_psi.max_abs});
    }
  }
  {
    auto f = open("model_error_vs_velocity.csv");
    f << "v_lo,v_hi,count,mean,std,max_abs\n";
    for (const auto& bin : b.bins) {
      if (bin.model_error.count == 0) continue;
      row(f, {bin.v_lo, bin.v_hi, static_cast<double>(bin.model_error.count), bin.model_error.mean,
              bin.model_error.std, bin.model_error.max_abs});
    }
  }
  {
    auto f = open("gg.csv");
    f << "a_x,a_y,v_x\n";
    for (const auto& p : b.gg) row(f, {p.a_x, p.a_y, p.v_x});
  }
  {
    auto f = open("analysis.toml");
    f << "[gg]\nmax_abs_a_y = " << text::format_double(b.max_abs_a_y) << "\nv_at_max_a_y = "
      << text::format_double(b.v_at_max_a_y) << "\nmax_abs_a_x = " << text::format_double(b.max_abs_a_x)
      << "\npoints = " << b.gg.size() << "\n\n[bins]\ncount = " << b.bins.size() << "\n";
  }
}

}  // namespace lpvmpc
