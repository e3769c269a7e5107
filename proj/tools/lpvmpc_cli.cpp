#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>

#include "lpvmpc/harness.hpp"
#include "lpvmpc/sysid.hpp"
#include "lpvmpc/track_gen.hpp"

namespace fs = std::filesystem;
using namespace lpvmpc;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kRuntime = 2;

fs::path output_root(const std::string& flag) { return flag.empty() ? default_output_dir() : fs::path(flag); }

void create_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw SimulationError("cannot create output directory " + dir.string() + ": " + ec.message());
}

struct SimArgs {
  std::vector<std::string> configs;
  int jobs = 1;
  std::vector<int> dump_qp;
  std::string out;
  bool deterministic_timing = false;
};

int cmd_sim(const SimArgs& a) {
  std::vector<ScenarioConfig> cfgs;
  std::set<std::string> names;
  for (const auto& path : a.configs) {
    cfgs.push_back(load_scenario(path));
    if (a.deterministic_timing) cfgs.back().run.deterministic_timing = true;
    if (!names.insert(cfgs.back().name).second && cfgs.back().output_dir.empty()) {
      throw ValidationError("two scenarios share the name '" + cfgs.back().name + "'; their outputs would collide");
    }
  }
  for (int t : a.dump_qp) {
    if (t < 0) throw ValidationError("--dump-qp tick must be >= 0");
  }
  const auto outcomes = run_batch(cfgs, a.jobs, output_root(a.out), {a.dump_qp.begin(), a.dump_qp.end()});
  int rc = kOk;
  for (const auto& o : outcomes) {
    if (!o.ok) {
      std::cerr << o.name << ": error: " << o.error << '\n';
      rc = kRuntime;
      continue;
    }
    const auto summary = KeyValueFile::load(o.dir / "summary.toml");
    std::cout << o.name << ": " << o.dir.string() << "\n  ticks " << summary.get_int("run", "ticks", 0)
              << ", completed laps " << summary.get_int("run", "completed_laps", 0) << ", max |e_y| "
              << summary.get_double("post_launch", "max_abs_e_y", 0.0) << " m, fallback ticks "
              << summary.get_int("post_launch", "fallback_tick_count", 0) << ", mean solve "
              << 1e3 * summary.get_double("run", "mean_solve_time", 0.0) << " ms\n";
  }
  return rc;
}

int cmd_analyze(const std::string& telemetry, const std::string& out, double bin_width) {
  const auto rows = load_telemetry(telemetry);
  if (!(bin_width > 0.0)) throw ValidationError("--bin-width must be positive");
  const auto bundle = analyze(rows, bin_width);
  const fs::path dir = out.empty() ? fs::path(telemetry).parent_path() / "analysis" : fs::path(out);
  write_analysis(bundle, dir);
  std::cout << "rows " << rows.size() << ", velocity bins " << bundle.bins.size() << ", max |a_y| "
            << bundle.max_abs_a_y << " m/s^2 at v_x " << bundle.v_at_max_a_y << " m/s\n"
            << "written to " << dir.string() << '\n';
  return kOk;
}

VehicleParams vehicle_or_default(const std::string& path) {
  if (path.empty()) return VehicleParams{};
  if (!fs::exists(path)) throw ValidationError("vehicle file not found: " + path);
  return load_vehicle(path).vp;
}

int cmd_fit(const std::string& log_path, const std::string& init, const std::string& vehicle, const std::string& out) {
  if (!fs::exists(log_path)) throw ValidationError("log file not found: " + log_path);
  TireSet start{presets::kPracticeFront, presets::kPracticeRear};
  if (!init.empty()) {
    if (!fs::exists(init)) throw ValidationError("init parameter file not found: " + init);
    start = read_tires(KeyValueFile::load(init), start);
  }
  const auto log = load_log(log_path);
  const auto rep = identify(log, vehicle_or_default(vehicle), start.front, start.rear);
  write_report(std::cout, rep);
  const fs::path dir = out.empty() ? fs::path(log_path).parent_path() / "fit" : fs::path(out);
  create_dir(dir);
  std::ofstream report(dir / "fit_report.txt");
  std::ofstream points(dir / "fit_points.csv");
  if (!report || !points) throw SimulationError("cannot write fit outputs into " + dir.string());
  write_report(report, rep);
  write_fit_csv(points, rep);
  std::cout << "written to " << dir.string() << '\n';
  return kOk;
}

struct TrackArgs {
  std::string kind;
  double straight = 300.0;
  double radius = 300.0;
  double bank_deg = 0.0;
  double vref = 70.0;
  double vref_end = -1.0;
  double spacing = 1.0;
  double transition = 30.0;
  std::string out;
};

int cmd_gen_track(const TrackArgs& a) {
  TrackSpec t;
  t.kind = a.kind;
  t.straight = a.straight;
  t.radius = a.radius;
  t.bank = a.bank_deg * std::numbers::pi / 180.0;
  t.v_ref = a.vref;
  t.v_ref_end = a.vref_end;
  t.spacing = a.spacing;
  t.bank_transition = a.transition;
  const Raceline line = build_track(t);
  if (a.out.empty()) {
    write_raceline(line, std::cout);
  } else {
    std::ofstream f(a.out);
    if (!f) throw SimulationError("cannot write " + a.out);
    write_raceline(line, f);
  }
  return kOk;
}

struct LogArgs {
  std::string out;
  std::string truth;
  std::string vehicle;
  std::size_t records = 2000;
  double noise = 0.0;
  double outliers = 0.0;
  std::uint64_t seed = 1;
};

int cmd_gen_log(const LogArgs& a) {
  TireSet truth;
  if (!a.truth.empty()) {
    if (!fs::exists(a.truth)) throw ValidationError("truth parameter file not found: " + a.truth);
    truth = read_tires(KeyValueFile::load(a.truth), truth);
  }
  SteadyStateLogSpec spec;
  spec.records = a.records;
  spec.noise_frac = a.noise;
  spec.outlier_frac = a.outliers;
  const auto log = synthetic_steady_state_log(truth.front, truth.rear, vehicle_or_default(a.vehicle), spec, a.seed);
  std::ofstream f(a.out);
  if (!f) throw SimulationError("cannot write " + a.out);
  write_log(f, log);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LPV-MPC lateral control: closed-loop simulation, telemetry analysis and tire identification.\n"
               "Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.\n"
               "Default output root: $" +
               std::string(kOutputDirEnv) + ", else ./lpvmpc_out."};
  app.require_subcommand(1);

  SimArgs sim;
  auto* sim_cmd = app.add_subcommand("sim", "Run closed-loop scenarios");
  sim_cmd->add_option("config", sim.configs, "Scenario file(s)")->required();
  sim_cmd->add_option("-j,--jobs", sim.jobs, "Scenarios run in parallel")->check(CLI::PositiveNumber);
  sim_cmd->add_option("--dump-qp", sim.dump_qp, "Write the QP of this control tick as text (repeatable)");
  sim_cmd->add_option("-o,--out", sim.out, "Output root; each scenario writes into <root>/<name>");
  sim_cmd->add_flag("--deterministic-timing", sim.deterministic_timing,
                    "Log solve time as QP iterations x a fixed cost (byte-reproducible telemetry)");

  std::string telemetry, analyze_out;
  double bin_width = 2.0;
  auto* analyze_cmd = app.add_subcommand("analyze", "Velocity-binned errors, model error and g-g points");
  analyze_cmd->add_option("telemetry", telemetry, "telemetry.csv from sim")->required();
  analyze_cmd->add_option("-o,--out", analyze_out, "Output directory (default: <telemetry dir>/analysis)");
  analyze_cmd->add_option("--bin-width", bin_width, "Velocity bin width [m/s]");

  std::string log_path, init, fit_vehicle, fit_out;
  auto* fit_cmd = app.add_subcommand("fit", "Fit Pacejka parameters per axle from a steady-state log");
  fit_cmd->add_option("log", log_path, "Log CSV: t,v_x,v_y,psi_dot,delta,a_y_imu")->required();
  fit_cmd->add_option("--init", init, "Initial guess: [tires.front] / [tires.rear] (default: practice fit)");
  fit_cmd->add_option("--vehicle", fit_vehicle, "Vehicle file for mass and axle geometry");
  fit_cmd->add_option("-o,--out", fit_out, "Output directory (default: <log dir>/fit)");

  TrackArgs track;
  auto* track_cmd = app.add_subcommand("gen-track", "Write a synthetic raceline CSV");
  track_cmd->add_option("kind", track.kind, "oval | straight | circle")
      ->required()
      ->check(CLI::IsMember({"oval", "straight", "circle"}));
  track_cmd->add_option("--straight", track.straight, "Straight length [m]");
  track_cmd->add_option("--radius", track.radius, "Turn radius [m]");
  track_cmd->add_option("--bank-deg", track.bank_deg, "Turn banking [deg]");
  track_cmd->add_option("--vref", track.vref, "Reference speed [m/s]");
  track_cmd->add_option("--vref-end", track.vref_end, "Straight only: ramp v_ref linearly to this [m/s]");
  track_cmd->add_option("--spacing", track.spacing, "Waypoint spacing [m]");
  track_cmd->add_option("--transition", track.transition, "Oval banking blend length [m]");
  track_cmd->add_option("-o,--out", track.out, "Output file (default: stdout)");

  LogArgs glog;
  auto* log_cmd = app.add_subcommand("gen-log", "Write a synthetic steady-state cornering log");
  log_cmd->add_option("out", glog.out, "Output CSV")->required();
  log_cmd->add_option("--truth", glog.truth, "True tires: [tires.front] / [tires.rear] (default: final-run fit)");
  log_cmd->add_option("--vehicle", glog.vehicle, "Vehicle file for mass and axle geometry");
  log_cmd->add_option("--records", glog.records, "Number of records");
  log_cmd->add_option("--noise", glog.noise, "IMU noise std as a fraction of the front peak acceleration");
  log_cmd->add_option("--outliers", glog.outliers, "Fraction of gross outliers");
  log_cmd->add_option("--seed", glog.seed, "Random seed");

  if (argc > 1 && argv[1][0] != '-') {
    const std::string name = argv[1];
    const auto subs = app.get_subcommands([](CLI::App*) { return true; });
    if (std::none_of(subs.begin(), subs.end(), [&](CLI::App* s) { return s->get_name() == name; })) {
      std::cerr << "error: unknown subcommand '" << name << "'\n\n" << app.help("", CLI::AppFormatMode::All);
      return kInvalid;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    // top-level --help lists every subcommand's flags; subcommand --help stays local
    if (app.get_subcommands().empty()) {
      std::cout << app.help("", CLI::AppFormatMode::All);
      return kOk;
    }
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kInvalid;
  }

  try {
    if (*sim_cmd) return cmd_sim(sim);
    if (*analyze_cmd) return cmd_analyze(telemetry, analyze_out, bin_width);
    if (*fit_cmd) return cmd_fit(log_path, init, fit_vehicle, fit_out);
    if (*track_cmd) return cmd_gen_track(track);
    if (*log_cmd) return cmd_gen_log(glog);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const ParseError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const PreconditionError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kInvalid;
}
