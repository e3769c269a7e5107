#pragma once

// Pacejka identification from logged runs: IMU-based axle forces against exact
// slip angles, fitted per axle by Levenberg-Marquardt with MAD outlier rejection.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <istream>
#include <numbers>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/text_io.hpp"
#include "lpvmpc/tire_models.hpp"

namespace lpvmpc {

/// Fit could not be attempted or produced nothing usable.
class FitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LogRecord {
  double t = 0.0;
  double v_x = 0.0;
  double v_y = 0.0;
  double psi_dot = 0.0;
  double delta = 0.0;
  double a_y_imu = 0.0;
};

inline constexpr const char* kLogHeader = "t,v_x,v_y,psi_dot,delta,a_y_imu";

inline void write_log(std::ostream& os, const std::vector<LogRecord>& log) {
  os << kLogHeader << '\n';
  for (const auto& r : log) {
    for (double v : {r.t, r.v_x, r.v_y, r.psi_dot, r.delta}) {
      text::write_double(os, v);
      os << ',';
    }
    text::write_double(os, r.a_y_imu);
    os << '\n';
  }
}

inline std::vector<LogRecord> read_log(std::istream& in, const std::string& origin = "<log>") {
  std::string line;
  if (!std::getline(in, line)) throw ParseError(origin + ": empty log");
  if (text::trim(line) != kLogHeader) throw ParseError(origin + ": expected header '" + std::string(kLogHeader) + "'");
  std::vector<LogRecord> out;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    const auto where = origin + ":" + std::to_string(line_no);
    const auto f = text::split(line, ',');
    if (f.size() != 6) throw ParseError(where + ": expected 6 fields");
    LogRecord r{text::parse_double(f[0], where + " t"),     text::parse_double(f[1], where + " v_x"),
                text::parse_double(f[2], where + " v_y"),   text::parse_double(f[3], where + " psi_dot"),
                text::parse_double(f[4], where + " delta"), text::parse_double(f[5], where + " a_y_imu")};
    if (!out.empty() && !(r.t > out.back().t)) throw ValidationError(where + ": t must be strictly increasing");
    out.push_back(r);
  }
  return out;
}

inline std::vector<LogRecord> load_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open log file: " + path.string());
  return read_log(in, path.string());
}

struct SlipSample {
  double alpha = 0.0;  ///< [rad]
  double force = 0.0;  ///< [N]
};

struct AxleSamples {
  std::vector<SlipSample> front;
  std::vector<SlipSample> rear;
};

inline AxleSamples extract_samples(const std::vector<LogRecord>& log, const VehicleParams& vp, double v_floor = 5.0) {
  AxleSamples out;
  for (const auto& r : log) {
    if (!(r.v_x >= v_floor)) continue;
    const SlipAngles a = slip_angles(r.v_x, r.v_y, r.psi_dot, r.delta, vp, SlipMode::exact);
    const AxleForces f = axle_forces_from_imu(r.a_y_imu, r.delta, vp);
    out.front.push_back({a.front, f.front});
    out.rear.push_back({a.rear, f.rear});
  }
  return out;
}

struct FitConfig {
  double k_mad = 3.0;
  double mad_floor = 1.0;  ///< [N]
  int max_outer = 20;
  std::size_t min_samples = 50;
  double min_alpha_span = 0.005;  ///< [rad]
  // Levenberg-Marquardt
  double lambda0 = 1e-3;
  double lambda_down = 0.5;
  double lambda_up = 2.0;
  double tol_cost = 1e-10;
  double tol_step = 1e-10;
  int max_lm_iter = 500;
  /// E is frozen when its relative sensitivity, after removing what the other
  /// parameters explain, falls below this fraction of the largest sensitivity.
  double e_rank_tol = 1e-4;
  /// Deterministic restart grid for the first fit.
  std::vector<double> restart_c{1.2, 1.6, 2.0, 2.4};
  std::vector<double> restart_e{-1.5, -0.5, 0.5};

  void validate() const {
    if (!(k_mad > 0.0 && mad_floor > 0.0)) throw ValidationError("fit needs k_mad > 0 and mad_floor > 0");
    if (max_outer < 1 || max_lm_iter < 1) throw ValidationError("fit iteration limits must be >= 1");
    if (!(lambda0 > 0.0 && lambda_down > 0.0 && lambda_down < 1.0 && lambda_up > 1.0)) {
      throw ValidationError("fit needs lambda0 > 0, 0 < lambda_down < 1 < lambda_up");
    }
  }
};

struct AxleFit {
  PacejkaAxleParams params;
  double c_linear = 0.0;  ///< [N/rad]
  double inlier_fraction = 0.0;
  double residual_rms = 0.0;  ///< over inliers [N]
  int iterations = 0;         ///< outer EM iterations
  int lm_iterations = 0;
  bool converged = false;  ///< inlier set stabilised before the iteration limit
  bool e_frozen = false;
  std::vector<bool> inlier;
};

struct FitResult {
  AxleFit front;
  AxleFit rear;
};

namespace detail {

using Vec4 = Eigen::Vector4d;

inline PacejkaAxleParams to_params(const Vec4& th) { return {th(0), th(1), th(2), th(3)}; }
inline Vec4 to_vec(const PacejkaAxleParams& p) { return {p.b_p, p.c_p, p.d_p, p.e_p}; }

inline Vec4 clip_to_box(Vec4 th) {
  th(0) = std::max(th(0), 1e-9);
  th(1) = std::clamp(th(1), 1e-9, 3.0);
  th(2) = std::max(th(2), 1e-9);
  th(3) = std::min(th(3), 1.0);
  return th;
}

/// Row of d(force)/d(B, C, D, E).
inline Eigen::RowVector4d pacejka_gradient(const Vec4& th, double alpha) {
  const double b = th(0), c = th(1), d = th(2), e = th(3);
  const double x = b * alpha;
  const double phi = x - e * (x - std::atan(x));
  const double at = std::atan(phi);
  const double cs = std::cos(c * at);
  const double dphi = d * cs * c / (1.0 + phi * phi);
  Eigen::RowVector4d g;
  g(0) = dphi * alpha * (1.0 - e * x * x / (1.0 + x * x));
  g(1) = d * cs * at;
  g(2) = std::sin(c * at);
  g(3) = -dphi * (x - std::atan(x));
  return g;
}

struct LmOutcome {
  Vec4 theta;
  double cost = 0.0;
  int iterations = 0;
};

inline double cost_of(const Vec4& th, const std::vector<SlipSample>& s, const std::vector<std::size_t>& idx) {
  const PacejkaAxleParams p = to_params(th);
  double c = 0.0;
  for (std::size_t i : idx) {
    const double r = s[i].force - pacejka_force(p, s[i].alpha);
    c += r * r;
  }
  return 0.5 * c;
}

inline LmOutcome levenberg_marquardt(const std::vector<SlipSample>& s, const std::vector<std::size_t>& idx, Vec4 theta,
                                     bool freeze_e, const FitConfig& cfg) {
  const int nfree = freeze_e ? 3 : 4;
  double lambda = cfg.lambda0;
  double cost = cost_of(theta, s, idx);
  LmOutcome out{theta, cost, 0};
  for (int it = 0; it < cfg.max_lm_iter; ++it) {
    out.iterations = it + 1;
    Eigen::Matrix4d jtj = Eigen::Matrix4d::Zero();
    Vec4 jtr = Vec4::Zero();
    const PacejkaAxleParams p = to_params(theta);
    for (std::size_t i : idx) {
      const Eigen::RowVector4d g = pacejka_gradient(theta, s[i].alpha);
      const double r = s[i].force - pacejka_force(p, s[i].alpha);
      jtj.noalias() += g.transpose() * g;
      jtr.noalias() += g.transpose() * r;
    }
    // Parameters pinned at a bound with the descent direction pointing out stay put.
    std::vector<int> active;
    const Vec4 lo = clip_to_box(Vec4::Constant(-1e300)), hi = clip_to_box(Vec4::Constant(1e300));
    for (int j = 0; j < nfree; ++j) {
      const bool pinned = (theta(j) <= lo(j) && jtr(j) < 0.0) || (theta(j) >= hi(j) && jtr(j) > 0.0);
      if (!pinned) active.push_back(j);
    }
    if (active.empty()) break;
    const auto na = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd damped(na, na);
    Eigen::VectorXd rhs(na);
    double diag_max = 0.0;
    for (int j : active) diag_max = std::max(diag_max, jtj(j, j));
    for (Eigen::Index r = 0; r < na; ++r) {
      rhs(r) = jtr(active[r]);
      for (Eigen::Index c = 0; c < na; ++c) damped(r, c) = jtj(active[r], active[c]);
      damped(r, r) += lambda * std::max(jtj(active[r], active[r]), 1e-300 + 1e-15 * diag_max);
    }
    const Eigen::VectorXd step = damped.ldlt().solve(rhs);
    Vec4 candidate = theta;
    for (Eigen::Index r = 0; r < na; ++r) candidate(active[r]) += step(r);
    candidate = clip_to_box(candidate);
    const double new_cost = cost_of(candidate, s, idx);
    if (std::isfinite(new_cost) && new_cost < cost) {
      const Vec4 moved = candidate - theta;
      bool small_step = true;
      for (int j = 0; j < 4; ++j) small_step = small_step && std::abs(moved(j)) <= cfg.tol_step * (std::abs(theta(j)) + cfg.tol_step);
      const bool small_gain = (cost - new_cost) <= cfg.tol_cost * cost;
      theta = candidate;
      cost = new_cost;
      lambda *= cfg.lambda_down;
      if (small_step || small_gain) break;
    } else {
      lambda *= cfg.lambda_up;
      if (lambda > 1e20) break;
    }
  }
  out.theta = theta;
  out.cost = cost;
  return out;
}

/// Share of E's relative sensitivity not explained by B, C and D.
inline double e_identifiability(const Vec4& th, const std::vector<SlipSample>& s, const std::vector<std::size_t>& idx) {
  Eigen::MatrixXd j(static_cast<Eigen::Index>(idx.size()), 4);
  for (std::size_t r = 0; r < idx.size(); ++r) {
    Eigen::RowVector4d g = pacejka_gradient(th, s[idx[r]].alpha);
    for (int c = 0; c < 4; ++c) g(c) *= std::max(std::abs(th(c)), 1e-3);
    j.row(static_cast<Eigen::Index>(r)) = g;
  }
  const Eigen::MatrixXd others = j.leftCols(3);
  const Eigen::VectorXd e = j.col(3);
  const Eigen::VectorXd coef = others.colPivHouseholderQr().solve(e);
  const double largest = j.colwise().norm().maxCoeff();
  if (!(largest > 0.0)) return 0.0;
  return (e - others * coef).norm() / largest;
}

inline double median(std::vector<double> v) {
  const std::size_t n = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2), v.end());
  const double hi = v[n / 2];
  if (n % 2 == 1) return hi;
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(n / 2)));
}

}  // namespace detail

inline void check_excitation(const std::vector<SlipSample>& samples, const FitConfig& cfg) {
  double span = 0.0;
  for (const auto& s : samples) span = std::max(span, std::abs(s.alpha));
  if (samples.size() < cfg.min_samples || span < cfg.min_alpha_span) {
    throw FitError("insufficient slip excitation: " + std::to_string(samples.size()) + " samples, max |alpha| " +
                   text::format_double(span) + " rad");
  }
}

inline AxleFit fit_pacejka(const std::vector<SlipSample>& samples, const PacejkaAxleParams& init,
                           const FitConfig& cfg = {}) {
  cfg.validate();
  init.validate();
  check_excitation(samples, cfg);
  for (const auto& s : samples) {
    if (!std::isfinite(s.alpha) || !std::isfinite(s.force)) throw ValidationError("non-finite fit sample");
  }
  const std::size_t n = samples.size();
  AxleFit fit;
  fit.inlier.assign(n, true);
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  detail::Vec4 theta = detail::to_vec(init);
  std::vector<double> resid(n), dev(n);
  // Robust split of the samples around the current curve.
  auto classify = [&](const detail::Vec4& th, std::vector<bool>& mask, std::vector<std::size_t>& kept) {
    const PacejkaAxleParams p = detail::to_params(th);
    for (std::size_t i = 0; i < n; ++i) resid[i] = samples[i].force - pacejka_force(p, samples[i].alpha);
    const double centre = detail::median(resid);
    for (std::size_t i = 0; i < n; ++i) dev[i] = std::abs(resid[i] - centre);
    const double threshold = cfg.k_mad * 1.4826 * std::max(detail::median(dev), cfg.mad_floor);
    mask.assign(n, false);
    kept.clear();
    for (std::size_t i = 0; i < n; ++i) {
      mask[i] = dev[i] <= threshold;
      if (mask[i]) kept.push_back(i);
    }
  };
  std::vector<bool> next;
  std::vector<std::size_t> next_idx;
  classify(theta, next, next_idx);
  if (next_idx.size() >= 4) {
    fit.inlier = next;
    idx = next_idx;
  }
  for (int outer = 1; outer <= cfg.max_outer; ++outer) {
    fit.iterations = outer;
    auto lm = detail::levenberg_marquardt(samples, idx, theta, fit.e_frozen, cfg);
    fit.lm_iterations += lm.iterations;
    if (outer == 1 && detail::e_identifiability(detail::to_vec(init), samples, idx) < cfg.e_rank_tol) {
      fit.e_frozen = true;
      lm = detail::levenberg_marquardt(samples, idx, detail::to_vec(init), true, cfg);
      fit.lm_iterations += lm.iterations;
    }
    if (outer == 1) {
      // Multi-start over shape factors at fixed stiffness and peak; C and E
      // trade off against each other and single starts can stall at C's bound.
      const detail::Vec4 base = lm.theta;
      for (double c : cfg.restart_c) {
        for (double e : cfg.restart_e) {
          if (fit.e_frozen && e != cfg.restart_e.front()) continue;
          detail::Vec4 start = base;
          start(0) = base(0) * base(1) / c;
          start(1) = c;
          if (!fit.e_frozen) start(3) = e;
          const auto alt = detail::levenberg_marquardt(samples, idx, start, fit.e_frozen, cfg);
          fit.lm_iterations += alt.iterations;
          if (alt.cost < lm.cost) lm = alt;
        }
      }
    }
    theta = lm.theta;
    classify(theta, next, next_idx);
    if (next == fit.inlier) {
      fit.converged = true;
      break;
    }
    if (next_idx.size() < 4) break;  // keep the last usable set
    fit.inlier = next;
    idx = next_idx;
  }
  fit.params = detail::to_params(theta);
  fit.c_linear = c_linear(fit.params);
  fit.inlier_fraction = static_cast<double>(idx.size()) / static_cast<double>(n);
  fit.residual_rms = std::sqrt(2.0 * detail::cost_of(theta, samples, idx) / static_cast<double>(idx.size()));
  return fit;
}

struct IdentifyReport {
  FitResult fit;
  AxleSamples samples;
  std::size_t records = 0;
};

inline IdentifyReport identify(const std::vector<LogRecord>& log, const VehicleParams& vp,
                               const PacejkaAxleParams& init_front = presets::kPracticeFront,
                               const PacejkaAxleParams& init_rear = presets::kPracticeRear,
                               const FitConfig& cfg = {}) {
  IdentifyReport rep;
  rep.records = log.size();
  rep.samples = extract_samples(log, vp);
  rep.fit.front = fit_pacejka(rep.samples.front, init_front, cfg);
  rep.fit.rear = fit_pacejka(rep.samples.rear, init_rear, cfg);
  return rep;
}

inline void write_report(std::ostream& os, const IdentifyReport& rep) {
  auto fmt = [](double v, int prec) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(prec) << v;
    return s.str();
  };
  os << "records " << rep.records << ", samples " << rep.samples.front.size() << "\n";
  os << "axle   B_p      C_p     D_p[N]      E_p      C_linear[kN/rad]  inliers  rms[N]  iters  E_frozen\n";
  for (const auto& [name, f] : {std::pair<const char*, const AxleFit&>{"front", rep.fit.front}, {"rear ", rep.fit.rear}}) {
    os << name << "  " << fmt(f.params.b_p, 3) << "  " << fmt(f.params.c_p, 3) << "  " << fmt(f.params.d_p, 2) << "  "
       << fmt(f.params.e_p, 3) << "  " << fmt(f.c_linear / 1000.0, 1) << "  " << fmt(f.inlier_fraction, 4) << "  "
       << fmt(f.residual_rms, 2) << "  " << f.iterations << (f.converged ? "" : "*") << "  "
       << (f.e_frozen ? "yes" : "no") << "\n";
  }
  os << "c_linear_front " << text::format_double(rep.fit.front.c_linear) << "\n";
  os << "c_linear_rear " << text::format_double(rep.fit.rear.c_linear) << "\n";
}

/// Measured and fitted force per sample, for plotting the fitted curves.
inline void write_fit_csv(std::ostream& os, const IdentifyReport& rep) {
  os << "axle,alpha,f_measured,f_fitted,inlier\n";
  for (const auto& [name, s, f] : {std::tuple<const char*, const std::vector<SlipSample>&, const AxleFit&>{
                                       "front", rep.samples.front, rep.fit.front},
                                   {"rear", rep.samples.rear, rep.fit.rear}}) {
    for (std::size_t i = 0; i < s.size(); ++i) {
      os << name << ',';
      text::write_double(os, s[i].alpha);
      os << ',';
      text::write_double(os, s[i].force);
      os << ',';
      text::write_double(os, pacejka_force(f.params, s[i].alpha));
      os << ',' << (f.inlier[i] ? 1 : 0) << '\n';
    }
  }
}

// --- synthetic logs ---------------------------------------------------------

/// Slip at which the axle force peaks; a large bound when the curve never turns.
inline double peak_slip(const PacejkaAxleParams& p) {
  if (p.c_p <= 1.0) return 1.0;
  const double phi_star = std::tan(std::numbers::pi / (2.0 * p.c_p));
  double lo = 0.0, hi = 1.0;
  auto phi = [&](double x) { return x - p.e_p * (x - std::atan(x)); };
  while (phi(hi) < phi_star) hi *= 2.0;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (phi(mid) < phi_star ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi) / p.b_p;
}

/// Slip on the rising branch producing `force`; requires |force| below the peak.
inline double inverse_pacejka(const PacejkaAxleParams& p, double force, double peak) {
  if (std::abs(force) >= pacejka_force(p, peak)) throw PreconditionError("force beyond the tire peak");
  double lo = 0.0, hi = peak;
  const double target = std::abs(force);
  for (int i = 0; i < 200 && lo < hi; ++i) {
    const double mid = 0.5 * (lo + hi);
    if (mid == lo || mid == hi) break;
    (pacejka_force(p, mid) < target ? lo : hi) = mid;
  }
  return std::copysign(0.5 * (lo + hi), force);
}

struct SteadyStateLogSpec {
  std::size_t records = 2000;
  double dt = 0.01;          ///< [s]
  double v_min = 20.0;       ///< [m/s]
  double v_max = 70.0;       ///< [m/s]
  double slip_span = 2.0;    ///< driving-axle slip drawn within this multiple of its peak slip
  double noise_frac = 0.0;   ///< IMU noise std as a fraction of the front-peak lateral acceleration
  double outlier_frac = 0.0; ///< share of records with a gross IMU error
  double outlier_mult = 3.0; ///< gross error size in front-peak lateral accelerations
};

/// Flat-road steady cornering records. Each record draws the slip of one axle
/// (alternating) and solves the other from yaw balance, so noiseless
/// extraction lands exactly on both truth curves.
inline std::vector<LogRecord> synthetic_steady_state_log(const PacejkaAxleParams& front, const PacejkaAxleParams& rear,
                                                         const VehicleParams& vp, const SteadyStateLogSpec& spec,
                                                         unsigned seed) {
  const double wb = vp.wheelbase();
  const double a_front = front.d_p * wb / (vp.m * vp.l_r);
  const double front_slip_peak = peak_slip(front), rear_slip_peak = peak_slip(rear);
  const double front_peak = 0.999 * pacejka_force(front, front_slip_peak);
  const double rear_peak = 0.999 * pacejka_force(rear, rear_slip_peak);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0), v_dist(spec.v_min, spec.v_max);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<LogRecord> log;
  log.reserve(spec.records);
  while (log.size() < spec.records) {
    const bool front_driven = log.size() % 2 == 0;
    const double v = v_dist(rng);
    const double drawn = unit(rng) * spec.slip_span * (front_driven ? front_slip_peak : rear_slip_peak);
    double delta = 0.0, ay = 0.0, psi_dot = 0.0, v_y = 0.0;
    bool feasible = true;
    for (int k = 0; k < 100 && feasible; ++k) {
      const double prev = delta;
      double alpha_f = drawn, alpha_r = drawn;
      if (front_driven) {
        const double f_r = pacejka_force(front, alpha_f) * std::cos(delta) * vp.l_f / vp.l_r;
        if (std::abs(f_r) >= rear_peak) feasible = false;
        else alpha_r = inverse_pacejka(rear, f_r, rear_slip_peak);
      } else {
        const double f_f = pacejka_force(rear, alpha_r) * vp.l_r / (vp.l_f * std::cos(delta));
        if (std::abs(f_f) >= front_peak) feasible = false;
        else alpha_f = inverse_pacejka(front, f_f, front_slip_peak);
      }
      ay = pacejka_force(rear, alpha_r) * wb / (vp.m * vp.l_f);
      psi_dot = ay / v;
      v_y = vp.l_r * psi_dot - v * std::tan(alpha_r);
      delta = alpha_f + std::atan((v_y + vp.l_f * psi_dot) / v);
      if (k > 0 && delta == prev) break;
    }
    if (!feasible) continue;
    const double t = static_cast<double>(log.size()) * spec.dt;
    log.push_back({t, v, v_y, psi_dot, delta, ay + spec.noise_frac * a_front * noise(rng)});
  }
  const auto n_out = static_cast<std::size_t>(std::llround(spec.outlier_frac * static_cast<double>(spec.records)));
  std::vector<std::size_t> order(spec.records);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t k = 0; k < n_out; ++k) {
    const double sign = (rng() & 1U) ? 1.0 : -1.0;
    log[order[k]].a_y_imu += sign * spec.outlier_mult * a_front;
  }
  return log;
}

}  // namespace lpvmpc
