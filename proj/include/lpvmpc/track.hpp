#pragma once

// Raceline ingestion, projection of the vehicle pose onto the path, tracking
// errors and the lookahead of scheduling parameters over the MPC horizon.
//
// Conventions: z up, yaw counterclockwise-positive, e_y positive when the CoG
// lies to the left of the path tangent. Banking is stored signed so that the
// lateral term +g*sin(phi) points toward the turn center on banked curves.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/scheduling.hpp"
#include "lpvmpc/text_io.hpp"

namespace lpvmpc {

/// Wraps an angle into (-pi, pi].
inline double wrap_angle(double theta) {
  double r = std::remainder(theta, 2.0 * std::numbers::pi);
  if (r <= -std::numbers::pi) r += 2.0 * std::numbers::pi;
  return r;
}

struct Waypoint {
  double s = 0.0;        ///< arc length [m]
  double x = 0.0;        ///< [m]
  double y = 0.0;        ///< [m]
  double psi_ref = 0.0;  ///< reference yaw [rad]
  double kappa = 0.0;    ///< curvature [1/m], positive for left turns
  double v_ref = 0.0;    ///< reference speed [m/s]
  double phi = 0.0;      ///< banking [rad]
};

struct Pose {
  double x = 0.0;
  double y = 0.0;
  double psi = 0.0;
};

struct TrackingErrors {
  double e_y = 0.0;
  double e_psi = 0.0;
  double e_y_dot = 0.0;
  double e_psi_dot = 0.0;
  std::size_t nearest_index = 0;
  double s_proj = 0.0;
};

class Raceline {
 public:
  static constexpr double kMaxSpacing = 20.0;
  static constexpr double kMaxCurvature = 1.0;
  static constexpr double kMaxBanking = std::numbers::pi / 4.0;

  Raceline(std::vector<Waypoint> waypoints, bool closed)
      : wps_(std::move(waypoints)), closed_(closed) {
    validate();
  }

  const std::vector<Waypoint>& waypoints() const { return wps_; }
  const Waypoint& operator[](std::size_t i) const { return wps_[i]; }
  std::size_t size() const { return wps_.size(); }
  bool closed() const { return closed_; }
  double start_s() const { return wps_.front().s; }
  double end_s() const { return wps_.front().s + length_; }
  /// Path length; includes the closing segment for closed lines.
  double length() const { return length_; }

  std::size_t segment_count() const { return closed_ ? wps_.size() : wps_.size() - 1; }
  std::size_t next_index(std::size_t i) const { return (i + 1 == wps_.size()) ? 0 : i + 1; }

  /// Arc length at the end of segment i (handles the closing segment).
  double segment_end_s(std::size_t i) const {
    return (i + 1 == wps_.size()) ? end_s() : wps_[i + 1].s;
  }

  /// Maps any arc length into the valid range: wraps for closed lines, clamps for open ones.
  double normalize_s(double s) const {
    if (closed_) {
      double r = std::fmod(s - start_s(), length_);
      if (r < 0.0) r += length_;
      return start_s() + r;
    }
    return std::clamp(s, start_s(), wps_.back().s);
  }

  /// Reference values interpolated linearly in arc length.
  Waypoint sample(double s) const {
    const double sn = normalize_s(s);
    std::size_t seg = 0;
    if (sn >= wps_.back().s) {
      seg = closed_ ? wps_.size() - 1 : wps_.size() - 2;
    } else {
      const auto it = std::upper_bound(wps_.begin(), wps_.end(), sn,
                                       [](double v, const Waypoint& w) { return v < w.s; });
      seg = static_cast<std::size_t>(std::distance(wps_.begin(), it)) - 1;
    }
    const double s0 = wps_[seg].s;
    const double s1 = segment_end_s(seg);
    const double t = std::clamp((sn - s0) / (s1 - s0), 0.0, 1.0);
    return interpolate(seg, t);
  }

  /// Point on segment i at fraction t in [0, 1].
  Waypoint interpolate(std::size_t seg, double t) const {
    const Waypoint& a = wps_[seg];
    const Waypoint& b = wps_[next_index(seg)];
    Waypoint w;
    w.s = a.s + t * (segment_end_s(seg) - a.s);
    w.x = a.x + t * (b.x - a.x);
    w.y = a.y + t * (b.y - a.y);
    w.psi_ref = wrap_angle(a.psi_ref + t * wrap_angle(b.psi_ref - a.psi_ref));
    w.kappa = a.kappa + t * (b.kappa - a.kappa);
    w.v_ref = a.v_ref + t * (b.v_ref - a.v_ref);
    w.phi = a.phi + t * (b.phi - a.phi);
    return w;
  }

 private:
  void validate() {
    if (wps_.size() < 3) throw ValidationError("raceline needs at least 3 waypoints");
    for (std::size_t i = 0; i < wps_.size(); ++i) {
      const auto& w = wps_[i];
      const auto where = " at waypoint " + std::to_string(i);
      if (!std::isfinite(w.s) || !std::isfinite(w.x) || !std::isfinite(w.y) || !std::isfinite(w.psi_ref) ||
          !std::isfinite(w.kappa) || !std::isfinite(w.v_ref) || !std::isfinite(w.phi)) {
        throw ValidationError("non-finite value" + where);
      }
      if (std::abs(w.kappa) >= kMaxCurvature) throw ValidationError("|kappa| >= 1" + where);
      if (std::abs(w.phi) >= kMaxBanking) throw ValidationError("|phi| >= pi/4" + where);
      if (w.v_ref <= 0.0) throw ValidationError("v_ref must be positive" + where);
      if (i > 0) {
        const double ds = w.s - wps_[i - 1].s;
        if (!(ds > 0.0)) throw ValidationError("arc length not strictly increasing" + where);
        const double gap = std::hypot(w.x - wps_[i - 1].x, w.y - wps_[i - 1].y);
        if (!(gap > 0.0) || gap > kMaxSpacing) throw ValidationError("waypoint spacing outside (0, 20] m" + where);
      }
    }
    double closing = 0.0;
    if (closed_) {
      const auto& first = wps_.front();
      const auto& last = wps_.back();
      closing = std::hypot(first.x - last.x, first.y - last.y);
      if (closing > kMaxSpacing) throw ValidationError("closed raceline: first/last gap exceeds spacing bound");
      if (closing < 1e-9) {
        // Duplicated closure point: the closing segment is the one ending at it.
        wps_.pop_back();
        if (wps_.size() < 3) throw ValidationError("raceline needs at least 3 waypoints");
        closing = std::hypot(first.x - wps_.back().x, first.y - wps_.back().y);
      }
    }
    length_ = wps_.back().s - wps_.front().s + closing;
  }

  std::vector<Waypoint> wps_;
  bool closed_ = false;
  double length_ = 0.0;
};

/// Signed curvature of the circle through three points (positive for left turns).
inline double circumscribed_curvature(double ax, double ay, double bx, double by, double cx, double cy) {
  const double abx = bx - ax, aby = by - ay;
  const double bcx = cx - bx, bcy = cy - by;
  const double acx = cx - ax, acy = cy - ay;
  const double denom = std::hypot(abx, aby) * std::hypot(bcx, bcy) * std::hypot(acx, acy);
  if (denom <= 0.0) return 0.0;
  return 2.0 * (abx * bcy - aby * bcx) / denom;
}

namespace detail {

inline void fill_arc_length(std::vector<Waypoint>& wps) {
  wps.front().s = 0.0;
  for (std::size_t i = 1; i < wps.size(); ++i) {
    wps[i].s = wps[i - 1].s + std::hypot(wps[i].x - wps[i - 1].x, wps[i].y - wps[i - 1].y);
  }
}

inline void fill_curvature(std::vector<Waypoint>& wps, bool closed) {
  const std::size_t n = wps.size();
  if (n < 3) return;
  for (std::size_t i = 0; i < n; ++i) {
    if (!closed && (i == 0 || i + 1 == n)) continue;
    const auto& a = wps[(i + n - 1) % n];
    const auto& b = wps[i];
    const auto& c = wps[(i + 1) % n];
    wps[i].kappa = circumscribed_curvature(a.x, a.y, b.x, b.y, c.x, c.y);
  }
  if (!closed) {
    wps.front().kappa = wps[1].kappa;
    wps.back().kappa = wps[n - 2].kappa;
  }
}

}  // namespace detail

/// Reads a raceline CSV (`s,x,y,psi_ref,kappa,v_ref,phi`; `s` and `kappa` optional).
/// A `# closed = true` comment line marks the lap as closed.
inline Raceline parse_raceline(std::istream& in, const std::string& origin = "<stream>") {
  std::vector<std::string> header;
  std::map<std::string, std::size_t> col;
  std::vector<Waypoint> wps;
  bool closed = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto body = text::trim(line);
    if (body.empty()) continue;
    if (body.front() == '#') {
      auto directive = text::trim(body.substr(1));
      if (directive.rfind("closed", 0) == 0) {
        auto value = text::trim(directive.substr(6));
        if (!value.empty() && (value.front() == '=' || value.front() == ':')) value = text::trim(value.substr(1));
        if (value == "true") closed = true;
        else if (value == "false") closed = false;
        else throw ParseError(origin + ":" + std::to_string(line_no) + ": closed must be true or false");
      }
      continue;
    }
    if (header.empty()) {
      header = text::split(body, ',');
      for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
      for (const char* required : {"x", "y", "psi_ref", "v_ref", "phi"}) {
        if (!col.count(required)) throw ParseError(origin + ": missing column '" + required + "'");
      }
      continue;
    }
    const auto fields = text::split(body, ',');
    const auto where = origin + ":" + std::to_string(line_no);
    if (fields.size() != header.size()) throw ParseError(where + ": expected " + std::to_string(header.size()) + " fields");
    auto get = [&](const char* name) { return text::parse_double(fields[col.at(name)], where + " " + name); };
    Waypoint w;
    w.x = get("x");
    w.y = get("y");
    w.psi_ref = get("psi_ref");
    w.v_ref = get("v_ref");
    w.phi = get("phi");
    if (col.count("s")) w.s = get("s");
    if (col.count("kappa")) w.kappa = get("kappa");
    wps.push_back(w);
  }
  if (header.empty()) throw ParseError(origin + ": missing header");
  if (wps.size() < 3) throw ValidationError(origin + ": raceline needs at least 3 waypoints");
  if (!col.count("s")) detail::fill_arc_length(wps);
  if (!col.count("kappa")) detail::fill_curvature(wps, closed);
  return Raceline(std::move(wps), closed);
}

inline Raceline load_raceline(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open raceline file: " + path.string());
  return parse_raceline(in, path.string());
}

inline void write_raceline(const Raceline& line, std::ostream& os) {
  os << "# closed = " << (line.closed() ? "true" : "false") << "\n";
  os << "s,x,y,psi_ref,kappa,v_ref,phi\n";
  for (const auto& w : line.waypoints()) {
    text::write_double(os, w.s);
    for (double v : {w.x, w.y, w.psi_ref, w.kappa, w.v_ref, w.phi}) {
      os << ',';
      text::write_double(os, v);
    }
    os << '\n';
  }
}

/// Projects a pose onto the raceline. With a hint, only waypoints within
/// +-kHintWindow of it are scanned; otherwise all waypoints are.
inline constexpr std::size_t kHintWindow = 20;

inline TrackingErrors project(const Raceline& line, const Pose& pose,
                              std::optional<std::size_t> hint = std::nullopt) {
  const std::size_t n = line.size();
  auto dist2 = [&](std::size_t i) {
    const double dx = pose.x - line[i].x;
    const double dy = pose.y - line[i].y;
    return dx * dx + dy * dy;
  };

  std::size_t best = 0;
  double best_d2 = std::numeric_limits<double>::infinity();
  auto consider = [&](std::size_t i) {
    const double d2 = dist2(i);
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  };
  if (hint && *hint < n && 2 * kHintWindow + 1 < n) {
    const auto h = static_cast<long long>(*hint);
    const auto w = static_cast<long long>(kHintWindow);
    for (long long k = h - w; k <= h + w; ++k) {
      if (line.closed()) {
        consider(static_cast<std::size_t>(((k % static_cast<long long>(n)) + static_cast<long long>(n)) %
                                          static_cast<long long>(n)));
      } else if (k >= 0 && k < static_cast<long long>(n)) {
        consider(static_cast<std::size_t>(k));
      }
    }
  } else {
    for (std::size_t i = 0; i < n; ++i) consider(i);
  }

  // Refine on the two segments adjacent to the nearest waypoint.
  std::size_t candidates[2] = {0, 0};
  std::size_t count = 0;
  if (best > 0) candidates[count++] = best - 1;
  else if (line.closed()) candidates[count++] = n - 1;
  if (best < line.segment_count()) candidates[count++] = best;

  std::size_t seg = candidates[0];
  double seg_t = 0.0;
  double seg_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < count; ++c) {
    const std::size_t j = candidates[c];
    const auto& a = line[j];
    const auto& b = line[line.next_index(j)];
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len2 = dx * dx + dy * dy;
    const double t = std::clamp(((pose.x - a.x) * dx + (pose.y - a.y) * dy) / len2, 0.0, 1.0);
    const double fx = a.x + t * dx - pose.x;
    const double fy = a.y + t * dy - pose.y;
    const double d2 = fx * fx + fy * fy;
    if (d2 < seg_d2) {
      seg_d2 = d2;
      seg = j;
      seg_t = t;
    }
  }

  const auto& a = line[seg];
  const auto& b = line[line.next_index(seg)];
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len = std::hypot(dx, dy);
  const Waypoint ref = line.interpolate(seg, seg_t);

  TrackingErrors out;
  // Distance to the segment's supporting line, signed left-positive.
  out.e_y = (dx * (pose.y - a.y) - dy * (pose.x - a.x)) / len;
  out.e_psi = wrap_angle(pose.psi - ref.psi_ref);
  out.nearest_index = best;
  out.s_proj = line.normalize_s(ref.s);
  if (line.closed() && out.s_proj >= line.end_s()) out.s_proj = line.start_s();
  return out;
}

/// Completes the error rates from the body-frame velocities.
inline TrackingErrors error_rates(TrackingErrors errors, double v_x, double v_y, double psi_dot, double kappa) {
  if (!(v_x > 0.0)) throw PreconditionError("error_rates requires v_x > 0");
  errors.e_psi_dot = psi_dot - v_x * kappa;
  errors.e_y_dot = v_y * std::cos(errors.e_psi) + v_x * std::sin(errors.e_psi);
  return errors;
}

/// Scheduling parameters for the N+1 horizon nodes. Node 0 uses the measured
/// speed; later nodes take v_ref and kappa at the arc length reached by
/// propagating s_{k+1} = s_k + v_k * Ts. Banking is held at phi_now.
inline std::vector<SchedulingParams> horizon_schedule(const Raceline& line, double s_proj, double v_now,
                                                      double phi_now, double ts, int n_steps) {
  if (n_steps < 1) throw PreconditionError("horizon_schedule requires N >= 1");
  if (!(ts > 0.0)) throw PreconditionError("horizon_schedule requires Ts > 0");
  std::vector<SchedulingParams> out;
  out.reserve(static_cast<std::size_t>(n_steps) + 1);
  double s = s_proj;
  double v = v_now;
  out.push_back({v_now, line.sample(s).kappa, phi_now});
  for (int k = 1; k <= n_steps; ++k) {
    s += v * ts;
    if (!line.closed()) s = std::min(s, line.waypoints().back().s);
    const Waypoint w = line.sample(s);
    v = w.v_ref;
    out.push_back({w.v_ref, w.kappa, phi_now});
  }
  return out;
}

}  // namespace lpvmpc
