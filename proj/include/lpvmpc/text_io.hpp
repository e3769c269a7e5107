#pragma once

// Small text helpers shared by the CSV and key-value readers.

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <iomanip>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "lpvmpc/errors.hpp"

namespace lpvmpc::text {

inline std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

inline std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.emplace_back(trim(line.substr(start, pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

/// Strict number parse: the whole token must be consumed. Accepts "nan"/"inf".
inline bool try_parse_double(std::string_view token, double& value) {
  const std::string s(trim(token));
  if (s.empty()) return false;
  errno = 0;
  char* end = nullptr;
  value = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && errno != ERANGE;
}

inline double parse_double(std::string_view token, std::string_view what) {
  double v = 0.0;
  if (!try_parse_double(token, v)) {
    throw ParseError("cannot parse number '" + std::string(token) + "' for " + std::string(what));
  }
  return v;
}

/// Round-trip exact formatting for doubles written to CSV.
inline void write_double(std::ostream& os, double v) {
  if (std::isnan(v)) {
    os << "nan";
  } else if (std::isinf(v)) {
    os << (v > 0 ? "inf" : "-inf");
  } else {
    os << std::setprecision(std::numeric_limits<double>::max_digits10) << v;
  }
}

inline std::string format_double(double v) {
  std::ostringstream os;
  write_double(os, v);
  return os.str();
}

}  // namespace lpvmpc::text
