#pragma once

// Key-value configuration files: a TOML subset with [sections], `key = value`
// lines, `#` comments, quoted strings, booleans, numbers and flat number arrays.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lpvmpc/errors.hpp"
#include "lpvmpc/text_io.hpp"

namespace lpvmpc {

class KeyValueFile {
 public:
  KeyValueFile() = default;

  static KeyValueFile parse(std::istream& in, const std::string& origin = "<stream>") {
    KeyValueFile file;
    std::string section;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      std::string_view body = strip_comment(line);
      body = text::trim(body);
      if (body.empty()) continue;
      const auto where = origin + ":" + std::to_string(line_no);
      if (body.front() == '[') {
        if (body.back() != ']' || body.size() < 3) throw ParseError(where + ": malformed section header");
        section = std::string(text::trim(body.substr(1, body.size() - 2)));
        file.values_[section];
        continue;
      }
      const auto eq = body.find('=');
      if (eq == std::string_view::npos) throw ParseError(where + ": expected 'key = value'");
      const auto key = std::string(text::trim(body.substr(0, eq)));
      const auto value = std::string(text::trim(body.substr(eq + 1)));
      if (key.empty() || value.empty()) throw ParseError(where + ": empty key or value");
      file.values_[section][key] = value;
    }
    return file;
  }

  static KeyValueFile load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open config file: " + path.string());
    return parse(in, path.string());
  }

  bool has(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    return s != values_.end() && s->second.count(key) != 0;
  }

  bool has_section(const std::string& section) const { return values_.count(section) != 0; }

  std::optional<std::string> raw(const std::string& section, const std::string& key) const {
    const auto s = values_.find(section);
    if (s == values_.end()) return std::nullopt;
    const auto k = s->second.find(key);
    if (k == s->second.end()) return std::nullopt;
    return k->second;
  }

  double get_double(const std::string& section, const std::string& key, double fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    return text::parse_double(*v, section + "." + key);
  }

  double require_double(const std::string& section, const std::string& key) const {
    const auto v = raw(section, key);
    if (!v) throw ValidationError("missing required key " + section + "." + key);
    return text::parse_double(*v, section + "." + key);
  }

  int get_int(const std::string& section, const std::string& key, int fallback) const {
    const double v = get_double(section, key, fallback);
    if (v != static_cast<double>(static_cast<long long>(v))) {
      throw ParseError(section + "." + key + " must be an integer");
    }
    return static_cast<int>(v);
  }

  bool get_bool(const std::string& section, const std::string& key, bool fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    if (*v == "true") return true;
    if (*v == "false") return false;
    throw ParseError(section + "." + key + " must be true or false");
  }

  std::string get_string(const std::string& section, const std::string& key,
                         const std::string& fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    return unquote(*v, section + "." + key);
  }

  std::vector<double> get_doubles(const std::string& section, const std::string& key,
                                  std::vector<double> fallback) const {
    const auto v = raw(section, key);
    if (!v) return fallback;
    const std::string_view body = text::trim(*v);
    if (body.size() < 2 || body.front() != '[' || body.back() != ']') {
      throw ParseError(section + "." + key + " must be an array [a, b, ...]");
    }
    std::vector<double> out;
    const auto inner = text::trim(body.substr(1, body.size() - 2));
    if (inner.empty()) return out;
    for (const auto& tok : text::split(inner, ',')) out.push_back(text::parse_double(tok, section + "." + key));
    return out;
  }

 private:
  static std::string_view strip_comment(std::string_view line) {
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
      if (line[i] == '"') quoted = !quoted;
      if (line[i] == '#' && !quoted) return line.substr(0, i);
    }
    return line;
  }

  static std::string unquote(const std::string& v, const std::string& what) {
    if (v.size() >= 2 && v.front() == '"' && v.back() == '"') return v.substr(1, v.size() - 2);
    throw ParseError(what + " must be a quoted string");
  }

  std::map<std::string, std::map<std::string, std::string>> values_;
};

}  // namespace lpvmpc
