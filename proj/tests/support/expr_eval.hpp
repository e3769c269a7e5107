#pragma once

// Tiny arithmetic evaluator for formula strings: numbers, named variables,
// + - * / ^, parentheses and unary minus. Used to check matrix entries
// against their transcribed formulas independently of the library code.

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <map>
#include <stdexcept>
#include <string>

namespace testsupport {

class Expr {
 public:
  Expr(std::string text, const std::map<std::string, double>& vars) : s_(std::move(text)), vars_(vars) {}

  double eval() {
    pos_ = 0;
    const double v = sum();
    skip();
    if (pos_ != s_.size()) throw std::runtime_error("trailing input in: " + s_);
    return v;
  }

 private:
  void skip() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  bool take(char c) {
    skip();
    if (pos_ < s_.size() && s_[pos_] == c) {
      ++pos_;
      return true;
    }
    return false;
  }
  double sum() {
    double v = product();
    while (true) {
      if (take('+')) v += product();
      else if (take('-')) v -= product();
      else return v;
    }
  }
  double product() {
    double v = unary();
    while (true) {
      if (take('*')) v *= unary();
      else if (take('/')) v /= unary();
      else return v;
    }
  }
  double unary() {
    if (take('-')) return -unary();
    if (take('+')) return unary();
    return power();
  }
  double power() {
    const double base = atom();
    if (take('^')) return std::pow(base, unary());
    return base;
  }
  double atom() {
    skip();
    if (take('(')) {
      const double v = sum();
      if (!take(')')) throw std::runtime_error("missing ) in: " + s_);
      return v;
    }
    if (pos_ < s_.size() && (std::isdigit(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '.')) {
      char* end = nullptr;
      const double v = std::strtod(s_.c_str() + pos_, &end);
      pos_ = static_cast<std::size_t>(end - s_.c_str());
      return v;
    }
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) || s_[pos_] == '_')) ++pos_;
    if (start == pos_) throw std::runtime_error("unexpected token in: " + s_);
    const std::string name = s_.substr(start, pos_ - start);
    const auto it = vars_.find(name);
    if (it == vars_.end()) throw std::runtime_error("unknown variable " + name);
    return it->second;
  }

  std::string s_;
  const std::map<std::string, double>& vars_;
  std::size_t pos_ = 0;
};

inline double eval(const std::string& text, const std::map<std::string, double>& vars) {
  return Expr(text, vars).eval();
}

}  // namespace testsupport
