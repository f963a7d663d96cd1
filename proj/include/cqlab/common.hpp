#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cqlab {

// Bad caller-supplied data (shapes, labels, image sizes).
class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Invalid configuration values (temperature, weights, colour counts).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Malformed files; carries the 1-based line number when known.
class LoadError : public std::runtime_error {
 public:
  LoadError(const std::string& what, long line = 0)
      : std::runtime_error(line > 0 ? what + " (line " + std::to_string(line) + ")" : what), line_(line)
  {
  }
  long line() const noexcept { return line_; }

 private:
  long line_;
};

using WarningSink = std::function<void(std::string_view)>;

inline WarningSink& warning_sink()
{
  static WarningSink sink = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(std::string_view msg)
{
  if (warning_sink()) warning_sink()(msg);
}

}  // namespace cqlab
