#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace cda {

// Configuration that cannot be executed (unknown variant, empty segment, ...).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem / serialization failures.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Snapshot requested from a queue that holds no entries.
struct EmptyQueueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_config(bool cond, const std::string& msg) {
  if (!cond) throw ConfigError(msg);
}

// Contract violations: callers passed data that breaks a documented protocol
// (wrong origin, detached batch where a live one is required, ...).
inline void require_contract(bool cond, const std::string& msg) {
  if (!cond) throw std::logic_error(msg);
}

constexpr double kPi = 3.14159265358979323846;

}  // namespace cda
