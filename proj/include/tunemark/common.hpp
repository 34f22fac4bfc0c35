#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace tunemark {

inline constexpr const char* kVersion = "0.1.0";

// Raised when training or inference produces non-finite values. `group`
// names the parameter group or activation site that went bad.
class numeric_error : public std::runtime_error {
 public:
  explicit numeric_error(const std::string& msg, std::string group = "")
      : std::runtime_error(group.empty() ? msg : msg + " [" + group + "]"),
        group_(std::move(group)) {}
  const std::string& group() const { return group_; }

 private:
  std::string group_;
};

class config_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class data_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

inline void require_range(bool cond, const std::string& msg) {
  if (!cond) throw std::out_of_range(msg);
}

// Process exit codes shared by the CLI and worker processes.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfigError = 2,
  kExitDataError = 3,
  kExitNumericError = 4,
};

}  // namespace tunemark
